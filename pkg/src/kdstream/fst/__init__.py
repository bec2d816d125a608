from .build import (PhoneGraph, build_decoding_graph, build_denominator_graph,
                    numerator_from_lattice, numerator_from_transcript,
                    path_count_without_self_loops)
from .graph import Arc, GraphError, Wfst, union_of_chains
from .lexicon import SILENCE, HmmTopology, Lexicon, LexiconError, phones_from_text
from .search import (EmptyCompositionError, Lattice, LatticePath, brute_force_logZ,
                     decode_nbest, forward_backward, iter_paths, retime_lattice,
                     viterbi_decode)

__all__ = [
    "Arc", "EmptyCompositionError", "GraphError", "HmmTopology", "Lattice", "LatticePath",
    "Lexicon", "LexiconError", "PhoneGraph", "SILENCE", "Wfst", "brute_force_logZ",
    "build_decoding_graph", "build_denominator_graph", "decode_nbest", "forward_backward",
    "iter_paths", "numerator_from_lattice", "numerator_from_transcript",
    "path_count_without_self_loops", "phones_from_text", "retime_lattice", "union_of_chains",
    "viterbi_decode",
]
