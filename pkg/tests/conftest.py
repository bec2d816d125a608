import numpy as np
import pytest

from kdstream.fst import Arc, GraphError, Lexicon, Wfst


def random_graph(rng, max_states=6, max_pdfs=4, max_out=3):
    """Random trimmed acceptor; retries until something is accepted."""
    while True:
        n = int(rng.integers(1, max_states + 1))
        arcs = []
        for s in range(n):
            for _ in range(int(rng.integers(0, max_out + 1))):
                arcs.append(Arc(s, int(rng.integers(n)), int(rng.integers(max_pdfs)),
                                int(rng.integers(3)), float(rng.normal())))
        finals = {int(s): float(rng.normal()) for s in range(n) if rng.random() < 0.4}
        if not finals:
            continue
        try:
            return Wfst(n, 0, tuple(arcs), finals).trim()
        except GraphError:
            continue


@pytest.fixture
def ab_lexicon():
    return Lexicon.from_entries([("a", ["A"]), ("b", ["B"])])


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
