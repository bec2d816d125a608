import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kdstream.model import AcousticModel, ModelConfig
from kdstream.streaming import (FULL_CONTEXT, INF, ChunkSpec, StreamSession, avg_lookahead_ms,
                                build_chunk_mask, stream_infer, stream_outputs)


def allowed(mask, t):
    return set(np.flatnonzero(mask[t]).tolist())


def test_mask_examples():
    m = build_chunk_mask(4, ChunkSpec(2, 2))
    assert allowed(m, 1) == {0, 1}
    assert allowed(m, 3) == {0, 1, 2, 3}
    assert allowed(build_chunk_mask(6, ChunkSpec(2, 2)), 4) == {2, 3, 4, 5}
    assert build_chunk_mask(4, ChunkSpec(INF, INF)).all()


def test_mask_short_last_chunk_and_zero_history():
    m = build_chunk_mask(5, ChunkSpec(0, 2))
    assert allowed(m, 4) == {4}
    assert allowed(m, 2) == {2, 3}


def test_unaligned_chunk_growth_can_drop_entries():
    assert allowed(build_chunk_mask(4, ChunkSpec(0, 2)), 3) == {2, 3}
    assert allowed(build_chunk_mask(4, ChunkSpec(0, 3)), 3) == {3}


def test_mask_rejects_empty():
    with pytest.raises(ValueError):
        build_chunk_mask(0, ChunkSpec(1, 1))


@settings(max_examples=60, deadline=None)
@given(T=st.integers(1, 30), h=st.integers(0, 10), c=st.integers(1, 10),
       dh=st.integers(0, 5), dc=st.integers(0, 5))
def test_mask_monotone(T, h, c, dh, dc):
    small = build_chunk_mask(T, ChunkSpec(h, c))
    assert not (small & ~build_chunk_mask(T, ChunkSpec(h + dh, c))).any()
    # a longer chunk only grows the window when chunk boundaries stay aligned
    assert not (small & ~build_chunk_mask(T, ChunkSpec(h, c * (1 + dc)))).any()
    assert not (small & ~build_chunk_mask(T, ChunkSpec(INF, c))).any()
    assert not (small & ~build_chunk_mask(T, ChunkSpec(h, INF))).any()
    assert small.diagonal().all()


def test_lookahead():
    assert avg_lookahead_ms(ChunkSpec(600, 48, 20.0)) == 480.0
    assert avg_lookahead_ms(ChunkSpec(0, 1, 20.0)) == 10.0
    assert avg_lookahead_ms(ChunkSpec(600, 48, 10.0)) == 240.0
    with pytest.raises(ValueError, match="non-streaming"):
        avg_lookahead_ms(FULL_CONTEXT)


@settings(max_examples=30, deadline=None)
@given(c=st.integers(1, 100), ms=st.floats(1.0, 50.0), k=st.integers(1, 5))
def test_lookahead_linear(c, ms, k):
    base = avg_lookahead_ms(ChunkSpec(0, c, ms))
    assert math.isclose(avg_lookahead_ms(ChunkSpec(0, c * k, ms)), k * base, rel_tol=1e-12)
    assert math.isclose(avg_lookahead_ms(ChunkSpec(0, c, ms * k)), k * base, rel_tol=1e-12)


def test_spec_parse_and_validation():
    assert ChunkSpec.parse("inf", "inf").is_full
    assert ChunkSpec.parse("600", "48") == ChunkSpec(600, 48)
    with pytest.raises(ValueError):
        ChunkSpec(1, 0)
    with pytest.raises(ValueError):
        ChunkSpec(-1, 2)


def random_setup(seed):
    rng = np.random.default_rng(seed)
    heads = int(rng.choice([1, 2]))
    cfg = ModelConfig(num_pdfs=int(rng.integers(2, 8)), encoder_dim=4 * heads,
                      ffn_dim=int(rng.integers(4, 17)), blocks=int(rng.integers(0, 4)),
                      heads=heads, cnn_channels_first_two=8, cnn_channels_rest=8,
                      group_norm=bool(rng.integers(2)))
    model = AcousticModel.init(cfg, seed)
    frames = int(rng.integers(1, 40))
    wave = rng.normal(size=frames * 160 + int(rng.integers(0, 160))) * 0.5
    hist = int(rng.integers(0, 12)) if rng.random() < 0.8 else INF
    spec = ChunkSpec(hist, int(rng.integers(1, 10)))
    return model, wave, spec


@pytest.mark.parametrize("seed", range(24))
def test_stream_matches_masked_forward(seed):
    model, wave, spec = random_setup(seed)
    T = model.config.num_frames(wave.size)
    ref = model(wave, build_chunk_mask(T, spec))[1].data
    got = stream_outputs(model, wave, spec)
    assert got.shape == ref.shape
    assert np.max(np.abs(ref)) > 0
    assert np.max(np.abs(got - ref)) <= 1e-5 * np.max(np.abs(ref))


def test_full_spec_mask_is_bitwise_full_context():
    model, wave, _ = random_setup(3)
    T = model.config.num_frames(wave.size)
    a = model(wave)[1].data
    b = model(wave, build_chunk_mask(T, FULL_CONTEXT))[1].data
    assert a.tobytes() == b.tobytes()


def test_large_history_equals_full_context():
    model, wave, _ = random_setup(5)
    T = model.config.num_frames(wave.size)
    chunk = 3
    got = stream_outputs(model, wave, ChunkSpec(T, chunk))
    full = build_chunk_mask(T, ChunkSpec(T, chunk))
    ref = model(wave, full)[1].data
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-10 * np.max(np.abs(ref)))


class TracingWave:
    """Waveform wrapper recording the furthest sample ever read."""

    def __init__(self, data):
        self.data = data
        self.max_read = 0

    def __len__(self):
        return len(self.data)

    def __getitem__(self, index):
        stop = index.stop if isinstance(index, slice) else index + 1
        self.max_read = max(self.max_read, min(stop, len(self.data)))
        return self.data[index]


@pytest.mark.parametrize("seed", range(6))
def test_stream_reads_no_future_audio(seed):
    model, wave, spec = random_setup(seed)
    traced = TracingWave(wave)
    spf = model.config.samples_per_frame
    emitted = 0
    for out in stream_infer(model, traced, spec):
        emitted += out.shape[0]
        # output for this chunk exists before any sample past its last frame is read
        assert traced.max_read <= emitted * spf
    assert emitted == model.config.num_frames(wave.size)


def test_stream_history_bound():
    model, wave, _ = random_setup(7)
    if model.config.blocks == 0:
        model = AcousticModel.init(ModelConfig(num_pdfs=3, encoder_dim=4, ffn_dim=4, blocks=2,
                                               heads=1, cnn_channels_first_two=8,
                                               cnn_channels_rest=8), 0)
    spec = ChunkSpec(5, 3)
    session = StreamSession(model, spec)
    list(stream_infer(model, np.random.default_rng(0).normal(size=160 * 40), spec, session))
    assert session.peak_history <= spec.hist_frames + spec.chunk_frames
    assert all(k.shape[1] <= spec.hist_frames for k, _ in session.kv_cache)


def test_stream_requires_finite_chunk_and_causal_cnn():
    m = AcousticModel.init(ModelConfig(num_pdfs=3, encoder_dim=4, ffn_dim=4, blocks=1, heads=1,
                                       cnn_channels_first_two=8, cnn_channels_rest=8), 0)
    with pytest.raises(ValueError):
        StreamSession(m, FULL_CONTEXT)
    nc = AcousticModel.init(ModelConfig(num_pdfs=3, encoder_dim=4, ffn_dim=4, blocks=1, heads=1,
                                        cnn_channels_first_two=8, cnn_channels_rest=8,
                                        causal_cnn=False), 0)
    with pytest.raises(ValueError, match="causal"):
        StreamSession(nc, ChunkSpec(1, 1))
