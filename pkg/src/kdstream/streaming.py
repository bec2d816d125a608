"""Chunked attention masks, look-ahead accounting and incremental inference."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autodiff import Tensor, concat
from .model import AcousticModel

INF = math.inf


@dataclass(frozen=True)
class ChunkSpec:
    """Attention window: the current chunk plus ``hist_frames`` frames before it."""

    hist_frames: float = INF
    chunk_frames: float = INF
    frame_duration_ms: float = 20.0

    def __post_init__(self):
        for name in ("hist_frames", "chunk_frames"):
            v = getattr(self, name)
            if v != INF:
                if v != int(v):
                    raise ValueError(f"{name} must be an integer or inf, got {v}")
                object.__setattr__(self, name, int(v))
        if self.hist_frames != INF and self.hist_frames < 0:
            raise ValueError("hist_frames must be >= 0")
        if self.chunk_frames != INF and self.chunk_frames < 1:
            raise ValueError("chunk_frames must be >= 1")
        if not self.frame_duration_ms > 0:
            raise ValueError("frame_duration_ms must be positive")

    @property
    def is_full(self) -> bool:
        return self.chunk_frames == INF

    @classmethod
    def parse(cls, hist: str | float, chunk: str | float, frame_duration_ms: float = 20.0) -> "ChunkSpec":
        def val(x):
            return INF if str(x).strip().lower() in ("inf", "+inf", "infinity") else int(x)
        return cls(val(hist), val(chunk), frame_duration_ms)

    def __str__(self) -> str:
        def f(x):
            return "inf" if x == INF else str(x)
        return f"({f(self.hist_frames)},{f(self.chunk_frames)})"


FULL_CONTEXT = ChunkSpec()


def build_chunk_mask(total_frames: int, spec: ChunkSpec) -> np.ndarray:
    """mask[t, j] is True when frame t may attend to frame j."""
    if total_frames < 1:
        raise ValueError("total_frames must be >= 1")
    if spec.is_full:
        return np.ones((total_frames, total_frames), dtype=bool)
    t = np.arange(total_frames)
    start = (t // spec.chunk_frames) * spec.chunk_frames
    end = np.minimum(start + spec.chunk_frames, total_frames)
    lo = np.zeros_like(start) if spec.hist_frames == INF else np.maximum(start - spec.hist_frames, 0)
    j = t[None, :]
    return (j >= lo[:, None]) & (j < end[:, None])


def mask_for(total_frames: int, spec: ChunkSpec | None) -> np.ndarray | None:
    """None (plain full context) for the full spec, else the chunk mask."""
    if spec is None or spec.is_full:
        return None
    return build_chunk_mask(total_frames, spec)


def avg_lookahead_ms(spec: ChunkSpec) -> float:
    """Mean future audio a frame waits for: half a chunk."""
    if spec.is_full:
        raise ValueError("non-streaming spec has no finite look-ahead")
    return spec.chunk_frames * spec.frame_duration_ms / 2


class StreamSession:
    """Incremental state for one utterance: conv input buffers and per-block K/V history."""

    def __init__(self, model: AcousticModel, spec: ChunkSpec):
        if spec.is_full:
            raise ValueError("streaming needs a finite chunk size")
        if not model.config.causal_cnn:
            raise ValueError("streaming needs a causal CNN")
        self.model = model
        self.spec = spec
        cfg = model.config
        chans = [1] + cfg.channels[:-1]
        self.conv_buffers = [np.zeros((k - s, c)) for k, s, c in
                             zip(cfg.cnn_kernels, cfg.cnn_strides, chans)]
        self.kv_cache: list[tuple[Tensor, Tensor] | None] = [None] * cfg.blocks
        self.peak_history = 0
        self.frames_out = 0

    def _cnn(self, samples: np.ndarray) -> np.ndarray:
        x = samples.reshape(-1, 1)
        cfg = self.model.config
        for layer, (k, s) in enumerate(zip(cfg.cnn_kernels, cfg.cnn_strides)):
            buf = np.concatenate([self.conv_buffers[layer], x])
            n_out = (buf.shape[0] - k) // s + 1 if buf.shape[0] >= k else 0
            if n_out == 0:
                self.conv_buffers[layer] = buf
                return np.zeros((0, cfg.channels[-1]))
            used = buf[:(n_out - 1) * s + k]
            x = self.model.cnn_layer(Tensor(used), layer, pad=(0, 0)).data
            self.conv_buffers[layer] = buf[n_out * s:]
        return x

    def _keep(self, t: Tensor) -> Tensor:
        h = self.spec.hist_frames
        if h == INF or t.shape[1] <= h:
            return t
        return Tensor(t.data[:, t.shape[1] - h:] if h else t.data[:, :0])

    def push(self, samples: np.ndarray) -> np.ndarray:
        """Consume the audio of one chunk and return its (frames, m) outputs."""
        feats = self._cnn(np.asarray(samples, dtype=np.float64))
        if feats.shape[0] == 0:
            return np.zeros((0, self.model.config.num_pdfs))
        m = self.model
        x = m.project_features(Tensor(feats))
        for b in range(m.config.blocks):
            q, k, v = m.qkv(b, x)
            cached = self.kv_cache[b]
            if cached is not None and cached[0].shape[1]:
                k = concat([cached[0], k], axis=1)
                v = concat([cached[1], v], axis=1)
            self.peak_history = max(self.peak_history, k.shape[1])
            x = m.feed_forward(b, m.attend(b, x, q, k, v, None))
            self.kv_cache[b] = (self._keep(k), self._keep(v))
        self.frames_out += feats.shape[0]
        return m.head(x).data


def stream_infer(model: AcousticModel, waveform, spec: ChunkSpec,
                 session: StreamSession | None = None) -> Iterator[np.ndarray]:
    """Yield the output rows of each chunk as soon as its audio has been read.

    ``waveform`` only needs ``len`` and slicing; chunk c reads samples up to
    the end of its last frame and nothing beyond.
    """
    session = session or StreamSession(model, spec)
    spf = model.config.samples_per_frame
    total = model.config.num_frames(len(waveform))
    if total < 1:
        raise ValueError(f"waveform has {len(waveform)} samples, shorter than one frame ({spf})")
    for start in range(0, total, spec.chunk_frames):
        end = min(start + spec.chunk_frames, total)
        yield session.push(np.asarray(waveform[start * spf:end * spf], dtype=np.float64))


def stream_outputs(model: AcousticModel, waveform, spec: ChunkSpec) -> np.ndarray:
    return np.concatenate(list(stream_infer(model, waveform, spec)))
