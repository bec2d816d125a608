"""Raw-waveform acoustic model: strided CNN encoder, pre-norm transformer, linear head."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .autodiff import (Tensor, bias_add, gelu, layer_norm, matmul, reshape, scale, slice_,
                       softmax_rows, transpose, unfold, add)


@dataclass(frozen=True)
class ModelConfig:
    num_pdfs: int
    encoder_dim: int = 64
    ffn_dim: int = 256
    blocks: int = 8
    heads: int = 4
    cnn_channels_first_two: int = 32
    cnn_channels_rest: int = 32
    cnn_kernels: tuple[int, ...] = (10, 8, 4, 4, 4)
    cnn_strides: tuple[int, ...] = (5, 4, 2, 2, 2)
    group_norm: bool = True
    norm_groups: int = 4
    causal_cnn: bool = True
    sample_rate: int = 8000

    def __post_init__(self):
        object.__setattr__(self, "cnn_kernels", tuple(self.cnn_kernels))
        object.__setattr__(self, "cnn_strides", tuple(self.cnn_strides))
        if self.num_pdfs < 1:
            raise ValueError("num_pdfs must be positive")
        if self.encoder_dim % self.heads:
            raise ValueError(f"heads={self.heads} must divide encoder_dim={self.encoder_dim}")
        if len(self.cnn_kernels) != len(self.cnn_strides) or not self.cnn_kernels:
            raise ValueError("cnn_kernels and cnn_strides must be non-empty and equal length")
        if any(k < s for k, s in zip(self.cnn_kernels, self.cnn_strides)):
            raise ValueError("each CNN kernel must be at least its stride")
        if self.blocks < 0:
            raise ValueError("blocks must be >= 0")
        for c in self.channels:
            if c % self.groups:
                raise ValueError(f"{self.groups} norm groups do not divide {c} channels")
            if c // self.groups < 2:
                # normalising a single channel erases it, leaving only the bias
                raise ValueError(f"{self.groups} norm groups over {c} channels leave one channel per group")

    @property
    def cnn_layers(self) -> int:
        return len(self.cnn_kernels)

    @property
    def channels(self) -> list[int]:
        return [self.cnn_channels_first_two if i < 2 else self.cnn_channels_rest
                for i in range(self.cnn_layers)]

    @property
    def groups(self) -> int:
        return self.norm_groups if self.group_norm else 1

    @property
    def samples_per_frame(self) -> int:
        return math.prod(self.cnn_strides)

    @property
    def frame_duration_ms(self) -> float:
        return 1000.0 * self.samples_per_frame / self.sample_rate

    def num_frames(self, num_samples: int) -> int:
        return num_samples // self.samples_per_frame

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cnn_kernels"] = list(self.cnn_kernels)
        d["cnn_strides"] = list(self.cnn_strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, in canonical (initialisation) order."""
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 1
    for i, (k, c) in enumerate(zip(config.cnn_kernels, config.channels)):
        shapes[f"cnn.{i}.weight"] = (k * c_in, c)
        shapes[f"cnn.{i}.norm.gain"] = (c,)
        shapes[f"cnn.{i}.norm.bias"] = (c,)
        c_in = c
    d, f = config.encoder_dim, config.ffn_dim
    shapes["feat_norm.gain"] = (c_in,)
    shapes["feat_norm.bias"] = (c_in,)
    shapes["proj.weight"] = (c_in, d)
    shapes["proj.bias"] = (d,)
    for b in range(config.blocks):
        p = f"blocks.{b}."
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        shapes[p + "attn.qkv.weight"] = (d, 3 * d)
        shapes[p + "attn.qkv.bias"] = (3 * d,)
        shapes[p + "attn.out.weight"] = (d, d)
        shapes[p + "attn.out.bias"] = (d,)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
        shapes[p + "ffn.in.weight"] = (d, f)
        shapes[p + "ffn.in.bias"] = (f,)
        shapes[p + "ffn.out.weight"] = (f, d)
        shapes[p + "ffn.out.bias"] = (d,)
    shapes["final_norm.gain"] = (d,)
    shapes["final_norm.bias"] = (d,)
    shapes["pred.weight"] = (d, config.num_pdfs)
    shapes["pred.bias"] = (config.num_pdfs,)
    return shapes


def param_count(config: ModelConfig) -> int:
    """Closed form of the number of scalar parameters."""
    chans = config.channels
    c_in = [1] + chans[:-1]
    cnn = sum(k * ci * c + 2 * c for k, ci, c in zip(config.cnn_kernels, c_in, chans))
    d, f, m, c = config.encoder_dim, config.ffn_dim, config.num_pdfs, chans[-1]
    front = 2 * c + c * d + d
    block = 4 * d * d + 3 * d + d + 2 * d * f + f + d + 4 * d
    return cnn + front + config.blocks * block + 2 * d + d * m + m


def init_param(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".gain"):
        return np.ones(shape)
    if name.endswith(".bias"):
        return np.zeros(shape)
    bound = 1.0 / math.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape)


class AcousticModel:
    """Named float64 parameters plus the forward computation."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        shapes = param_shapes(config)
        if set(params) != set(shapes):
            raise ValueError(f"parameter names do not match config: "
                             f"{sorted(set(params) ^ set(shapes))[:5]}")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: shape {params[name].shape} != {shape}")
        self.config = config
        self.params = {name: params[name] for name in shapes}

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "AcousticModel":
        rng = np.random.default_rng(seed)
        return cls(config, {name: Tensor(init_param(name, shape, rng), requires_grad=True, name=name)
                            for name, shape in param_shapes(config).items()})

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def clone(self) -> "AcousticModel":
        return AcousticModel(self.config, {
            n: Tensor(p.data.copy(), requires_grad=True, name=n) for n, p in self.params.items()})

    def equal(self, other: "AcousticModel") -> bool:
        return (self.config == other.config and all(
            np.array_equal(p.data, other.params[n].data) for n, p in self.params.items()))

    # -- CNN -----------------------------------------------------------------

    def cnn_padding(self, layer: int) -> tuple[int, int]:
        k, s = self.config.cnn_kernels[layer], self.config.cnn_strides[layer]
        if self.config.causal_cnn:
            return k - s, 0
        return (k - s) // 2, (k - s) - (k - s) // 2

    def cnn_layer(self, x: Tensor, layer: int, pad: tuple[int, int] | None = None) -> Tensor:
        """One strided conv (as unfold + matmul), per-frame group norm, GELU."""
        k, s = self.config.cnn_kernels[layer], self.config.cnn_strides[layer]
        left, right = self.cnn_padding(layer) if pad is None else pad
        p = f"cnn.{layer}."
        h = matmul(unfold(x, k, s, left, right), self.params[p + "weight"])
        h = layer_norm(h, self.params[p + "norm.gain"], self.params[p + "norm.bias"],
                       groups=self.config.groups)
        return gelu(h)

    def project_features(self, feats: Tensor) -> Tensor:
        h = layer_norm(feats, self.params["feat_norm.gain"], self.params["feat_norm.bias"])
        return bias_add(matmul(h, self.params["proj.weight"]), self.params["proj.bias"])

    def cnn_encode(self, waveform) -> Tensor:
        """(samples,) -> (frames, encoder_dim); frames = samples // samples_per_frame."""
        x = np.asarray(getattr(waveform, "data", waveform), dtype=np.float64).reshape(-1)
        spf = self.config.samples_per_frame
        if x.size < spf:
            raise ValueError(f"waveform has {x.size} samples, shorter than one frame ({spf})")
        x = x[:self.config.num_frames(x.size) * spf]
        h = Tensor(x.reshape(-1, 1))
        for layer in range(self.config.cnn_layers):
            h = self.cnn_layer(h, layer)
        return self.project_features(h)

    # -- transformer ---------------------------------------------------------

    def qkv(self, b: int, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Pre-normed projections split into heads: three (H, T, dh) tensors."""
        p = f"blocks.{b}."
        c = self.config
        h = layer_norm(x, self.params[p + "ln1.gain"], self.params[p + "ln1.bias"])
        qkv = bias_add(matmul(h, self.params[p + "attn.qkv.weight"]), self.params[p + "attn.qkv.bias"])
        t = x.shape[0]
        heads = transpose(reshape(qkv, (t, 3, c.heads, c.encoder_dim // c.heads)), (1, 2, 0, 3))
        return slice_(heads, 0), slice_(heads, 1), slice_(heads, 2)

    def attend(self, b: int, x: Tensor, q: Tensor, k: Tensor, v: Tensor, mask) -> Tensor:
        """Residual attention output for queries ``q`` over keys/values ``k``, ``v``."""
        p = f"blocks.{b}."
        c = self.config
        dh = c.encoder_dim // c.heads
        scores = scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
        ctx = matmul(softmax_rows(scores, mask), v)
        ctx = reshape(transpose(ctx, (1, 0, 2)), (x.shape[0], c.encoder_dim))
        out = bias_add(matmul(ctx, self.params[p + "attn.out.weight"]), self.params[p + "attn.out.bias"])
        return add(x, out)

    def feed_forward(self, b: int, x: Tensor) -> Tensor:
        p = f"blocks.{b}."
        h = layer_norm(x, self.params[p + "ln2.gain"], self.params[p + "ln2.bias"])
        h = gelu(bias_add(matmul(h, self.params[p + "ffn.in.weight"]), self.params[p + "ffn.in.bias"]))
        h = bias_add(matmul(h, self.params[p + "ffn.out.weight"]), self.params[p + "ffn.out.bias"])
        return add(x, h)

    def block(self, b: int, x: Tensor, mask=None) -> Tensor:
        q, k, v = self.qkv(b, x)
        return self.feed_forward(b, self.attend(b, x, q, k, v, mask))

    def head(self, x: Tensor) -> Tensor:
        h = layer_norm(x, self.params["final_norm.gain"], self.params["final_norm.bias"])
        return bias_add(matmul(h, self.params["pred.weight"]), self.params["pred.bias"])

    def encode(self, z: Tensor, mask=None) -> tuple[list[Tensor], Tensor]:
        """Transformer + head on projected CNN features ``z`` (frames, d)."""
        t = z.shape[0]
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (t, t):
                raise ValueError(f"mask shape {mask.shape} does not match {t} frames")
        hiddens = []
        h = z
        for b in range(self.config.blocks):
            h = self.block(b, h, mask)
            hiddens.append(h)
        return hiddens, self.head(h)

    def forward(self, waveform, mask=None) -> tuple[list[Tensor], Tensor]:
        """Block outputs and per-frame pdf scores; ``mask=None`` is full context."""
        return self.encode(self.cnn_encode(waveform), mask)

    def __call__(self, waveform, mask=None):
        return self.forward(waveform, mask)


# ---------------------------------------------------------------------------
# teacher/student initialisation

def share_teacher_params(teacher: AcousticModel, student_config: ModelConfig,
                         seed: int = 0) -> AcousticModel:
    """Fresh student that copies the teacher's shape-compatible CNN and head.

    CNN layers are copied where shapes agree.  When the first two layers
    are narrower than the teacher's, they stay fresh and layer 3 takes the
    slice of the teacher kernel that reads the student's input channels.
    The prediction layer and final norm are copied only when the encoder
    dims match.  Transformer blocks and the input projection are always fresh.
    """
    if teacher.config.num_pdfs != student_config.num_pdfs:
        raise ValueError(f"output dims differ: teacher {teacher.config.num_pdfs}, "
                         f"student {student_config.num_pdfs}")
    student = AcousticModel.init(student_config, seed)
    same_dim = teacher.config.encoder_dim == student_config.encoder_dim
    for name, dst in student.params.items():
        src = teacher.params.get(name)
        if src is None or not name.startswith(("cnn.", "feat_norm.", "pred.", "final_norm.")):
            continue
        if name.startswith(("pred.", "final_norm.")) and not same_dim:
            continue
        if src.shape == dst.shape:
            dst.data = src.data.copy()
        elif name.endswith(".weight") and name.startswith("cnn.") and src.shape[1] == dst.shape[1]:
            k = student_config.cnn_kernels[int(name.split(".")[1])]
            c_src, c_dst = src.shape[0] // k, dst.shape[0] // k
            if c_dst < c_src and teacher.config.cnn_kernels == student_config.cnn_kernels:
                w = src.data.reshape(k, c_src, -1)[:, :c_dst, :]
                dst.data = np.ascontiguousarray(w).reshape(dst.shape)
    return student


def init_streaming_from(model: AcousticModel) -> AcousticModel:
    """Parameter-for-parameter copy; streaming comes only from the mask."""
    return model.clone()


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"KDSCKPT\x00"
_VERSION = 1


def save_checkpoint(model: AcousticModel, path, extra: dict | None = None) -> None:
    """Deterministic binary: magic, version, JSON header, raw little-endian float64."""
    header = {
        "config": model.config.to_dict(),
        "params": [[n, list(p.shape)] for n, p in model.params.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQ", _VERSION, len(blob)))
        f.write(blob)
        for p in model.params.values():
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[AcousticModel, dict]:
    raw = Path(path).read_bytes()
    if raw[:len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    off = len(_MAGIC)
    version, n = struct.unpack_from("<IQ", raw, off)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += struct.calcsize("<IQ")
    header = json.loads(raw[off:off + n])
    off += n
    config = ModelConfig.from_dict(header["config"])
    params = {}
    for name, shape in header["params"]:
        size = math.prod(shape)
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=off).astype(np.float64).reshape(shape)
        off += 8 * size
        params[name] = Tensor(arr, requires_grad=True, name=name)
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes")
    return AcousticModel(config, params), header["extra"]
