"""Encoder / weight head / frame aggregation / decoder, on the autodiff core.

The pipeline: stack-and-project subsampling, pre-norm self-attention encoder
blocks, a per-frame sigmoid weight head, valley-based pooling of the hidden
frames, then a decoder of the same pre-norm attention blocks over the pooled
sequence (with a fresh positional signal) and a linear output head over the
token alphabet plus blank. Optional self-conditioning taps emit token logits
at configured blocks and mix their softmax back into the hidden stream; the
tapped logits feed auxiliary losses during training.

Checkpoints are a small self-describing binary container; the byte layout is
documented in the README.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from typing import BinaryIO

import numpy as np

from . import numcore as nc
from . import uma

CHECKPOINT_MAGIC = b"UMCK"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    def __init__(self, found: int, expected: int):
        super().__init__(f"checkpoint format version {found}, this build reads {expected}")
        self.found = found
        self.expected = expected


@dataclass
class ModelConfig:
    d_in: int = 16
    d_model: int = 64
    n_heads: int = 2
    n_encoder_blocks: int = 4
    n_decoder_blocks: int = 2
    d_ff: int = 128
    subsample: int = 4
    vocab: int = 20
    enc_selfcond: tuple[int, ...] = (2, 3)   # 1-based block indices
    dec_selfcond: tuple[int, ...] = (1,)
    dropout: float = 0.0
    seed: int = 0
    use_positional: bool = True

    def __post_init__(self):
        self.enc_selfcond = tuple(self.enc_selfcond)
        self.dec_selfcond = tuple(self.dec_selfcond)
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.subsample < 1:
            raise ValueError("subsample factor must be >= 1")
        if any(b < 1 or b > self.n_encoder_blocks for b in self.enc_selfcond):
            raise ValueError(f"enc_selfcond {self.enc_selfcond} outside 1..{self.n_encoder_blocks}")
        if any(b < 1 or b > self.n_decoder_blocks for b in self.dec_selfcond):
            raise ValueError(f"dec_selfcond {self.dec_selfcond} outside 1..{self.n_decoder_blocks}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_out(self) -> int:
        return self.vocab + 1  # trailing blank


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})


@dataclass
class ForwardTrace:
    """Every stage of one forward pass; tensors when taped, usable either way."""

    h: nc.Tensor                     # (T', d_model) encoder output
    alpha: nc.Tensor                 # (T', 1) aggregation weights
    segmentation: uma.Segmentation
    c: nc.Tensor                     # (I, d_model) pooled features
    o: nc.Tensor                     # (I, d_model) decoder output
    logits: nc.Tensor                # (I, vocab+1)
    intermediates: list[tuple[str, nc.Tensor]] = field(default_factory=list)

    @property
    def downsampled_len(self) -> int:
        return self.h.data.shape[0]

    @property
    def output_len(self) -> int:
        return self.logits.data.shape[0]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_params(cfg: ModelConfig) -> ModelParams:
    """Deterministic parameter initialization from cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    p: dict[str, np.ndarray] = {}

    def linear(name: str, fan_in: int, fan_out: int) -> None:
        p[f"{name}.w"] = _glorot(rng, fan_in, fan_out)
        p[f"{name}.b"] = np.zeros(fan_out)

    def norm(name: str) -> None:
        p[f"{name}.g"] = np.ones(cfg.d_model)
        p[f"{name}.b"] = np.zeros(cfg.d_model)

    def block(prefix: str) -> None:
        norm(f"{prefix}.ln1")
        for head in range(cfg.n_heads):
            linear(f"{prefix}.attn.q{head}", cfg.d_model, cfg.head_dim)
            # no key bias: it shifts every score row by a constant that
            # softmax discards, leaving a parameter with zero gradient
            p[f"{prefix}.attn.k{head}.w"] = _glorot(rng, cfg.d_model, cfg.head_dim)
            linear(f"{prefix}.attn.v{head}", cfg.d_model, cfg.head_dim)
        linear(f"{prefix}.attn.out", cfg.d_model, cfg.d_model)
        norm(f"{prefix}.ln2")
        linear(f"{prefix}.ff.1", cfg.d_model, cfg.d_ff)
        linear(f"{prefix}.ff.2", cfg.d_ff, cfg.d_model)

    def selfcond(prefix: str) -> None:
        linear(f"{prefix}.out", cfg.d_model, cfg.n_out)
        linear(f"{prefix}.in", cfg.n_out, cfg.d_model)

    linear("sub", cfg.subsample * cfg.d_in, cfg.d_model)
    for b in range(1, cfg.n_encoder_blocks + 1):
        block(f"enc{b}")
        if b in cfg.enc_selfcond:
            selfcond(f"sc.enc{b}")
    norm("enc.final_ln")
    linear("weight_head", cfg.d_model, 1)
    linear("dec.in", cfg.d_model, cfg.d_model)
    for b in range(1, cfg.n_decoder_blocks + 1):
        block(f"dec{b}")
        if b in cfg.dec_selfcond:
            selfcond(f"sc.dec{b}")
    norm("dec.final_ln")
    linear("out", cfg.d_model, cfg.n_out)
    return ModelParams(cfg, p)


def make_leaves(params: ModelParams) -> dict[str, nc.Tensor]:
    """Gradient-receiving tensors for one taped step."""
    return {name: nc.leaf(arr) for name, arr in params.arrays.items()}


def _constants(params: ModelParams) -> dict[str, nc.Tensor]:
    return {name: nc.constant(arr) for name, arr in params.arrays.items()}


def sinusoid_positions(n: int, d: int, start: int = 1) -> np.ndarray:
    """Fixed sin/cos positional table for positions start..start+n-1."""
    pos = np.arange(start, start + n, dtype=np.float64)[:, None]
    dim = np.arange(d, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * (dim // 2) / d)
    table = np.where(dim % 2 == 0, np.sin(angles), np.cos(angles))
    return table


def _linear(leaves, name: str, x: nc.Tensor) -> nc.Tensor:
    return nc.add_rowvec(nc.matmul(x, leaves[f"{name}.w"]), leaves[f"{name}.b"])


def _norm(leaves, name: str, x: nc.Tensor) -> nc.Tensor:
    return nc.layer_norm(x, leaves[f"{name}.g"], leaves[f"{name}.b"])


def _maybe_dropout(x: nc.Tensor, rate: float, rng) -> nc.Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return nc.mul(x, nc.constant(keep))


def _attention(leaves, prefix: str, x: nc.Tensor, cfg: ModelConfig) -> nc.Tensor:
    inv_sqrt = 1.0 / np.sqrt(cfg.head_dim)
    heads = []
    for head in range(cfg.n_heads):
        q = _linear(leaves, f"{prefix}.q{head}", x)
        k = nc.matmul(x, leaves[f"{prefix}.k{head}.w"])
        v = _linear(leaves, f"{prefix}.v{head}", x)
        weights = nc.softmax(nc.scale(nc.matmul(q, nc.transpose(k)), inv_sqrt))
        heads.append(nc.matmul(weights, v))
    merged = heads[0] if len(heads) == 1 else nc.concat(heads, axis=1)
    return _linear(leaves, f"{prefix}.out", merged)


def _block(leaves, prefix: str, x: nc.Tensor, cfg: ModelConfig, drop_rng) -> nc.Tensor:
    attn = _attention(leaves, f"{prefix}.attn", _norm(leaves, f"{prefix}.ln1", x), cfg)
    x = nc.add(x, _maybe_dropout(attn, cfg.dropout, drop_rng))
    ff_in = _norm(leaves, f"{prefix}.ln2", x)
    ff = _linear(leaves, f"{prefix}.ff.2", nc.gelu(_linear(leaves, f"{prefix}.ff.1", ff_in)))
    return nc.add(x, _maybe_dropout(ff, cfg.dropout, drop_rng))


def self_condition(leaves, prefix: str, z: nc.Tensor) -> tuple[nc.Tensor, nc.Tensor]:
    """Tap token logits at a block and mix their softmax back into the stream."""
    logits = _linear(leaves, f"{prefix}.out", z)
    mixed = nc.add(z, _linear(leaves, f"{prefix}.in", nc.softmax(logits)))
    return mixed, logits


def subsample(leaves, cfg: ModelConfig, x: np.ndarray) -> nc.Tensor:
    """Stack groups of `subsample` frames (tail remainder dropped) and project."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.d_in:
        raise nc.ShapeError(f"input must be (T, {cfg.d_in}), got {x.shape}")
    T, s = x.shape[0], cfg.subsample
    if T < s:
        raise nc.ShapeError(f"input length {T} shorter than subsample factor {s}")
    t_out = T // s
    stacked = x[: t_out * s].reshape(t_out, s * cfg.d_in)
    return nc.gelu(_linear(leaves, "sub", nc.constant(stacked)))


def encoder_forward(
    leaves, cfg: ModelConfig, x: np.ndarray, drop_rng=None
) -> tuple[nc.Tensor, list[tuple[str, nc.Tensor]]]:
    h = subsample(leaves, cfg, x)
    if cfg.use_positional:
        h = nc.add(h, nc.constant(sinusoid_positions(h.data.shape[0], cfg.d_model)))
    intermediates = []
    for b in range(1, cfg.n_encoder_blocks + 1):
        h = _block(leaves, f"enc{b}", h, cfg, drop_rng)
        if b in cfg.enc_selfcond:
            h, logits = self_condition(leaves, f"sc.enc{b}", h)
            intermediates.append((f"enc{b}", logits))
    return _norm(leaves, "enc.final_ln", h), intermediates


def weight_head(leaves, h: nc.Tensor) -> nc.Tensor:
    """Per-frame scalar weight in (0, 1): sigmoid of a linear map, unconstrained."""
    return nc.sigmoid(_linear(leaves, "weight_head", h))


def decoder_forward(
    leaves, cfg: ModelConfig, c: nc.Tensor, drop_rng=None
) -> tuple[nc.Tensor, nc.Tensor, list[tuple[str, nc.Tensor]]]:
    n = c.data.shape[0]
    z = c
    if cfg.use_positional:
        z = nc.add(z, nc.constant(sinusoid_positions(n, cfg.d_model)))
    z = _linear(leaves, "dec.in", z)
    intermediates = []
    for b in range(1, cfg.n_decoder_blocks + 1):
        z = _block(leaves, f"dec{b}", z, cfg, drop_rng)
        if b in cfg.dec_selfcond:
            z, logits = self_condition(leaves, f"sc.dec{b}", z)
            intermediates.append((f"dec{b}", logits))
    o = _norm(leaves, "dec.final_ln", z)
    return o, _linear(leaves, "out", o), intermediates


def model_forward(
    params: ModelParams,
    x: np.ndarray,
    leaves: dict[str, nc.Tensor] | None = None,
    training: bool = False,
    drop_rng=None,
) -> ForwardTrace:
    """Full pipeline; pass pre-built leaves to collect gradients afterwards."""
    cfg = params.config
    if leaves is None:
        leaves = _constants(params)
    rng = drop_rng if (training and cfg.dropout > 0.0) else None
    h, enc_inter = encoder_forward(leaves, cfg, x, rng)
    alpha = weight_head(leaves, h)
    c, seg = uma.uma_op(h, alpha)
    o, logits, dec_inter = decoder_forward(leaves, cfg, c, rng)
    return ForwardTrace(
        h=h, alpha=alpha, segmentation=seg, c=c, o=o, logits=logits,
        intermediates=enc_inter + dec_inter,
    )


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def _write_array(fp: BinaryIO, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fp.write(struct.pack("<I", len(encoded)))
    fp.write(encoded)
    fp.write(struct.pack("<I", arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fp.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(fp: BinaryIO) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", fp.read(4))
    name = fp.read(name_len).decode("utf-8")
    (ndim,) = struct.unpack("<I", fp.read(4))
    shape = struct.unpack(f"<{ndim}I", fp.read(4 * ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fp.read(8 * count), dtype="<f8").reshape(shape)
    return name, data.astype(np.float64)


def save_checkpoint(
    path,
    params: ModelParams,
    extra_meta: dict | None = None,
    extra_arrays: dict[str, np.ndarray] | None = None,
) -> None:
    meta = {"model": asdict(params.config), "extra": extra_meta or {}}
    arrays = dict(params.arrays)
    for name, arr in (extra_arrays or {}).items():
        if name in arrays:
            raise CheckpointError(f"extra array name collides with a parameter: {name}")
        arrays[name] = np.asarray(arr, dtype=np.float64)
    with open(path, "wb") as fp:
        fp.write(CHECKPOINT_MAGIC)
        fp.write(struct.pack("<I", CHECKPOINT_VERSION))
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        fp.write(struct.pack("<I", len(blob)))
        fp.write(blob)
        fp.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            _write_array(fp, name, arrays[name])


def load_checkpoint(path) -> tuple[ModelParams, dict, dict[str, np.ndarray]]:
    """Returns (params, extra_meta, extra_arrays)."""
    with open(path, "rb") as fp:
        magic = fp.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"not a checkpoint file (magic {magic!r})")
        (version,) = struct.unpack("<I", fp.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(version, CHECKPOINT_VERSION)
        (meta_len,) = struct.unpack("<I", fp.read(4))
        meta = json.loads(fp.read(meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fp.read(4))
        arrays = dict(_read_array(fp) for _ in range(count))
    cfg = ModelConfig(**meta["model"])
    param_names = set(init_params(cfg).arrays.keys())
    missing = param_names - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint missing parameters: {sorted(missing)[:4]} ...")
    params = ModelParams(cfg, {n: arrays[n] for n in param_names})
    extras = {n: a for n, a in arrays.items() if n not in param_names}
    return params, meta.get("extra", {}), extras
