"""Toy bidirectional diffusion transformer: config, weights, serialization, forward."""

from __future__ import annotations

import struct
from contextlib import nullcontext
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigurationError, FormatError, InputError
from .tensor import (
    DTYPE,
    HEAD,
    FlopCounter,
    attention,
    gated_ffn,
    matmul,
    rmsnorm,
    rope_apply,
)

MAGIC = b"ESDL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sI7If")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 32
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    vocab_size: int = 128
    mask_token_id: int | None = None
    eos_token_id: int | None = None
    rope_base: float = 10000.0

    def __post_init__(self):
        # special ids default to the top of the vocabulary
        if self.mask_token_id is None:
            object.__setattr__(self, "mask_token_id", self.vocab_size - 2)
        if self.eos_token_id is None:
            object.__setattr__(self, "eos_token_id", self.vocab_size - 1)
        # stored as f32 in weight files; keep in-memory value identical
        object.__setattr__(self, "rope_base", float(np.float32(self.rope_base)))
        self.validate()

    def validate(self) -> None:
        for name in ("num_layers", "hidden_dim", "num_heads", "ffn_dim", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.hidden_dim % self.num_heads:
            raise ConfigurationError(
                f"hidden_dim ({self.hidden_dim}) must be divisible by num_heads ({self.num_heads})"
            )
        if (self.hidden_dim // self.num_heads) % 2:
            raise ConfigurationError("head dimension must be even for RoPE")
        if self.mask_token_id == self.eos_token_id:
            raise ConfigurationError("mask_token_id and eos_token_id must differ")
        for name in ("mask_token_id", "eos_token_id"):
            tid = getattr(self, name)
            if not 0 <= tid < self.vocab_size:
                raise ConfigurationError(f"{name}={tid} must lie in [0, vocab_size)")
        if not self.rope_base > 0:
            raise ConfigurationError("rope_base must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**known)

    def param_count(self) -> int:
        d, f, v, L = self.hidden_dim, self.ffn_dim, self.vocab_size, self.num_layers
        return L * (4 * d * d + 3 * d * f + 2 * d) + 2 * v * d + d


@dataclass
class LayerWeights:
    attn_norm: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ffn_norm: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


_LAYER_FIELDS = ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down")


@dataclass
class ModelWeights:
    config: ModelConfig
    embedding: np.ndarray
    layers: list[LayerWeights]
    final_norm: np.ndarray
    head: np.ndarray

    def tensors(self):
        """Yield ``(name, array)`` in file order."""
        yield "embedding", self.embedding
        for i, lw in enumerate(self.layers):
            for f in _LAYER_FIELDS:
                yield f"layers.{i}.{f}", getattr(lw, f)
        yield "final_norm", self.final_norm
        yield "head", self.head

    def num_params(self) -> int:
        return sum(a.size for _, a in self.tensors())


def _layer_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.hidden_dim, cfg.ffn_dim
    return {
        "attn_norm": (d,),
        "wq": (d, d),
        "wk": (d, d),
        "wv": (d, d),
        "wo": (d, d),
        "ffn_norm": (d,),
        "w_gate": (d, f),
        "w_up": (d, f),
        "w_down": (f, d),
    }


def _tensor_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    layout = [("embedding", (cfg.vocab_size, cfg.hidden_dim))]
    shapes = _layer_shapes(cfg)
    for i in range(cfg.num_layers):
        layout.extend((f"layers.{i}.{f}", shapes[f]) for f in _LAYER_FIELDS)
    layout.append(("final_norm", (cfg.hidden_dim,)))
    layout.append(("head", (cfg.hidden_dim, cfg.vocab_size)))
    return layout


def init_toy_model(config: ModelConfig, seed: int) -> ModelWeights:
    """Seeded random weights; matrices are scaled by ``1/sqrt(fan_in)``, gains are ones."""
    rng = np.random.Generator(np.random.PCG64(int(seed) & (2**64 - 1)))

    def dense(fan_in: int, fan_out: int) -> np.ndarray:
        w = rng.standard_normal((fan_in, fan_out), dtype=np.float64) / np.sqrt(fan_in)
        return w.astype(DTYPE)

    d, f = config.hidden_dim, config.ffn_dim
    embedding = rng.standard_normal((config.vocab_size, d), dtype=np.float64).astype(DTYPE)
    layers = []
    for _ in range(config.num_layers):
        layers.append(
            LayerWeights(
                attn_norm=np.ones(d, DTYPE),
                wq=dense(d, d),
                wk=dense(d, d),
                wv=dense(d, d),
                wo=dense(d, d),
                ffn_norm=np.ones(d, DTYPE),
                w_gate=dense(d, f),
                w_up=dense(d, f),
                w_down=dense(f, d),
            )
        )
    return ModelWeights(
        config=config,
        embedding=embedding,
        layers=layers,
        final_norm=np.ones(d, DTYPE),
        head=dense(d, config.vocab_size),
    )


def save_weights(w: ModelWeights, path) -> None:
    c = w.config
    header = _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        c.num_layers,
        c.hidden_dim,
        c.num_heads,
        c.ffn_dim,
        c.vocab_size,
        c.mask_token_id,
        c.eos_token_id,
        c.rope_base,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for _, arr in w.tensors():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_header(buf: bytes) -> ModelConfig:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", offset=0)
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", offset=len(buf))
    _, version, *dims, rope_base = _HEADER.unpack_from(buf, 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", offset=4)
    L, d, h, f, v, mask_id, eos_id = dims
    try:
        return ModelConfig(L, d, h, f, v, mask_id, eos_id, float(rope_base))
    except ConfigurationError as exc:
        raise FormatError(f"invalid model config in header: {exc}", offset=8) from exc


def load_weights(path) -> ModelWeights:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        cfg = _read_header(head)
        buf = head + fh.read()
    layout = _tensor_layout(cfg)
    offset = _HEADER.size
    arrays: dict[str, np.ndarray] = {}
    for name, shape in layout:
        nbytes = 4 * int(np.prod(shape))
        if offset + nbytes > len(buf):
            raise FormatError(f"file truncated in tensor '{name}'", offset=offset)
        arrays[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=offset).astype(DTYPE).reshape(shape)
        offset += nbytes
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after last tensor", offset=offset)
    layers = [
        LayerWeights(**{f: arrays[f"layers.{i}.{f}"] for f in _LAYER_FIELDS}) for i in range(cfg.num_layers)
    ]
    return ModelWeights(cfg, arrays["embedding"], layers, arrays["final_norm"], arrays["head"])


# --- forward pass -----------------------------------------------------------


@dataclass
class LayerOutput:
    """Per-layer tensors for the rows that went through the layer (K/Q post-RoPE)."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    hidden: np.ndarray


@dataclass
class ForwardResult:
    logits: np.ndarray
    logit_rows: np.ndarray
    layers: list[LayerOutput]

    @property
    def hidden(self) -> list[np.ndarray]:
        return [lo.hidden for lo in self.layers]


def check_tokens(cfg: ModelConfig, tokens) -> np.ndarray:
    toks = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if toks.size == 0:
        raise InputError("token sequence is empty")
    bad = (toks < 0) | (toks >= cfg.vocab_size)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise InputError(f"token id {int(toks[i])} at index {i} outside vocabulary of {cfg.vocab_size}")
    return toks


def embed(w: ModelWeights, tokens) -> np.ndarray:
    return w.embedding[np.asarray(tokens, dtype=np.int64)]


def project_qkv(w: ModelWeights, layer: int, x: np.ndarray, positions, counter=None):
    """Norm and Q/K/V projections for the rows in ``x``; Q and K come back rotated."""
    cfg = w.config
    lw = w.layers[layer]
    xn = rmsnorm(x, lw.attn_norm)
    q = matmul(xn, lw.wq, counter)
    k = matmul(xn, lw.wk, counter)
    v = matmul(xn, lw.wv, counter)
    q = rope_apply(q, positions, cfg.rope_base, cfg.num_heads)
    k = rope_apply(k, positions, cfg.rope_base, cfg.num_heads)
    return q, k, v


def finish_block(w: ModelWeights, layer: int, x, q, keys, values, counter=None) -> np.ndarray:
    """Attention over ``keys``/``values``, output projection, residual, FFN."""
    lw = w.layers[layer]
    attn = attention(q, keys, values, w.config.num_heads, counter)
    attn_out = matmul(attn, lw.wo, counter) + x
    ffn = gated_ffn(rmsnorm(attn_out, lw.ffn_norm), lw.w_gate, lw.w_up, lw.w_down, counter)
    return ffn + attn_out


def charge(counter: FlopCounter | None, key):
    return counter.at(key) if counter is not None else nullcontext()


def output_logits(w: ModelWeights, h, counter=None) -> np.ndarray:
    with charge(counter, HEAD):
        return matmul(rmsnorm(h, w.final_norm), w.head, counter)


def full_forward(
    w: ModelWeights, tokens, counter: FlopCounter | None = None, logit_rows=None, positions=None
) -> ForwardResult:
    """Whole-sequence bidirectional forward.

    ``logit_rows`` restricts the output head to those row indices (all rows
    when omitted); every layer still runs over the full sequence. ``positions``
    overrides the rotary position of each row (default ``0..n-1``).
    """
    toks = check_tokens(w.config, tokens)
    n = toks.size
    positions = np.arange(n) if positions is None else np.asarray(positions, dtype=np.int64)
    if positions.shape != (n,):
        raise InputError(f"{positions.size} positions for {n} tokens")
    x = embed(w, toks)
    outs = []
    for layer in range(w.config.num_layers):
        with charge(counter, layer):
            q, k, v = project_qkv(w, layer, x, positions, counter)
            x = finish_block(w, layer, x, q, k, v, counter)
        outs.append(LayerOutput(q, k, v, x))
    rows = np.arange(n) if logit_rows is None else np.asarray(logit_rows, dtype=np.int64)
    logits = output_logits(w, x[rows], counter)
    return ForwardResult(logits, rows, outs)
