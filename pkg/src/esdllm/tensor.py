"""Dense float32 kernels for the transformer forward pass.

Every matrix product goes through :func:`matmul`, which charges ``2*m*k*n``
FLOPs to a :class:`FlopCounter`. Norms, softmax, RoPE and elementwise ops are
free under this cost model.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator, Union

import numpy as np

from .errors import ConfigurationError

DTYPE = np.float32
RMS_EPS = 1e-5

LayerKey = Union[int, str]
HEAD = "head"


@dataclass
class FlopCounter:
    """Session-local FLOP tally with a per-layer breakdown.

    ``include_attention=False`` drops the two attention products (the
    ``4*|S|*N*d`` term) so that cost is linear in the number of active tokens.
    """

    include_attention: bool = True
    total: int = 0
    by_layer: dict[LayerKey, int] = field(default_factory=dict)
    layer: LayerKey | None = None

    def add(self, flops: int, *, attention: bool = False) -> None:
        if attention and not self.include_attention:
            return
        flops = int(flops)
        self.total += flops
        key = self.layer if self.layer is not None else -1
        self.by_layer[key] = self.by_layer.get(key, 0) + flops

    @contextmanager
    def at(self, layer: LayerKey) -> Iterator["FlopCounter"]:
        prev, self.layer = self.layer, layer
        try:
            yield self
        finally:
            self.layer = prev

    def snapshot(self) -> tuple[int, dict[LayerKey, int]]:
        return self.total, dict(self.by_layer)


def as_matrix(x) -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ConfigurationError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def matmul(a, b, counter: FlopCounter | None = None, *, attention: bool = False) -> np.ndarray:
    """Matrix product ``a @ b`` charged at ``2*m*k*n`` FLOPs."""
    a = as_matrix(a)
    b = as_matrix(b)
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ConfigurationError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    out = np.matmul(a, b, dtype=DTYPE)
    if counter is not None:
        counter.add(2 * m * k * n, attention=attention)
    return out


def rmsnorm(x, gain) -> np.ndarray:
    x = as_matrix(x)
    gain = np.asarray(gain, dtype=DTYPE)
    if x.shape[1] == 0:
        raise ConfigurationError("rmsnorm needs d > 0")
    ms = np.mean(np.square(x), axis=1, keepdims=True, dtype=DTYPE)
    return (x / np.sqrt(ms + DTYPE(RMS_EPS))) * gain


def rope_apply(x, positions, base: float, num_heads: int = 1) -> np.ndarray:
    """Rotary embedding on interleaved pairs ``(2j, 2j+1)`` of each head.

    ``positions`` are absolute sequence indices, one per row, so rotating a
    subset of rows matches the same rows of a whole-sequence call.
    """
    x = as_matrix(x)
    n, d = x.shape
    if d % num_heads:
        raise ConfigurationError(f"width {d} not divisible by {num_heads} heads")
    d_head = d // num_heads
    if d_head % 2:
        raise ConfigurationError(f"RoPE needs an even head dimension, got {d_head}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1)
    if pos.shape[0] != n:
        raise ConfigurationError(f"{pos.shape[0]} positions for {n} rows")
    inv_freq = float(base) ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    ang = pos[:, None] * inv_freq[None, :]
    cos = np.cos(ang).astype(DTYPE)[:, None, :]
    sin = np.sin(ang).astype(DTYPE)[:, None, :]
    xh = x.reshape(n, num_heads, d_head // 2, 2)
    x0, x1 = xh[..., 0], xh[..., 1]
    out = np.empty_like(xh)
    out[..., 0] = x0 * cos - x1 * sin
    out[..., 1] = x0 * sin + x1 * cos
    return out.reshape(n, d)


def softmax(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True, dtype=DTYPE)


def attention(q, k, v, heads: int, counter: FlopCounter | None = None) -> np.ndarray:
    """Bidirectional multi-head attention of ``|S|`` queries over ``N`` keys."""
    q, k, v = as_matrix(q), as_matrix(k), as_matrix(v)
    s, d = q.shape
    if k.shape[1] != d or v.shape != k.shape:
        raise ConfigurationError(f"q/k/v widths disagree: {q.shape}, {k.shape}, {v.shape}")
    if d % heads:
        raise ConfigurationError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    scale = DTYPE(1.0 / np.sqrt(dh))
    out = np.empty((s, d), dtype=DTYPE)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = matmul(q[:, sl], k[:, sl].T, counter, attention=True) * scale
        out[:, sl] = matmul(softmax(scores), v[:, sl], counter, attention=True)
    return out


def silu(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    # tanh form of the logistic avoids exp overflow for large |x|
    return x * (DTYPE(0.5) * (DTYPE(1.0) + np.tanh(x * DTYPE(0.5))))


def gated_ffn(x, w_gate, w_up, w_down, counter: FlopCounter | None = None) -> np.ndarray:
    """SwiGLU feed-forward: ``down(silu(gate(x)) * up(x))``."""
    gate = matmul(x, w_gate, counter)
    up = matmul(x, w_up, counter)
    return matmul(silu(gate) * up, w_down, counter)


def block_flops(active: int, cache_len: int, d: int, d_ff: int, *, include_attention: bool = True) -> int:
    """Closed-form FLOPs of one transformer block over ``active`` tokens."""
    flops = 8 * active * d * d + 6 * active * d * d_ff
    if include_attention:
        flops += 4 * active * cache_len * d
    return flops
