"""Per-layer K/V caches, indicator caches, confidence cache and refresh policy."""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractViolation, FormatError
from .model import ForwardResult, ModelConfig, ModelWeights, full_forward
from .skip import INDICATORS
from .tensor import DTYPE, FlopCounter, softmax

CACHE_MAGIC = b"ESDC"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sIIIII4s")


@dataclass
class CacheSet:
    """Full-sequence caches owned by one generation session.

    ``k``/``v`` hold post-RoPE keys and values, ``[layer, position, d]``.
    ``ind`` holds the variation indicator at each skip layer.
    """

    k: np.ndarray
    v: np.ndarray
    ind: dict[int, np.ndarray]
    indicator: str
    conf: np.ndarray
    stamp: np.ndarray
    conf_stamp: np.ndarray
    iteration: int = 0

    @property
    def num_positions(self) -> int:
        return self.k.shape[1]

    @property
    def num_layers(self) -> int:
        return self.k.shape[0]

    def tensor_bytes(self) -> int:
        return self.k.nbytes + self.v.nbytes + sum(a.nbytes for a in self.ind.values())

    def bytes_per_token(self) -> float:
        return self.tensor_bytes() / self.num_positions


def cache_bytes_per_token(config: ModelConfig, num_skip_layers: int, bytes_per_elem: int = 4) -> int:
    """K and V at every layer plus one indicator row per skip layer."""
    d = config.hidden_dim
    return 2 * config.num_layers * d * bytes_per_elem + num_skip_layers * d * bytes_per_elem


def indicator_tensor(fr_layer, indicator: str) -> np.ndarray:
    return {"hidden": fr_layer.hidden, "query": fr_layer.q, "key": fr_layer.k, "value": fr_layer.v}[indicator]


def confidence(logits) -> tuple[np.ndarray, np.ndarray]:
    """Greedy token and its probability per row; ties resolve to the lowest id."""
    probs = softmax(logits)
    tokens = np.argmax(probs, axis=-1)
    return tokens, np.take_along_axis(probs, tokens[:, None], axis=-1)[:, 0].astype(np.float64)


def empty_cache(config: ModelConfig, n: int, skip_layers=(), indicator: str = "hidden") -> CacheSet:
    if indicator not in INDICATORS:
        raise ConfigurationError(f"unknown indicator {indicator!r}")
    L, d = config.num_layers, config.hidden_dim
    return CacheSet(
        k=np.zeros((L, n, d), DTYPE),
        v=np.zeros((L, n, d), DTYPE),
        ind={int(l): np.zeros((n, d), DTYPE) for l in skip_layers},
        indicator=indicator,
        conf=np.zeros(n, np.float64),
        stamp=np.zeros((L, n), np.int64),
        conf_stamp=np.zeros(n, np.int64),
    )


def write_forward(cache: CacheSet, fr: ForwardResult, rows=None) -> None:
    """Copy K/V/indicator rows of a whole-sequence forward into the cache.

    ``rows=None`` rewrites every position; otherwise only the listed ones.
    """
    for layer, lo in enumerate(fr.layers):
        if rows is None:
            cache.k[layer] = lo.k
            cache.v[layer] = lo.v
            cache.stamp[layer] = np.maximum(cache.stamp[layer], cache.iteration)
            if layer in cache.ind:
                cache.ind[layer][:] = indicator_tensor(lo, cache.indicator)
        else:
            h = indicator_tensor(lo, cache.indicator)[rows] if layer in cache.ind else None
            scatter_update(cache, layer, rows, lo.k[rows], lo.v[rows], h)


def set_conf(cache: CacheSet, positions, values) -> None:
    positions = np.asarray(positions, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        raise ContractViolation("confidence outside [0, 1]")
    cache.conf[positions] = values
    cache.conf_stamp[positions] = np.maximum(cache.conf_stamp[positions], cache.iteration)


def init_cache(
    weights: ModelWeights,
    tokens,
    counter: FlopCounter | None = None,
    skip_layers=(),
    indicator: str = "hidden",
    logit_rows=None,
) -> tuple[CacheSet, ForwardResult]:
    """Populate every cache from one whole-sequence forward.

    Confidence is filled for ``logit_rows`` (all rows by default); other rows
    stay at 0 until they first receive logits.
    """
    toks = np.asarray(tokens)
    cache = empty_cache(weights.config, toks.size, skip_layers, indicator)
    fr = full_forward(weights, toks, counter, logit_rows)
    write_forward(cache, fr)
    _, conf = confidence(fr.logits)
    set_conf(cache, fr.logit_rows, conf)
    return cache, fr


def _check_positions(positions, n: int) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.int64).reshape(-1)
    if pos.size:
        if pos[0] < 0 or pos[-1] >= n:
            raise ContractViolation(f"position out of range [0, {n})")
        if pos.size > 1 and np.any(np.diff(pos) <= 0):
            raise ContractViolation("positions must be strictly increasing (no duplicates)")
    return pos


def scatter_update(cache: CacheSet, layer: int, positions, k_new, v_new, h_new=None) -> None:
    """Overwrite exactly ``positions`` of layer ``layer``; other rows are untouched."""
    pos = _check_positions(positions, cache.num_positions)
    if pos.size == 0:
        return
    cache.k[layer, pos] = k_new
    cache.v[layer, pos] = v_new
    if h_new is not None:
        if layer not in cache.ind:
            raise ContractViolation(f"layer {layer} has no indicator cache")
        cache.ind[layer][pos] = h_new
    cache.stamp[layer, pos] = np.maximum(cache.stamp[layer, pos], cache.iteration)


def scatter_indicator(cache: CacheSet, layer: int, positions, h_new) -> None:
    """Indicator-only scatter, for indicators produced after attention."""
    pos = _check_positions(positions, cache.num_positions)
    if layer not in cache.ind:
        raise ContractViolation(f"layer {layer} has no indicator cache")
    if pos.size:
        cache.ind[layer][pos] = h_new


# --- refresh policy ----------------------------------------------------------


class RefreshAction(str, enum.Enum):
    NONE = "none"
    BLOCK = "block"
    CONTEXT = "context"


@dataclass(frozen=True)
class RefreshPolicy:
    """Refresh periods in iterations; ``None`` means never (until the next block)."""

    context_period: int | None = None
    block_period: int | None = 1

    def __post_init__(self):
        for name in ("context_period", "block_period"):
            p = getattr(self, name)
            if p is not None and p < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {p}")

    @classmethod
    def parse(cls, text: str) -> "RefreshPolicy":
        """``"64,4"`` -> context 64, block 4; ``inf`` or ``none`` disables a period."""
        parts = [p.strip().lower() for p in text.split(",")]
        if len(parts) != 2:
            raise ConfigurationError(f"refresh must be 'ctx,blk', got {text!r}")
        vals = [None if p in ("inf", "none", "") else int(p) for p in parts]
        return cls(*vals)

    def to_list(self) -> list:
        return [self.context_period, self.block_period]


@dataclass
class RefreshCounters:
    since_context: int = 0
    since_block: int = 0

    def advance(self, action: RefreshAction) -> None:
        if action is RefreshAction.CONTEXT:
            self.since_context = 0
            self.since_block = 0
        elif action is RefreshAction.BLOCK:
            self.since_block = 0
        self.since_context += 1
        self.since_block += 1


def refresh_due(iter_in_block: int, policy: RefreshPolicy, counters: RefreshCounters) -> RefreshAction:
    """Which no-skip refresh (if any) the next iteration must run.

    The first iteration of every block always rebuilds the whole cache.
    """
    if iter_in_block == 0:
        return RefreshAction.CONTEXT
    if policy.context_period is not None and counters.since_context >= policy.context_period:
        return RefreshAction.CONTEXT
    if policy.block_period is not None and counters.since_block >= policy.block_period:
        return RefreshAction.BLOCK
    return RefreshAction.NONE


# --- debug dump ---------------------------------------------------------------


def dump_cache(cache: CacheSet, path) -> None:
    """Binary tensor dump (same little-endian f32 framing as weight files) plus JSON stamps."""
    L, n, d = cache.k.shape
    header = _CACHE_HEADER.pack(
        CACHE_MAGIC, CACHE_VERSION, L, n, d, len(cache.ind), cache.indicator[:4].encode()
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(cache.k, "<f4").tobytes())
        fh.write(np.ascontiguousarray(cache.v, "<f4").tobytes())
        for layer in sorted(cache.ind):
            fh.write(struct.pack("<I", layer))
            fh.write(np.ascontiguousarray(cache.ind[layer], "<f4").tobytes())
        fh.write(np.ascontiguousarray(cache.conf, "<f8").tobytes())
    sidecar = {
        "indicator": cache.indicator,
        "iteration": cache.iteration,
        "skip_layers": sorted(cache.ind),
        "stamp": cache.stamp.tolist(),
        "conf_stamp": cache.conf_stamp.tolist(),
    }
    with open(f"{path}.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh)


def load_cache(path) -> CacheSet:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CACHE_MAGIC:
        raise FormatError(f"bad cache magic {buf[:4]!r}", offset=0)
    if len(buf) < _CACHE_HEADER.size:
        raise FormatError("truncated cache header", offset=len(buf))
    _, version, L, n, d, n_ind, _ = _CACHE_HEADER.unpack_from(buf)
    if version != CACHE_VERSION:
        raise FormatError(f"unsupported cache version {version}", offset=4)
    with open(f"{path}.json", encoding="utf-8") as fh:
        side = json.load(fh)
    off = _CACHE_HEADER.size

    def take(count: int, dtype: str, what: str) -> np.ndarray:
        nonlocal off
        size = count * np.dtype(dtype).itemsize
        if off + size > len(buf):
            raise FormatError(f"cache dump truncated in {what}", offset=off)
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += size
        return arr

    k = take(L * n * d, "<f4", "keys").reshape(L, n, d).astype(DTYPE)
    v = take(L * n * d, "<f4", "values").reshape(L, n, d).astype(DTYPE)
    ind = {}
    for _ in range(n_ind):
        layer = int(take(1, "<u4", "indicator layer")[0])
        ind[layer] = take(n * d, "<f4", f"indicator {layer}").reshape(n, d).astype(DTYPE)
    conf = take(n, "<f8", "confidence").astype(np.float64)
    return CacheSet(
        k=k,
        v=v,
        ind=ind,
        indicator=side["indicator"],
        conf=conf,
        stamp=np.asarray(side["stamp"], np.int64),
        conf_stamp=np.asarray(side["conf_stamp"], np.int64),
        iteration=side["iteration"],
    )
