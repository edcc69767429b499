"""Importance scoring and top-k position selection for early skipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

INDICATORS = ("hidden", "query", "key", "value")


@dataclass
class SkipSchedule:
    """Layer -> skip ratio map plus the importance-score knobs.

    A ratio at layer ``l`` filters the active set at the end of layer ``l``;
    layers ``0..l`` see the unfiltered set.
    """

    ratios: dict[int, float] = field(default_factory=dict)
    indicator: str = "hidden"
    alpha: float = 0.5

    def __post_init__(self):
        self.ratios = {int(k): float(v) for k, v in self.ratios.items()}
        if self.indicator not in INDICATORS:
            raise ConfigurationError(f"indicator must be one of {INDICATORS}, got {self.indicator!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")
        for layer, r in self.ratios.items():
            if layer < 0:
                raise ConfigurationError(f"negative skip layer {layer}")
            if not 0.0 <= r < 1.0:
                raise ConfigurationError(f"skip ratio at layer {layer} must lie in [0, 1), got {r}")

    def check_layers(self, num_layers: int) -> None:
        for layer in self.ratios:
            if layer >= num_layers:
                raise ConfigurationError(f"skip layer {layer} >= num_layers {num_layers}")

    @property
    def layers(self) -> list[int]:
        return sorted(self.ratios)

    def to_dict(self) -> dict:
        return {
            "ratios": {str(k): v for k, v in sorted(self.ratios.items())},
            "alpha": self.alpha,
            "indicator": self.indicator,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SkipSchedule":
        """Accept either the full form or a bare ``{"layer": ratio}`` map."""
        if "ratios" in data or "alpha" in data or "indicator" in data:
            extra = set(data) - {"ratios", "alpha", "indicator"}
            if extra:
                raise ConfigurationError(f"unknown skip keys: {sorted(extra)}")
            return cls(
                ratios=data.get("ratios", {}),
                indicator=data.get("indicator", "hidden"),
                alpha=data.get("alpha", 0.5),
            )
        return cls(ratios=data)

    @classmethod
    def default(cls, num_layers: int) -> "SkipSchedule":
        """Ratio 0.5 at 1/8 and 1/4 depth."""
        return cls(ratios={num_layers // 8: 0.5, num_layers // 4: 0.5})


def variation_term(h_now, h_prev) -> float:
    """``||h_now - h_prev||_1 / (sqrt(d) * ||h_prev||_2)``; 0 when ``h_prev`` is all zeros."""
    return float(variation_terms(np.reshape(h_now, (1, -1)), np.reshape(h_prev, (1, -1)))[0])


def variation_terms(h_now, h_prev) -> np.ndarray:
    """Row-wise :func:`variation_term` over ``[n, d]`` inputs, in float64."""
    now = np.asarray(h_now, dtype=np.float64)
    prev = np.asarray(h_prev, dtype=np.float64)
    if now.shape != prev.shape or now.ndim != 2:
        raise ConfigurationError(f"indicator shapes disagree: {now.shape} vs {prev.shape}")
    d = now.shape[1]
    if d == 0:
        raise ConfigurationError("indicator width must be > 0")
    l1 = np.abs(now - prev).sum(axis=1)
    l2 = np.sqrt(np.square(prev).sum(axis=1))
    denom = math.sqrt(d) * l2
    out = np.zeros(now.shape[0], dtype=np.float64)
    nz = denom > 0
    out[nz] = l1[nz] / denom[nz]
    return out


def importance_scores(conf_prev, ind_now, ind_prev, alpha: float) -> np.ndarray:
    """Blend of last-known confidence and indicator variation, one score per row."""
    conf = np.asarray(conf_prev, dtype=np.float64).reshape(-1)
    var = variation_terms(ind_now, ind_prev)
    if conf.shape != var.shape:
        raise ConfigurationError(f"{conf.size} confidences for {var.size} indicator rows")
    return alpha * conf + (1.0 - alpha) * var


def keep_count(n_active: int, ratio: float) -> int:
    """``max(1, round((1 - r) * n))`` with halves rounded up."""
    return max(1, math.floor((1.0 - ratio) * n_active + 0.5))


def select_topk(scores, ratio: float, active) -> np.ndarray:
    """Keep the highest-scoring positions; ties go to the lower position. Sorted output."""
    active = np.asarray(active, dtype=np.int64).reshape(-1)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.shape != active.shape:
        raise ConfigurationError(f"{scores.size} scores for {active.size} positions")
    if active.size == 0:
        raise ConfigurationError("cannot select from an empty position set")
    if not 0.0 <= ratio < 1.0:
        raise ConfigurationError(f"skip ratio must lie in [0, 1), got {ratio}")
    k = keep_count(active.size, ratio)
    if k >= active.size:
        return np.sort(active)
    order = np.lexsort((active, -scores))
    return np.sort(active[order[:k]])
