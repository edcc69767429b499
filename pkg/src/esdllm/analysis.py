"""Generation-dynamics statistics and FLOP tables computed from traces."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError
from .skip import SkipSchedule, keep_count
from .trace import GenerationTrace

HIST_EDGES = np.logspace(-6, 0, 51)
PROBABILITY_CHANGE = "max-probability delta |c_t - c_(t-1)|"


@dataclass
class Histogram:
    """50 log-spaced bins over [1e-6, 1] plus an underflow bin for values below 1e-6."""

    edges: np.ndarray
    counts: np.ndarray
    underflow: int

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.underflow


def log_histogram(values, clip: bool = True) -> Histogram:
    vals = np.asarray(values, dtype=np.float64).reshape(-1)
    if clip:
        vals = np.minimum(vals, 1.0)
    under = vals < HIST_EDGES[0]
    counts, _ = np.histogram(vals[~under], bins=HIST_EDGES)
    return Histogram(HIST_EDGES.copy(), counts, int(under.sum()))


@dataclass
class VariationReport:
    """Long-form samples ``(sample, iteration, position, value)`` plus summaries."""

    rows: list[tuple[int, int, int, float]] = field(default_factory=list)
    histogram: Histogram | None = None
    exceedance: list[tuple[int, float]] = field(default_factory=list)
    threshold: float | None = None

    @property
    def values(self) -> np.ndarray:
        return np.array([r[3] for r in self.rows], dtype=np.float64)


def _require_full_logging(trace: GenerationTrace) -> None:
    if not trace.meta.get("full_logging"):
        raise InputError("confidence statistics need a trace recorded with full logging (vanilla)")


def _conf_map(record: dict) -> dict[int, float]:
    return dict(zip(record["conf_positions"], record["conf"]))


def confidence_deltas(trace: GenerationTrace):
    """Yield ``(iteration, positions, deltas)`` for each consecutive pair of records."""
    _require_full_logging(trace)
    recs = trace.records
    for prev, cur in zip(recs, recs[1:]):
        pos = np.asarray(cur["conf_positions"], dtype=np.int64)
        before = _conf_map(prev)
        prev_c = np.array([before[int(p)] for p in pos], dtype=np.float64)
        yield cur["iteration"], pos, np.abs(np.asarray(cur["conf"], dtype=np.float64) - prev_c)


def confidence_variation(traces: Sequence[GenerationTrace], threshold: float = 0.05) -> VariationReport:
    """Per-iteration confidence deltas, their log histogram and exceedance fractions.

    Exceedance counts deltas strictly greater than ``threshold``, pooled over
    all traces at the same iteration index.
    """
    report = VariationReport(threshold=threshold)
    pooled: dict[int, list[np.ndarray]] = {}
    for sample, trace in enumerate(traces):
        for it, pos, delta in confidence_deltas(trace):
            report.rows.extend((sample, it, int(p), float(d)) for p, d in zip(pos, delta))
            pooled.setdefault(it, []).append(delta)
    for it in sorted(pooled):
        d = np.concatenate(pooled[it])
        report.exceedance.append((it, float(np.mean(d > threshold)) if d.size else 0.0))
    report.histogram = log_histogram(report.values, clip=False)
    return report


def _variation_entry(record: dict, layer: int, indicator: str):
    entry = record.get("variation", {}).get(str(layer), {}).get(indicator)
    if entry is None:
        return None
    return np.asarray(entry["positions"], dtype=np.int64), np.asarray(entry["values"], dtype=np.float64)


def logged_layers(traces: Iterable[GenerationTrace]) -> list[tuple[int, str]]:
    found = set()
    for trace in traces:
        for rec in trace.records:
            for layer, by_ind in rec.get("variation", {}).items():
                found.update((int(layer), ind) for ind in by_ind)
    return sorted(found)


def tensor_variation(traces: Sequence[GenerationTrace], layer: int, indicator: str = "hidden") -> VariationReport:
    """Raw variation terms at one layer; the histogram view clips values above 1."""
    report = VariationReport()
    seen = False
    for sample, trace in enumerate(traces):
        for rec in trace.records:
            got = _variation_entry(rec, layer, indicator)
            if got is None:
                continue
            seen = True
            pos, vals = got
            report.rows.extend((sample, rec["iteration"], int(p), float(v)) for p, v in zip(pos, vals))
    if not seen:
        raise InputError(f"no {indicator} variation logged at layer {layer}")
    report.histogram = log_histogram(report.values, clip=True)
    return report


def pearson(x, y) -> float | None:
    """Two-pass Pearson coefficient; ``None`` when either side has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise InputError("paired samples differ in length")
    if x.size < 2:
        raise InputError("need at least two paired samples")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        return None
    return float(np.dot(dx, dy) / math.sqrt(sxx * syy))


def correlation_pairs(trace: GenerationTrace, layer: int, indicator: str):
    """Paired (variation, |confidence change|) samples over still-masked positions."""
    _require_full_logging(trace)
    xs, ys = [], []
    recs = trace.records
    for prev, cur in zip(recs, recs[1:]):
        got = _variation_entry(cur, layer, indicator)
        if got is None:
            continue
        pos, var = got
        masked = set(cur["masked"])
        c_prev, c_cur = _conf_map(prev), _conf_map(cur)
        for p, v in zip(pos.tolist(), var.tolist()):
            if p in masked and p in c_prev and p in c_cur:
                xs.append(v)
                ys.append(abs(c_cur[p] - c_prev[p]))
    return xs, ys


def variation_confidence_correlation(
    traces: Sequence[GenerationTrace], layers: Iterable[int] | None = None, indicators: Iterable[str] | None = None
) -> dict[tuple[int, str], float | None]:
    """Pearson r between tensor variation and confidence change, per (layer, indicator)."""
    wanted = logged_layers(traces)
    if layers is not None:
        keep = set(int(l) for l in layers)
        wanted = [w for w in wanted if w[0] in keep]
    if indicators is not None:
        keep_ind = set(indicators)
        wanted = [w for w in wanted if w[1] in keep_ind]
    out: dict[tuple[int, str], float | None] = {}
    for layer, ind in wanted:
        xs, ys = [], []
        for trace in traces:
            x, y = correlation_pairs(trace, layer, ind)
            xs.extend(x)
            ys.extend(y)
        if len(xs) < 2:
            raise InputError(f"fewer than two masked samples at layer {layer} ({ind})")
        out[(layer, ind)] = pearson(xs, ys)
    return out


# --- FLOP proportions -----------------------------------------------------------


def closed_form_proportion(ratios: dict[int, float], num_layers: int) -> float:
    """Mean surviving token fraction over layers, with continuous ratios."""
    frac, total = 1.0, 0.0
    for layer in range(num_layers):
        total += frac
        if layer in ratios:
            frac *= 1.0 - ratios[layer]
    return total / num_layers


def discrete_proportion(ratios: dict[int, float], num_layers: int, block_length: int) -> float:
    """Same as :func:`closed_form_proportion` but with integer keep counts."""
    n, total = block_length, 0
    for layer in range(num_layers):
        total += n
        if layer in ratios:
            n = keep_count(n, ratios[layer])
    return total / (num_layers * block_length)


STEADY_ACTION = {"vanilla": "full", "dualcache": "block", "es_dllm": "skip"}


def steady_state_flops(trace: GenerationTrace) -> float:
    """Mean transformer-layer FLOPs over non-refresh iterations (fallback steps excluded)."""
    strategy = trace.meta["config"]["strategy"]
    action = STEADY_ACTION[strategy]
    vals = [sum(r["layer_flops"]) for r in trace.records if r["action"] == action and not r["fallback"]]
    if not vals:
        raise InputError(f"trace has no steady-state '{action}' iterations")
    return float(np.mean(vals))


def trace_name(trace: GenerationTrace) -> str:
    if trace.meta.get("name"):
        return trace.meta["name"]
    cfg = trace.meta["config"]
    if cfg["strategy"] == "es_dllm" and cfg.get("skip"):
        ratios = ",".join(f"r{k}={v:g}" for k, v in cfg["skip"]["ratios"].items())
        return f"es_dllm[{ratios}]"
    return cfg["strategy"]


def _shape_key(trace: GenerationTrace) -> tuple:
    m = trace.meta
    model = m["model"]
    return (
        model["num_layers"],
        model["hidden_dim"],
        model["ffn_dim"],
        m["prompt_length"],
        m["gen_length"],
        m["block_length"],
        m["flop_model"]["include_attention"],
    )


def closed_form_for(trace: GenerationTrace) -> float:
    m = trace.meta
    L = m["model"]["num_layers"]
    cfg = m["config"]
    if cfg["strategy"] == "vanilla":
        return (m["prompt_length"] + m["gen_length"]) / m["block_length"]
    ratios = SkipSchedule.from_dict(cfg["skip"]).ratios if cfg.get("skip") else {}
    if cfg["strategy"] == "dualcache":
        ratios = {}
    return closed_form_proportion(ratios, L)


def flop_report(traces: Sequence[GenerationTrace], baseline: GenerationTrace | None = None) -> list[dict]:
    """Steady-state per-iteration FLOP ratio of each trace against a DualCache trace."""
    if baseline is None:
        cands = [t for t in traces if t.meta["config"]["strategy"] == "dualcache"]
        if not cands:
            raise InputError("flop report needs a dualcache trace as denominator")
        baseline = cands[0]
    denom = steady_state_flops(baseline)
    key = _shape_key(baseline)
    rows = []
    for trace in traces:
        if _shape_key(trace) != key:
            raise InputError(f"trace '{trace_name(trace)}' differs in model/length shape from the dualcache baseline")
        rows.append(
            {
                "config": trace_name(trace),
                "measured": steady_state_flops(trace) / denom,
                "closed_form": closed_form_for(trace),
            }
        )
    return rows


# --- CSV output ---------------------------------------------------------------------


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _write_hist(path: Path, hist: Histogram) -> None:
    rows = [("underflow", 0.0, hist.edges[0], hist.underflow)]
    rows += [(i, hist.edges[i], hist.edges[i + 1], int(c)) for i, c in enumerate(hist.counts)]
    _write_csv(path, ("bin", "lo", "hi", "count"), rows)


def write_analysis(traces: Sequence[GenerationTrace], out_dir, threshold: float = 0.05) -> list[Path]:
    """Write every analysis CSV for ``traces`` into ``out_dir``; returns the paths."""
    if not traces:
        raise InputError("no traces to analyze")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def emit(name: str, header, rows) -> None:
        _write_csv(out / name, header, rows)
        written.append(out / name)

    full = [t for t in traces if t.meta.get("full_logging")]
    conf_rep = confidence_variation(full, threshold) if full else VariationReport(threshold=threshold)
    emit("conf_variation.csv", ("iteration", "position", "delta", "sample"),
         ((it, p, d, s) for s, it, p, d in conf_rep.rows))
    emit("exceedance.csv", ("iteration", "fraction"), conf_rep.exceedance)
    if conf_rep.histogram is not None:
        _write_hist(out / "conf_histogram.csv", conf_rep.histogram)
        written.append(out / "conf_histogram.csv")

    logged = logged_layers(traces)
    for layer in sorted({l for l, _ in logged}):
        rows = []
        for ind in sorted({i for l, i in logged if l == layer}):
            rep = tensor_variation(traces, layer, ind)
            rows.extend((it, p, ind, v, min(v, 1.0), s) for s, it, p, v in rep.rows)
        emit(f"tensor_variation_L{layer}.csv",
             ("iteration", "position", "indicator", "value", "clipped", "sample"), rows)

    corr_rows = []
    if full:
        try:
            corr = variation_confidence_correlation(full)
        except InputError:
            corr = {}
        corr_rows = [(l, ind, "undefined" if r is None else r) for (l, ind), r in sorted(corr.items())]
    emit("correlation.csv", ("layer", "indicator", "r"), corr_rows)

    has_base = any(t.meta["config"]["strategy"] == "dualcache" for t in traces)
    if has_base:
        flops = [(r["config"], r["measured"], r["closed_form"]) for r in flop_report(traces)]
    else:
        flops = [(trace_name(t), "", closed_form_for(t)) for t in traces]
    emit("flops.csv", ("config", "measured", "closed_form"), flops)

    meta = {
        "threshold": threshold,
        "probability_change": PROBABILITY_CHANGE,
        "histogram": {"bins": 50, "range": [1e-6, 1.0], "underflow": "values < 1e-6"},
        "traces": len(traces),
        "flop_denominator": "dualcache" if has_base else None,
    }
    with open(out / "analysis_meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    written.append(out / "analysis_meta.json")
    return written

