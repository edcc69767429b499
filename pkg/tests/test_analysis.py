import csv
import json
import math

import numpy as np
import pytest

from esdllm.analysis import (
    closed_form_proportion,
    confidence_variation,
    discrete_proportion,
    flop_report,
    log_histogram,
    pearson,
    tensor_variation,
    variation_confidence_correlation,
    write_analysis,
)
from esdllm.decoder import GenerationConfig, generate
from esdllm.errors import InputError
from esdllm.skip import SkipSchedule, variation_term
from esdllm.trace import GenerationTrace

from conftest import SMALL, make_prompt


def _hand_trace(conf_rows, full=True, variation=None):
    recs = []
    for i, row in enumerate(conf_rows):
        recs.append(
            {
                "iteration": i,
                "conf_positions": list(range(len(row))),
                "conf": list(row),
                "masked": list(range(len(row))),
                "variation": (variation or {}).get(i, {}),
            }
        )
    return GenerationTrace(meta={"full_logging": full}, records=recs)


def test_hand_confidence_deltas():
    rep = confidence_variation([_hand_trace([(0.5, 0.5), (0.6, 0.5)])])
    np.testing.assert_allclose(rep.values, [0.1, 0.0], atol=1e-12)
    assert rep.exceedance == [(1, 0.5)]
    assert rep.histogram.total == 2
    assert rep.histogram.underflow == 1


def test_constant_confidence():
    rep = confidence_variation([_hand_trace([(0.3, 0.7)] * 4)])
    assert np.all(rep.values == 0)
    assert all(f == 0.0 for _, f in rep.exceedance)


def test_exceedance_at_zero_counts_nonzero():
    rep = confidence_variation([_hand_trace([(0.1, 0.2, 0.3), (0.1, 0.25, 0.0)])], threshold=0.0)
    assert rep.exceedance == [(1, pytest.approx(2 / 3))]


def test_confidence_needs_full_logging():
    with pytest.raises(InputError):
        confidence_variation([_hand_trace([(0.5,), (0.5,)], full=False)])


def test_tensor_variation_clipping_and_missing_layer():
    var = {1: {"3": {"hidden": {"positions": [0, 1], "values": [2.5, 0.0]}}}}
    trace = _hand_trace([(0.5, 0.5), (0.5, 0.5)], variation=var)
    rep = tensor_variation([trace], 3, "hidden")
    np.testing.assert_array_equal(rep.values, [2.5, 0.0])  # raw value kept
    assert rep.histogram.counts[-1] == 1  # clipped into the top bin
    with pytest.raises(InputError):
        tensor_variation([trace], 5, "hidden")


def test_logged_variation_matches_variation_term(small_model):
    cfg = GenerationConfig(
        strategy="vanilla", gen_length=8, block_length=4, full_logging=True, log_layers=(1,), record_logits=True
    )
    _, trace = generate(small_model, make_prompt(SMALL, 6, 0), cfg)
    from esdllm.model import full_forward

    # recompute iteration 1's hidden variation at layer 1 from the token history
    seqs = [np.array(make_prompt(SMALL, 6, 0).tolist() + [SMALL.mask_token_id] * 8)]
    tokens = seqs[0].copy()
    for rec in trace.records[:1]:
        for p, t, _ in rec["unmask"]:
            tokens[p] = t
    h0 = full_forward(small_model, seqs[0]).layers[1].hidden[6:]
    h1 = full_forward(small_model, tokens).layers[1].hidden[6:]
    got = trace.records[1]["variation"]["1"]["hidden"]["values"]
    for i in range(8):
        assert abs(got[i] - variation_term(h1[i], h0[i])) <= 1e-12


def test_pearson_cases():
    x = np.arange(6, dtype=float)
    assert pearson(x, 2 * x + 1) == pytest.approx(1.0)
    assert pearson(x, -x) == pytest.approx(-1.0)
    assert pearson(x, np.ones(6)) is None
    pts = [(0, 0), (1, 1), (2, 1), (3, 2)]
    xs, ys = zip(*pts)
    mx, my = sum(xs) / 4, sum(ys) / 4
    num = sum((a - mx) * (b - my) for a, b in pts)
    den = math.sqrt(sum((a - mx) ** 2 for a in xs) * sum((b - my) ** 2 for b in ys))
    assert pearson(xs, ys) == pytest.approx(num / den, abs=1e-12)
    assert num / den == pytest.approx(0.9486832980505138)


def test_pearson_affine_invariance():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=50), rng.normal(size=50)
    r = pearson(x, y)
    assert pearson(3 * x + 7, y) == pytest.approx(r, abs=1e-12)
    assert pearson(-2 * x + 1, y) == pytest.approx(-r, abs=1e-12)


def test_histogram_permutation_invariant():
    rng = np.random.default_rng(1)
    v = 10 ** rng.uniform(-7, 0.5, size=300)
    a, b = log_histogram(v), log_histogram(rng.permutation(v))
    np.testing.assert_array_equal(a.counts, b.counts)
    assert a.total == 300


def test_correlation_uses_masked_positions(small_model):
    cfg = GenerationConfig(strategy="vanilla", gen_length=8, block_length=8, full_logging=True, log_layers=(0, 2))
    traces = [generate(small_model, make_prompt(SMALL, 6, s), cfg)[1] for s in range(3)]
    corr = variation_confidence_correlation(traces)
    assert set(corr) == {(l, i) for l in (0, 2) for i in ("hidden", "query", "key", "value")}
    for r in corr.values():
        assert r is None or -1.0 <= r <= 1.0


@pytest.mark.parametrize(
    "ratios,expected",
    [({4: 0.5, 8: 0.5}, 0.398), ({8: 0.5}, 0.641), ({16: 0.5}, 0.766)],
)
def test_closed_form_proportions(ratios, expected):
    assert closed_form_proportion(ratios, 32) == pytest.approx(expected, abs=5e-4)


def test_discrete_matches_closed_form_when_exact():
    assert discrete_proportion({4: 0.5, 8: 0.5}, 32, 8) == closed_form_proportion({4: 0.5, 8: 0.5}, 32)


@pytest.mark.parametrize("attention", [False, True])
def test_flop_report_measured_vs_closed_form(default_model, attention):
    common = dict(gen_length=16, block_length=8, count_attention=attention)
    prompt = make_prompt(default_model.config, 8, 0)
    dc = generate(default_model, prompt, GenerationConfig(strategy="dualcache", **common))[1]
    es = generate(
        default_model, prompt, GenerationConfig(strategy="es_dllm", skip=SkipSchedule({4: 0.5, 8: 0.5}), **common)
    )[1]
    rows = {r["config"]: r for r in flop_report([dc, es])}
    assert rows["dualcache"]["measured"] == 1.0
    es_row = rows["es_dllm[r4=0.5,r8=0.5]"]
    if attention:
        assert abs(es_row["measured"] - es_row["closed_form"]) <= 0.03
    else:
        assert es_row["measured"] == pytest.approx(es_row["closed_form"], abs=1e-12)


def test_flop_report_shape_mismatch(small_model):
    a = generate(small_model, make_prompt(SMALL, 6, 0), GenerationConfig(strategy="dualcache", gen_length=8, block_length=4))[1]
    b = generate(small_model, make_prompt(SMALL, 6, 0), GenerationConfig(strategy="es_dllm", gen_length=8, block_length=8))[1]
    with pytest.raises(InputError):
        flop_report([a, b])


def test_write_analysis_outputs(small_model, tmp_path):
    cfg = GenerationConfig(strategy="vanilla", gen_length=8, block_length=4, full_logging=True, log_layers=(1,))
    van = generate(small_model, make_prompt(SMALL, 6, 0), cfg)[1]
    dc = generate(small_model, make_prompt(SMALL, 6, 0), GenerationConfig(strategy="dualcache", gen_length=8, block_length=4))[1]
    paths = {p.name for p in write_analysis([van, dc], tmp_path)}
    assert {
        "conf_variation.csv",
        "exceedance.csv",
        "conf_histogram.csv",
        "tensor_variation_L1.csv",
        "correlation.csv",
        "flops.csv",
        "analysis_meta.json",
    } <= paths
    with open(tmp_path / "conf_variation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(float(r["delta"]) >= 0 for r in rows)
    meta = json.loads((tmp_path / "analysis_meta.json").read_text())
    assert "max-probability" in meta["probability_change"]
