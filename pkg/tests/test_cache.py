import numpy as np
import pytest

from esdllm.cache import (
    RefreshAction,
    RefreshCounters,
    RefreshPolicy,
    cache_bytes_per_token,
    dump_cache,
    empty_cache,
    init_cache,
    load_cache,
    refresh_due,
    scatter_update,
    set_conf,
)
from esdllm.decoder import GenerationConfig, start_session, step_es
from esdllm.errors import ConfigurationError, ContractViolation, FormatError
from esdllm.model import ModelConfig, full_forward
from esdllm.skip import SkipSchedule

from conftest import SMALL, make_prompt


def _masked_seq(cfg, prompt_len=6, gen=8, seed=0):
    return np.concatenate([make_prompt(cfg, prompt_len, seed), np.full(gen, cfg.mask_token_id)])


def test_init_cache_matches_full_forward(small_model):
    toks = _masked_seq(SMALL)
    cache, _ = init_cache(small_model, toks, skip_layers=[1, 2])
    fr = full_forward(small_model, toks)
    assert np.all(cache.stamp == 0) and np.all(cache.conf_stamp == 0)
    for layer, lo in enumerate(fr.layers):
        assert cache.k[layer].tobytes() == lo.k.tobytes()
        assert cache.v[layer].tobytes() == lo.v.tobytes()
    assert cache.ind[1].tobytes() == fr.layers[1].hidden.tobytes()
    # independent softmax-max recomputation in float64
    z = fr.logits.astype(np.float64)
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    np.testing.assert_allclose(cache.conf, p.max(1), atol=1e-6)


def test_init_cache_query_indicator(small_model):
    toks = _masked_seq(SMALL)
    cache, fr = init_cache(small_model, toks, skip_layers=[2], indicator="query")
    assert cache.ind[2].tobytes() == fr.layers[2].q.tobytes()


def _random_cache(n=4, seed=0):
    cfg = ModelConfig(num_layers=2, hidden_dim=8, num_heads=2, ffn_dim=8, vocab_size=16)
    c = empty_cache(cfg, n, skip_layers=[0])
    rng = np.random.default_rng(seed)
    c.k[:] = rng.normal(size=c.k.shape)
    c.v[:] = rng.normal(size=c.v.shape)
    c.ind[0][:] = rng.normal(size=c.ind[0].shape)
    return c


def test_scatter_empty_is_noop():
    c = _random_cache()
    before = (c.k.tobytes(), c.v.tobytes(), c.ind[0].tobytes(), c.stamp.tobytes())
    c.iteration = 5
    scatter_update(c, 0, [], np.zeros((0, 8)), np.zeros((0, 8)), np.zeros((0, 8)))
    assert (c.k.tobytes(), c.v.tobytes(), c.ind[0].tobytes(), c.stamp.tobytes()) == before


def test_scatter_all_rows():
    c = _random_cache()
    new = np.arange(32, dtype=np.float32).reshape(4, 8)
    scatter_update(c, 1, [0, 1, 2, 3], new, -new)
    np.testing.assert_array_equal(c.k[1], new)
    np.testing.assert_array_equal(c.v[1], -new)


def test_scatter_partial_rows_untouched():
    c = _random_cache()
    snap_k, snap_v, snap_h = c.k.copy(), c.v.copy(), c.ind[0].copy()
    c.iteration = 3
    new = np.ones((2, 8), np.float32)
    scatter_update(c, 0, [1, 3], new, new, new)
    for r in (0, 2):
        assert c.k[0, r].tobytes() == snap_k[0, r].tobytes()
        assert c.v[0, r].tobytes() == snap_v[0, r].tobytes()
        assert c.ind[0][r].tobytes() == snap_h[r].tobytes()
    assert c.k[1].tobytes() == snap_k[1].tobytes()
    assert c.stamp[0].tolist() == [0, 3, 0, 3]


def test_scatter_random_subsets_locality():
    rng = np.random.default_rng(4)
    c = _random_cache(n=12)
    for it in range(1, 50):
        c.iteration = it
        rows = np.sort(rng.choice(12, size=rng.integers(0, 13), replace=False))
        layer = int(rng.integers(0, 2))
        snap = c.k.copy()
        stamps = c.stamp.copy()
        new = rng.normal(size=(rows.size, 8)).astype(np.float32)
        scatter_update(c, layer, rows, new, new)
        others = np.setdiff1d(np.arange(12), rows)
        assert c.k[layer, others].tobytes() == snap[layer, others].tobytes()
        assert c.k[1 - layer].tobytes() == snap[1 - layer].tobytes()
        assert np.all(c.stamp >= stamps)


@pytest.mark.parametrize("rows", [[1, 1], [2, 1], [4], [-1]])
def test_scatter_bad_positions(rows):
    c = _random_cache()
    new = np.zeros((len(rows), 8), np.float32)
    with pytest.raises(ContractViolation):
        scatter_update(c, 0, rows, new, new)


def test_conf_range_enforced():
    c = _random_cache()
    with pytest.raises(ContractViolation):
        set_conf(c, [0], [1.5])


def _simulate(policy, block_len, blocks=2):
    counters = RefreshCounters()
    out = []
    for _ in range(blocks):
        for i in range(block_len):
            a = refresh_due(i, policy, counters)
            counters.advance(a)
            out.append(a)
    return out


def test_refresh_dualcache_schedule():
    acts = _simulate(RefreshPolicy(64, 1), 64)
    for i, a in enumerate(acts):
        assert a is (RefreshAction.CONTEXT if i % 64 == 0 else RefreshAction.BLOCK)


def test_refresh_every_iteration():
    assert set(_simulate(RefreshPolicy(1, 1), 8)) == {RefreshAction.CONTEXT}


def test_refresh_block_period_four():
    acts = _simulate(RefreshPolicy(64, 4), 64)
    for i, a in enumerate(acts):
        j = i % 64
        if j == 0:
            assert a is RefreshAction.CONTEXT
        elif j % 4 == 0:
            assert a is RefreshAction.BLOCK
        else:
            assert a is RefreshAction.NONE


def test_refresh_context_period_inside_block():
    acts = _simulate(RefreshPolicy(3, None), 8, blocks=1)
    assert [a.value for a in acts] == ["context", "none", "none", "context", "none", "none", "context", "none"]


def test_refresh_policy_parse():
    assert RefreshPolicy.parse("64,4") == RefreshPolicy(64, 4)
    assert RefreshPolicy.parse("inf,1") == RefreshPolicy(None, 1)
    with pytest.raises(ConfigurationError):
        RefreshPolicy.parse("4")
    with pytest.raises(ConfigurationError):
        RefreshPolicy(0, 1)


def test_memory_closed_form(small_model):
    toks = _masked_seq(SMALL)
    cache, _ = init_cache(small_model, toks, skip_layers=[0, 2])
    L, d = SMALL.num_layers, SMALL.hidden_dim
    assert cache.bytes_per_token() == 2 * L * d * 4 + 2 * d * 4
    assert cache_bytes_per_token(SMALL, 2) == 2 * L * d * 4 + 2 * d * 4


def test_memory_bf16_large_model_figure():
    big = ModelConfig(num_layers=32, hidden_dim=4096, num_heads=32, ffn_dim=64, vocab_size=16)
    assert cache_bytes_per_token(big, 2, bytes_per_elem=2) == 528 * 1024


def test_context_refresh_matches_scratch(small_model):
    cfg = GenerationConfig(
        strategy="es_dllm",
        gen_length=8,
        block_length=4,
        skip=SkipSchedule({1: 0.5}),
        refresh=RefreshPolicy(2, None),
    )
    state = start_session(small_model, make_prompt(SMALL, 5, 1), cfg)
    checked = 0
    for b in range(cfg.num_blocks):
        state.current_block, state.iter_in_block = b, 0
        while np.any(state.tokens[state.block_positions()] == state.mask_id):
            before = state.tokens.copy()
            step_es(state)
            if state.trace.records[-1]["action"] == "context":
                fr = full_forward(small_model, before)
                for layer, lo in enumerate(fr.layers):
                    np.testing.assert_allclose(state.cache.k[layer], lo.k, rtol=1e-5, atol=1e-6)
                    np.testing.assert_allclose(state.cache.v[layer], lo.v, rtol=1e-5, atol=1e-6)
                np.testing.assert_allclose(state.cache.ind[1], fr.layers[1].hidden, rtol=1e-5, atol=1e-6)
                checked += 1
            state.iteration += 1
            state.iter_in_block += 1
    assert checked >= 3


def test_dump_roundtrip(tmp_path, small_model):
    cache, _ = init_cache(small_model, _masked_seq(SMALL), skip_layers=[1])
    cache.iteration = 7
    p = tmp_path / "c.bin"
    dump_cache(cache, p)
    back = load_cache(p)
    assert back.k.tobytes() == cache.k.tobytes()
    assert back.ind[1].tobytes() == cache.ind[1].tobytes()
    np.testing.assert_array_equal(back.conf, cache.conf)
    assert back.iteration == 7 and back.indicator == "hidden"
    p.write_bytes(b"XXXX" + p.read_bytes()[4:])
    with pytest.raises(FormatError):
        load_cache(p)
