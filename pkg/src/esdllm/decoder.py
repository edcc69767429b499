"""Block-wise diffusion decoding loop: vanilla, DualCache and early-skip strategies."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .cache import (
    CacheSet,
    RefreshAction,
    RefreshCounters,
    RefreshPolicy,
    confidence,
    init_cache,
    refresh_due,
    scatter_indicator,
    scatter_update,
    set_conf,
    write_forward,
)
from .errors import ConfigurationError, InputError
from .model import (
    ModelWeights,
    charge,
    check_tokens,
    embed,
    finish_block,
    full_forward,
    output_logits,
    project_qkv,
)
from .skip import INDICATORS, SkipSchedule, importance_scores, select_topk, variation_terms
from .tensor import FlopCounter
from .trace import GenerationTrace

STRATEGIES = ("vanilla", "dualcache", "es_dllm")


@dataclass
class GenerationConfig:
    strategy: str = "es_dllm"
    gen_length: int = 32
    block_length: int = 8
    tokens_per_step: int = 1
    skip: SkipSchedule | None = None
    refresh: RefreshPolicy | None = None
    parallel_threshold: float | None = None
    seed: int = 0
    # vanilla only: logits for every output position each iteration
    full_logging: bool = False
    log_layers: tuple[int, ...] = ()
    log_indicators: tuple[str, ...] = INDICATORS
    count_attention: bool = True
    eos_guard: bool = True
    record_logits: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.gen_length < 1 or self.block_length < 1:
            raise ConfigurationError("gen_length and block_length must be >= 1")
        if self.gen_length % self.block_length:
            raise ConfigurationError(
                f"gen_length {self.gen_length} not divisible by block_length {self.block_length}"
            )
        if self.tokens_per_step < 1:
            raise ConfigurationError("tokens_per_step must be >= 1")
        if self.strategy != "es_dllm" and (self.skip is not None or self.refresh is not None):
            raise ConfigurationError(f"skip/refresh settings only apply to es_dllm, not {self.strategy}")
        if self.parallel_threshold is not None and not 0.0 < self.parallel_threshold <= 1.0:
            raise ConfigurationError(f"parallel threshold must lie in (0, 1], got {self.parallel_threshold}")
        if (self.full_logging or self.log_layers) and self.strategy != "vanilla":
            raise ConfigurationError("full logging is only available with the vanilla strategy")
        for ind in self.log_indicators:
            if ind not in INDICATORS:
                raise ConfigurationError(f"unknown indicator {ind!r}")
        self.log_layers = tuple(sorted(int(x) for x in self.log_layers))
        self.log_indicators = tuple(self.log_indicators)

    @property
    def num_blocks(self) -> int:
        return self.gen_length // self.block_length

    @property
    def schedule(self) -> SkipSchedule:
        return self.skip if self.skip is not None else SkipSchedule()

    @property
    def policy(self) -> RefreshPolicy:
        return self.refresh if self.refresh is not None else RefreshPolicy(None, None)

    def check_model(self, num_layers: int) -> None:
        self.schedule.check_layers(num_layers)
        for layer in self.log_layers:
            if not 0 <= layer < num_layers:
                raise ConfigurationError(f"log layer {layer} outside [0, {num_layers})")

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "gen_length": self.gen_length,
            "block_length": self.block_length,
            "tokens_per_step": self.tokens_per_step,
            "skip": self.skip.to_dict() if self.skip is not None else None,
            "refresh": self.refresh.to_list() if self.refresh is not None else None,
            "parallel_threshold": self.parallel_threshold,
            "seed": self.seed,
            "full_logging": self.full_logging,
            "log_layers": list(self.log_layers),
            "log_indicators": list(self.log_indicators),
            "count_attention": self.count_attention,
            "eos_guard": self.eos_guard,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GenerationConfig":
        data = dict(data)
        data.pop("name", None)
        data.pop("equivalent_to", None)
        if data.get("skip") is not None:
            data["skip"] = SkipSchedule.from_dict(data["skip"])
        ref = data.get("refresh")
        if isinstance(ref, str):
            data["refresh"] = RefreshPolicy.parse(ref)
        elif ref is not None:
            data["refresh"] = RefreshPolicy(*ref)
        for key in ("log_layers", "log_indicators"):
            if key in data:
                data[key] = tuple(data[key])
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown generation config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class DecodeState:
    weights: ModelWeights
    cfg: GenerationConfig
    tokens: np.ndarray
    prompt_length: int
    counter: FlopCounter
    trace: GenerationTrace
    cache: CacheSet | None = None
    current_block: int = 0
    iteration: int = 0
    iter_in_block: int = 0
    refresh_counters: RefreshCounters = field(default_factory=RefreshCounters)
    prev_logged: dict = field(default_factory=dict)

    @property
    def mask_id(self) -> int:
        return self.weights.config.mask_token_id

    @property
    def last_position(self) -> int:
        return self.tokens.size - 1

    def block_positions(self, block: int | None = None) -> np.ndarray:
        b = self.current_block if block is None else block
        start = self.prompt_length + b * self.cfg.block_length
        return np.arange(start, start + self.cfg.block_length)

    def output_positions(self) -> np.ndarray:
        return np.arange(self.prompt_length, self.tokens.size)

    def masked(self, positions) -> np.ndarray:
        positions = np.asarray(positions, dtype=np.int64)
        return positions[self.tokens[positions] == self.mask_id]


# --- unmasking rules -----------------------------------------------------------


def eos_guard(logits, positions, tokens, eos_id: int, mask_id: int) -> np.ndarray:
    """Forbid EOS while the final sequence position is still a mask.

    The final position's own row is left alone. Returns the input object
    unchanged when nothing needs suppressing.
    """
    tokens = np.asarray(tokens)
    last = tokens.size - 1
    if tokens[last] != mask_id:
        return logits
    positions = np.asarray(positions).reshape(-1)
    rows = positions != last
    if not rows.any():
        return logits
    out = np.array(logits, copy=True)
    out[rows, eos_id] = -np.inf
    return out


def suppress_mask(logits, mask_id: int) -> np.ndarray:
    """The mask id is never a valid prediction; without this an untrained
    model can "unmask" a position to the mask token and stall its block."""
    out = np.array(logits, copy=True)
    out[:, mask_id] = -np.inf
    return out


def _rank(conf, positions) -> np.ndarray:
    """Indices ordered by confidence descending, then position ascending."""
    return np.lexsort((np.asarray(positions), -np.asarray(conf, dtype=np.float64)))


def select_unmask(conf, positions, n: int) -> np.ndarray:
    """The ``n`` most confident positions (ties to the lower position)."""
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size == 0:
        return positions
    order = _rank(conf, positions)
    return np.sort(positions[order[:n]])


def parallel_unmask(conf, positions, threshold: float) -> np.ndarray:
    """All positions at or above ``threshold``; the single best one if none qualify."""
    positions = np.asarray(positions, dtype=np.int64)
    conf = np.asarray(conf, dtype=np.float64)
    if positions.size == 0:
        return positions
    chosen = positions[conf >= threshold]
    if chosen.size == 0:
        chosen = positions[_rank(conf, positions)[:1]]
    return np.sort(chosen)


# --- forward variants -----------------------------------------------------------


@dataclass
class CachedPass:
    survivors: np.ndarray
    logits: np.ndarray
    active_counts: list[int]
    variation: dict


def cached_forward(
    w: ModelWeights,
    cache: CacheSet,
    tokens: np.ndarray,
    positions,
    counter: FlopCounter | None = None,
    schedule: SkipSchedule | None = None,
) -> CachedPass:
    """Forward a subset of positions, attending over the full cached K/V.

    K/V (and indicator rows, where cached) of every position that reaches a
    layer are scattered into the cache. With a schedule, layers listed in it
    score the active set and keep only the top fraction for later layers.
    """
    S = np.asarray(positions, dtype=np.int64)
    x = embed(w, tokens[S])
    counts: list[int] = []
    variation: dict = {}
    for layer in range(w.config.num_layers):
        counts.append(int(S.size))
        skip_here = schedule is not None and layer in schedule.ratios
        with charge(counter, layer):
            q, k, v = project_qkv(w, layer, x, S, counter)
            tracked = layer in cache.ind
            ind_now = None
            if tracked and cache.indicator != "hidden":
                ind_now = {"query": q, "key": k, "value": v}[cache.indicator]
                ind_prev = cache.ind[layer][S].copy()
                scatter_update(cache, layer, S, k, v, ind_now)
            else:
                scatter_update(cache, layer, S, k, v)
            h = finish_block(w, layer, x, q, cache.k[layer], cache.v[layer], counter)
            if tracked and cache.indicator == "hidden":
                ind_now = h
                ind_prev = cache.ind[layer][S].copy()
                scatter_indicator(cache, layer, S, h)
        if skip_here:
            if not tracked:
                raise ConfigurationError(f"skip layer {layer} has no indicator cache")
            var = variation_terms(ind_now, ind_prev)
            scores = importance_scores(cache.conf[S], ind_now, ind_prev, schedule.alpha)
            keep = select_topk(scores, schedule.ratios[layer], S)
            variation[layer] = {cache.indicator: {"positions": S.tolist(), "values": var.tolist()}}
            x = h[np.searchsorted(S, keep)]
            S = keep
        else:
            x = h
    logits = output_logits(w, x, counter)
    return CachedPass(S, logits, counts, variation)


# --- per-strategy steps ------------------------------------------------------------


def _full_refresh(state: DecodeState, logit_rows) -> tuple[np.ndarray, np.ndarray]:
    """Whole-sequence no-skip forward that rewrites every cache row."""
    if state.cache is None:
        skip_layers = state.cfg.schedule.layers if state.cfg.strategy == "es_dllm" else ()
        state.cache, fr = init_cache(
            state.weights,
            state.tokens,
            state.counter,
            skip_layers,
            state.cfg.schedule.indicator,
            logit_rows,
        )
        state.cache.iteration = state.iteration
    else:
        fr = full_forward(state.weights, state.tokens, state.counter, logit_rows)
        write_forward(state.cache, fr)
    return fr.logit_rows, fr.logits


def _log_vanilla_variation(state: DecodeState, fr) -> dict:
    out: dict = {}
    rows = state.output_positions()
    for layer in state.cfg.log_layers:
        lo = fr.layers[layer]
        tensors = {"hidden": lo.hidden, "query": lo.q, "key": lo.k, "value": lo.v}
        for ind in state.cfg.log_indicators:
            now = tensors[ind][rows]
            prev = state.prev_logged.get((layer, ind))
            if prev is not None:
                out.setdefault(layer, {})[ind] = {
                    "positions": rows.tolist(),
                    "values": variation_terms(now, prev).tolist(),
                }
            state.prev_logged[(layer, ind)] = now.copy()
    return out


def step_vanilla(state: DecodeState) -> None:
    cfg = state.cfg
    rows = state.output_positions() if cfg.full_logging else state.block_positions()
    with _Iteration(state, "full") as it:
        fr = full_forward(state.weights, state.tokens, state.counter, rows)
        it.variation = _log_vanilla_variation(state, fr) if cfg.log_layers else {}
        it.active_counts = [int(state.tokens.size)] * state.weights.config.num_layers
        it.finish(fr.logit_rows, fr.logits)


def step_dualcache(state: DecodeState) -> None:
    block = state.block_positions()
    L = state.weights.config.num_layers
    if state.iter_in_block == 0:
        with _Iteration(state, "context") as it:
            it.active_counts = [int(state.tokens.size)] * L
            it.finish(*_full_refresh(state, block))
        return
    with _Iteration(state, "block") as it:
        p = cached_forward(state.weights, state.cache, state.tokens, block, state.counter)
        it.active_counts = p.active_counts
        it.finish(p.survivors, p.logits)


def step_es(state: DecodeState) -> None:
    cfg = state.cfg
    block = state.block_positions()
    L = state.weights.config.num_layers
    action = refresh_due(state.iter_in_block, cfg.policy, state.refresh_counters)
    state.refresh_counters.advance(action)
    if action is RefreshAction.CONTEXT:
        with _Iteration(state, "context") as it:
            it.active_counts = [int(state.tokens.size)] * L
            it.finish(*_full_refresh(state, block))
        return
    if action is RefreshAction.BLOCK:
        with _Iteration(state, "block") as it:
            p = cached_forward(state.weights, state.cache, state.tokens, block, state.counter)
            it.active_counts = p.active_counts
            it.finish(p.survivors, p.logits)
        return
    with _Iteration(state, "skip") as it:
        p = cached_forward(state.weights, state.cache, state.tokens, block, state.counter, cfg.schedule)
        it.active_counts = p.active_counts
        it.variation = p.variation
        it.finish(p.survivors, p.logits, allow_fallback=True)


_STEPS = {"vanilla": step_vanilla, "dualcache": step_dualcache, "es_dllm": step_es}


class _Iteration:
    """Bookkeeping shared by all strategies for one decoding iteration."""

    def __init__(self, state: DecodeState, action: str):
        self.state = state
        self.action = action
        self.active_counts: list[int] = []
        self.variation: dict = {}
        self.record: dict | None = None

    def __enter__(self) -> "_Iteration":
        st = self.state
        if st.cache is not None:
            st.cache.iteration = st.iteration
        self.flops0, self.layers0 = st.counter.snapshot()
        self.masked0 = st.masked(st.output_positions())
        return self

    def finish(self, positions, logits, allow_fallback: bool = False) -> None:
        st, cfg = self.state, self.state.cfg
        mcfg = st.weights.config
        positions = np.asarray(positions, dtype=np.int64)
        logits = suppress_mask(logits, st.mask_id)
        if cfg.eos_guard:
            logits = eos_guard(logits, positions, st.tokens, mcfg.eos_token_id, st.mask_id)
        toks, conf = confidence(logits)
        if st.cache is not None:
            set_conf(st.cache, positions, conf)
        if cfg.record_logits:
            st.trace.logits.append((positions.copy(), np.array(logits, copy=True)))

        block = st.block_positions()
        in_pool = np.isin(positions, block) & (st.tokens[positions] == st.mask_id)
        fallback = False
        if not in_pool.any():
            if not allow_fallback:
                raise InputError("no masked position received fresh logits")
            positions, toks, conf = self._fallback(block)
            in_pool = np.ones(1, dtype=bool)
            fallback = True
        pool_pos, pool_tok, pool_conf = positions[in_pool], toks[in_pool], conf[in_pool]
        if cfg.parallel_threshold is not None:
            chosen = parallel_unmask(pool_conf, pool_pos, cfg.parallel_threshold)
        else:
            chosen = select_unmask(pool_conf, pool_pos, cfg.tokens_per_step)
        idx = np.searchsorted(pool_pos, chosen)
        events = []
        for i in idx:
            p, t = int(pool_pos[i]), int(pool_tok[i])
            st.tokens[p] = t
            events.append([p, t, float(pool_conf[i])])

        flops1, layers1 = st.counter.snapshot()
        layer_flops = [layers1.get(l, 0) - self.layers0.get(l, 0) for l in range(mcfg.num_layers)]
        self.record = {
            "iteration": st.iteration,
            "block": st.current_block,
            "iter_in_block": st.iter_in_block,
            "action": self.action,
            "active_counts": self.active_counts,
            "masked": self.masked0.tolist(),
            "conf_positions": positions.tolist(),
            "conf": conf.tolist(),
            "unmask": events,
            "fallback": fallback,
            "flops": flops1 - self.flops0,
            "layer_flops": layer_flops,
            "head_flops": layers1.get("head", 0) - self.layers0.get("head", 0),
            "variation": {str(l): v for l, v in sorted(self.variation.items())},
        }

    def _fallback(self, block):
        """Recompute the masked block position with the best cached confidence."""
        st = self.state
        masked = st.masked(block)
        best = masked[_rank(st.cache.conf[masked], masked)[:1]]
        p = cached_forward(st.weights, st.cache, st.tokens, best, st.counter)
        logits = suppress_mask(p.logits, st.mask_id)
        if st.cfg.eos_guard:
            mcfg = st.weights.config
            logits = eos_guard(logits, best, st.tokens, mcfg.eos_token_id, st.mask_id)
        toks, conf = confidence(logits)
        set_conf(st.cache, best, conf)
        return best, toks, conf

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            if self.record is None:
                raise RuntimeError("iteration finished without unmasking")
            self.state.trace.append(self.record)


# --- driver ---------------------------------------------------------------------


def start_session(weights: ModelWeights, prompt, cfg: GenerationConfig) -> DecodeState:
    mcfg = weights.config
    cfg.check_model(mcfg.num_layers)
    prompt = check_tokens(mcfg, prompt)
    if np.any(prompt == mcfg.mask_token_id):
        raise InputError("prompt must not contain the mask token")
    tokens = np.concatenate([prompt, np.full(cfg.gen_length, mcfg.mask_token_id, dtype=np.int64)])
    meta = {
        "engine_version": __version__,
        "model": mcfg.to_dict(),
        "prompt_length": int(prompt.size),
        "gen_length": cfg.gen_length,
        "block_length": cfg.block_length,
        "config": cfg.to_dict(),
        "flop_model": {"include_attention": cfg.count_attention},
        "full_logging": cfg.full_logging,
    }
    return DecodeState(
        weights=weights,
        cfg=cfg,
        tokens=tokens,
        prompt_length=int(prompt.size),
        counter=FlopCounter(include_attention=cfg.count_attention),
        trace=GenerationTrace(meta=meta),
    )


def generate(weights: ModelWeights, prompt, cfg: GenerationConfig) -> tuple[np.ndarray, GenerationTrace]:
    """Run one session; returns the full token sequence and its trace."""
    state = start_session(weights, prompt, cfg)
    step = _STEPS[cfg.strategy]
    for b in range(cfg.num_blocks):
        state.current_block = b
        state.iter_in_block = 0
        block = state.block_positions()
        while np.any(state.tokens[block] == state.mask_id):
            step(state)
            state.iteration += 1
            state.iter_in_block += 1
    state.trace.tokens = state.tokens.tolist()
    return state.tokens.copy(), state.trace
