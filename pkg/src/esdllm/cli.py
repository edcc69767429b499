"""``esdllm`` command line: init-model, generate, compare, analyze."""

from __future__ import annotations

import argparse
import csv
import glob
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import closed_form_for, steady_state_flops, write_analysis
from .cache import RefreshPolicy
from .decoder import STRATEGIES, GenerationConfig, generate
from .errors import ConfigurationError, EngineError, InputError
from .model import ModelConfig, init_toy_model, load_weights, save_weights
from .skip import INDICATORS, SkipSchedule
from .trace import GenerationTrace, tokens_hash

log = logging.getLogger("esdllm")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    outputs: list[str]
    engine_version: str = __version__
    inputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)
            fh.write("\n")


def _read_json_arg(text: str) -> dict:
    """JSON given inline or as a path to a file."""
    if os.path.exists(text):
        with open(text, encoding="utf-8") as fh:
            return json.load(fh)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"not valid JSON or an existing file: {text!r}") from exc


def random_prompt(cfg: ModelConfig, n: int, seed: int) -> list[int]:
    """Seeded prompt ids drawn from the vocabulary minus the mask and EOS ids."""
    allowed = np.array([t for t in range(cfg.vocab_size) if t not in (cfg.mask_token_id, cfg.eos_token_id)])
    rng = np.random.default_rng(seed)
    return allowed[rng.integers(0, allowed.size, size=n)].tolist()


def _prompt_from_args(args, mcfg: ModelConfig) -> list[int]:
    if args.prompt_tokens and args.random_prompt:
        raise ConfigurationError("use either --prompt-tokens or --random-prompt, not both")
    if args.prompt_tokens:
        try:
            return [int(t) for t in args.prompt_tokens.split(",") if t.strip()]
        except ValueError as exc:
            raise InputError(f"bad --prompt-tokens: {exc}") from exc
    if args.random_prompt:
        return random_prompt(mcfg, args.random_prompt, args.seed)
    raise ConfigurationError("a prompt is required: --prompt-tokens or --random-prompt")


# --- init-model ---------------------------------------------------------------------


def cmd_init_model(args) -> int:
    data = _read_json_arg(args.config) if args.config else {}
    cfg = ModelConfig.from_dict(data)
    t0 = time.perf_counter()
    w = init_toy_model(cfg, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_weights(w, out)
    digest = file_sha256(out)
    RunManifest(
        command="init-model",
        config={"model": cfg.to_dict()},
        seed=args.seed,
        outputs=[str(out)],
        timings={"wall_seconds": time.perf_counter() - t0},
    ).write(out.with_name(out.name + ".manifest.json"))
    print(f"parameters: {w.num_params()}")
    print(f"sha256: {digest}")
    return 0


# --- generate -------------------------------------------------------------------------


def _gen_config_from_args(args, mcfg: ModelConfig) -> GenerationConfig:
    skip = None
    refresh = None
    if args.strategy == "es_dllm":
        base = SkipSchedule.from_dict(_read_json_arg(args.skip)) if args.skip else SkipSchedule.default(mcfg.num_layers)
        skip = SkipSchedule(
            base.ratios,
            args.indicator or base.indicator,
            base.alpha if args.alpha is None else args.alpha,
        )
        refresh = RefreshPolicy.parse(args.refresh) if args.refresh else None
    elif any(x is not None for x in (args.skip, args.refresh, args.alpha, args.indicator)):
        raise ConfigurationError(f"--skip/--refresh/--alpha/--indicator require --strategy es_dllm, not {args.strategy}")
    full_logging = args.full_logging
    log_layers = tuple(args.log_layers) if args.log_layers else ()
    if full_logging and not log_layers:
        log_layers = tuple(sorted({mcfg.num_layers // 8, mcfg.num_layers // 4}))
    return GenerationConfig(
        strategy=args.strategy,
        gen_length=args.gen_len,
        block_length=args.block_len,
        tokens_per_step=args.tokens_per_step,
        skip=skip,
        refresh=refresh,
        parallel_threshold=args.parallel_threshold,
        seed=args.seed,
        full_logging=full_logging,
        log_layers=log_layers,
        count_attention=not args.token_linear,
    )


def cmd_generate(args) -> int:
    w = load_weights(args.model)
    if args.full_logging is None:
        args.full_logging = args.strategy == "vanilla"
    cfg = _gen_config_from_args(args, w.config)
    prompt = _prompt_from_args(args, w.config)
    t0 = time.perf_counter()
    tokens, trace = generate(w, prompt, cfg)
    elapsed = time.perf_counter() - t0
    trace_path = Path(args.trace)
    trace_path.parent.mkdir(parents=True, exist_ok=True)
    spath = trace.write(trace_path)
    manifest_path = trace_path.with_name(trace_path.stem + ".manifest.json")
    RunManifest(
        command="generate",
        config={"model": w.config.to_dict(), "generation": cfg.to_dict()},
        seed=args.seed,
        outputs=[str(trace_path), str(spath)],
        inputs={"model": str(args.model), "model_sha256": file_sha256(args.model), "prompt": prompt},
        timings={"wall_seconds": elapsed},
    ).write(manifest_path)
    out = tokens[len(prompt):].tolist()
    print(f"tokens: {','.join(map(str, out))}")
    print(f"iterations: {trace.iterations}")
    print(f"total_flops: {trace.total_flops}")
    return 0


# --- compare ---------------------------------------------------------------------------


def load_compare_configs(path) -> list[tuple[str, dict, str | None]]:
    """Configs file: top-level defaults plus a ``configs`` list of overrides."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, list):
        data = {"configs": data}
    entries = data.pop("configs", None)
    if not entries:
        raise ConfigurationError(f"{path}: no 'configs' entries")
    out = []
    names = set()
    for i, entry in enumerate(entries):
        merged = {**data, **entry}
        name = merged.pop("name", None) or f"cfg{i}"
        if name in names:
            raise ConfigurationError(f"duplicate config name {name!r}")
        names.add(name)
        ref = merged.pop("equivalent_to", None)
        out.append((name, merged, ref))
    return out


def _run_one(w, prompt, name: str, entry: dict, out_dir: Path):
    cfg = GenerationConfig.from_dict(entry)
    t0 = time.perf_counter()
    _, trace = generate(w, prompt, cfg)
    elapsed = time.perf_counter() - t0
    trace.meta["name"] = name
    path = out_dir / f"{name}.jsonl"
    spath = trace.write(path)
    return name, trace, [str(path), str(spath)], elapsed


def cmd_compare(args) -> int:
    w = load_weights(args.model)
    prompt = _prompt_from_args(args, w.config)
    configs = load_compare_configs(args.configs)
    if not any(e.get("strategy") == "dualcache" for _, e, _ in configs):
        base = {k: v for k, v in configs[0][1].items() if k in ("gen_length", "block_length", "count_attention", "tokens_per_step", "parallel_threshold")}
        configs.insert(0, ("dualcache", {**base, "strategy": "dualcache"}, None))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    threads = max(1, int(os.environ.get("ESDLLM_THREADS", "1")))

    results: dict[str, tuple[GenerationTrace, list[str], float]] = {}
    failure = None
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futs = [pool.submit(_run_one, w, prompt, name, entry, out_dir) for name, entry, _ in configs]
        for (name, _, _), fut in zip(configs, futs):
            try:
                _, trace, files, elapsed = fut.result()
                results[name] = (trace, files, elapsed)
            except EngineError as exc:
                failure = f"config {name!r} failed: {exc}"
                log.error(failure)
                break

    base_name = next(n for n, s, _ in configs if s.get("strategy") == "dualcache")
    base = results.get(base_name)
    rows = []
    for name, _, _ in configs:
        if name not in results:
            continue
        trace = results[name][0]
        ratio = trace.total_flops / base[0].total_flops if base else ""
        try:
            steady = steady_state_flops(trace) / steady_state_flops(base[0]) if base else ""
        except InputError:
            steady = ""
        rows.append(
            [name, trace.iterations, trace.total_flops, ratio, tokens_hash(trace.output_tokens()), steady, closed_form_for(trace)]
        )
    compare_csv = out_dir / "compare.csv"
    with open(compare_csv, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["config", "iterations", "total_flops", "flop_ratio_vs_dualcache", "tokens_hash", "steady_ratio", "closed_form"])
        wr.writerows(rows)

    checks = []
    for name, _, ref in configs:
        if ref is None:
            continue
        if name in results and ref in results:
            same = tokens_hash(results[name][0].output_tokens()) == tokens_hash(results[ref][0].output_tokens())
            checks.append([name, ref, "PASS" if same else "FAIL"])
        else:
            checks.append([name, ref, "FAIL"])
    equiv_csv = out_dir / "equivalence.csv"
    with open(equiv_csv, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["config", "equivalent_to", "status"])
        wr.writerows(checks)

    for row in rows:
        print(f"{row[0]:<24} iterations={row[1]:<5} flops={row[2]:<14} ratio={row[3]:.4f}" if row[3] != "" else f"{row[0]:<24} iterations={row[1]}")
    for name, ref, status in checks:
        print(f"equivalence {name} == {ref}: {status}")

    outputs = [str(compare_csv), str(equiv_csv)] + [f for n in results for f in results[n][1]]
    RunManifest(
        command="compare",
        config={"model": w.config.to_dict(), "configs": [{"name": n, **s, "equivalent_to": r} for n, s, r in configs]},
        seed=args.seed,
        outputs=outputs,
        inputs={"model": str(args.model), "model_sha256": file_sha256(args.model), "prompt": prompt},
        timings={n: results[n][2] for n in results},
    ).write(out_dir / "manifest.json")
    if failure:
        print(failure, file=sys.stderr)
        return 1
    return 0 if all(c[2] == "PASS" for c in checks) else 1


# --- analyze ------------------------------------------------------------------------------


def cmd_analyze(args) -> int:
    paths = sorted(p for p in glob.glob(args.traces) if not p.endswith(".summary.json") and not p.endswith(".manifest.json"))
    if not paths:
        print(f"no traces match {args.traces!r}", file=sys.stderr)
        return 2
    traces = [GenerationTrace.read(p) for p in paths]
    t0 = time.perf_counter()
    written = write_analysis(traces, args.out, args.threshold)
    RunManifest(
        command="analyze",
        config={"threshold": args.threshold, "traces": paths},
        seed=None,
        outputs=[str(p) for p in written],
        inputs={p: file_sha256(p) for p in paths},
        timings={"wall_seconds": time.perf_counter() - t0},
    ).write(Path(args.out) / "manifest.json")
    for p in written:
        print(p)
    return 0


# --- argument parsing ------------------------------------------------------------------------


def _add_prompt_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--prompt-tokens", help="comma-separated prompt token ids")
    p.add_argument("--random-prompt", type=int, metavar="N", help="draw N seeded prompt ids (never mask/EOS)")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esdllm", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-model", help="write a seeded toy weight file")
    p.add_argument("--config", help="model config JSON (inline or file); defaults to the desk-scale model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("generate", help="run one generation session and write its trace")
    p.add_argument("--model", required=True)
    _add_prompt_args(p)
    p.add_argument("--strategy", choices=STRATEGIES, default="es_dllm")
    p.add_argument("--gen-len", type=int, default=32)
    p.add_argument("--block-len", type=int, default=8)
    p.add_argument("--tokens-per-step", type=int, default=1)
    p.add_argument("--skip", help='skip schedule JSON, e.g. \'{"4":0.5,"8":0.5}\' (es_dllm; default: 0.5 at L/8 and L/4)')
    p.add_argument("--alpha", type=float)
    p.add_argument("--indicator", choices=INDICATORS)
    p.add_argument("--refresh", help="context,block refresh periods, e.g. 64,4 ('inf' disables one)")
    p.add_argument("--parallel-threshold", type=float)
    p.add_argument("--full-logging", dest="full_logging", action="store_true", default=None,
                   help="log confidences for every output position (vanilla; on by default there)")
    p.add_argument("--no-full-logging", dest="full_logging", action="store_false")
    p.add_argument("--log-layers", type=int, nargs="*", help="layers whose tensor variation is logged (vanilla)")
    p.add_argument("--token-linear", action="store_true", help="leave attention score/value products out of FLOP counts")
    p.add_argument("--trace", required=True, help="output JSON-lines trace path")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("compare", help="run several configurations on one prompt")
    p.add_argument("--model", required=True)
    _add_prompt_args(p)
    p.add_argument("--configs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("analyze", help="write generation-dynamics CSVs from traces")
    p.add_argument("--traces", required=True, help="glob of .jsonl trace files")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.05)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (EngineError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
