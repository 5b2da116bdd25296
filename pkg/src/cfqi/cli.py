"""Config-driven experiment runner.

Subcommands cover the individual pipeline stages (generate, impute, train,
evaluate) and the full episode-ladder experiment. Every run is deterministic
given (config, seeds): all per-cell seeds derive from the config's base seed,
completed ladder cells are recorded in a registry keyed by config hash and
skipped on re-runs, and the results CSV is rewritten in sorted order.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace

from . import __version__
from .config import (ExperimentConfig, config_fingerprint, config_from_dict,
                     config_to_dict, env_fingerprint, load_config, stable_seed)
from .data import generate_dataset, load_dataset, make_behavior, save_dataset
from .dp import DpArtifact, EvalReport, evaluate_policy, regret_table, solve_censored_dp, solve_oracle_dp
from .env import safe_action_margin
from .errors import CfqiError, ConfigError, ParseError
from .fqi import MODES, load_policy, run_fqi, save_policy
from .survival import as_augmented, fit_survival, impute

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("algo", "mode", "n_episodes", "seed", "mean_return", "ci_half",
                  "regret", "regret_ci_half", "amax_events")
REFERENCE_ALGOS = ("oracle_dp", "censored_dp")


class StageError(CfqiError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def _run_stage(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigError:
        raise
    except Exception as exc:
        raise StageError(stage, exc) from exc


# ---------------------------------------------------------------------------
# Config resolution


def _quick_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Shrink the protocol for smoke runs; explicit flags still override."""
    return replace(
        cfg,
        data=replace(cfg.data, replicates=min(cfg.data.replicates, 2)),
        algo=replace(cfg.algo, iterations=min(cfg.algo.iterations, 3),
                     krr=replace(cfg.algo.krr, max_support=min(cfg.algo.krr.max_support, 300))),
        eval=replace(cfg.eval, episodes=min(cfg.eval.episodes, 60)),
        dp=replace(cfg.dp, mc_samples=min(cfg.dp.mc_samples, 8),
                   mc_samples_deep=min(cfg.dp.mc_samples_deep, 6),
                   collect_steps=min(cfg.dp.collect_steps, 8000),
                   max_blocks_per_depth=min(cfg.dp.max_blocks_per_depth, 1000)),
    )


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "quick", False):
        cfg = _quick_config(cfg)
    raw = config_to_dict(cfg)
    if getattr(args, "behavior", None):
        raw["data"]["behavior"] = args.behavior
    if getattr(args, "replicates", None) is not None:
        raw["data"]["replicates"] = args.replicates
    if getattr(args, "seeds", None) is not None:
        raw["data"]["replicates"] = args.seeds
    if getattr(args, "episodes", None) is not None and args.command == "experiment":
        raw["data"]["episodes"] = args.episodes
    if getattr(args, "window_k", None) is not None:
        raw["algo"]["window_k"] = args.window_k
    return config_from_dict(raw)


def _warn_margin(cfg: ExperimentConfig) -> None:
    margin = safe_action_margin(cfg.env)
    if margin > 0:
        log.warning("safe-action margin %.2f > 0: worst-case demand at the maximum "
                    "price can exceed the inventory cap, so the boundary action may "
                    "not force an uncensored period", margin)


def _n_workers() -> int:
    raw = os.environ.get("CFQI_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        log.warning("ignoring non-integer CFQI_THREADS=%r", raw)
        return 1


# ---------------------------------------------------------------------------
# Reference-policy cache


def _dp_cache_tag(cfg: ExperimentConfig) -> str:
    payload = json.dumps({"env": env_fingerprint(cfg.env), "gamma": cfg.eval.gamma,
                          "dp": asdict(cfg.dp)}, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


def _load_or_solve(kind: str, cfg: ExperimentConfig, cache_dir: str | None) -> DpArtifact:
    solver = solve_oracle_dp if kind == "oracle" else solve_censored_dp
    path = None
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
        path = os.path.join(cache_dir, f"{kind}-dp-{_dp_cache_tag(cfg)}.npz")
        if os.path.exists(path):
            log.info("loading cached %s reference policy from %s", kind, path)
            return DpArtifact.load(path, env=cfg.env)
    log.info("solving %s reference policy (table construction plus value iteration)", kind)
    t0 = time.time()
    table, artifact = solver(cfg.env, cfg.eval.gamma, cfg.dp)
    log.info("%s solve: %d sweeps, converged=%s, %.1fs", kind, table.n_sweeps,
             table.converged, time.time() - t0)
    if path:
        artifact.save(path)
    return artifact


def _behavior_policy(cfg: ExperimentConfig, cache_dir: str | None):
    kind = cfg.data.behavior
    artifact = None
    if kind == "optimal":
        artifact = _load_or_solve("censored", cfg, cache_dir)
    return make_behavior(cfg.env, kind, epsilon=cfg.data.epsilon_safe,
                         oracle_artifact=artifact)


# ---------------------------------------------------------------------------
# Stage commands


def cmd_generate(cfg: ExperimentConfig, args) -> int:
    _warn_margin(cfg)
    n_episodes = args.episodes[0] if args.episodes else max(cfg.data.episodes)
    seed = args.seed if args.seed is not None else stable_seed(
        "dataset", cfg.data.base_seed, cfg.data.behavior, 0)
    policy = _run_stage("generate", _behavior_policy, cfg, args.cache_dir)
    ds = _run_stage("generate", generate_dataset, cfg.env, policy, n_episodes,
                    cfg.data.horizon, seed)
    _run_stage("generate", save_dataset, ds, args.out)
    print(f"wrote {ds.n_transitions} transitions ({n_episodes} episodes, seed {seed}) to {args.out}")
    return 0


def cmd_impute(cfg: ExperimentConfig, args) -> int:
    ds = _run_stage("impute", load_dataset, args.data, cfg.env)
    model = _run_stage("impute", fit_survival, ds, cfg.survival, cfg.env.demand.d_max)
    aug = _run_stage("impute", impute, ds, model, cfg.env.costs)
    _run_stage("impute", save_dataset, aug, args.out)
    rep = aug.impute_report.as_dict()
    print(f"imputed {rep['n_censored']} censored of {rep['n_transitions']} transitions "
          f"(conditional {rep['conditional_hits']}, global fallback {rep['global_fallbacks']}, "
          f"midpoint fallback {rep['midpoint_fallbacks']}) to {args.out}")
    return 0


def cmd_train(cfg: ExperimentConfig, args) -> int:
    aug_ds = _run_stage("train", load_dataset, args.data, cfg.env)
    aug = _run_stage("train", as_augmented, aug_ds)
    seed = args.seed if args.seed is not None else stable_seed("train", cfg.data.base_seed)
    artifact = _run_stage("train", run_fqi, aug, cfg.env, cfg.algo, args.algo, seed)
    _run_stage("train", save_policy, artifact, args.out)
    print(f"trained {args.algo} policy (depth cap {artifact.n_hat}, "
          f"{artifact.iterations} rounds) -> {args.out}")
    return 0


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    def load_any(path: str):
        if path.endswith(".npz"):
            return DpArtifact.load(path, env=cfg.env)
        return load_policy(path, env=cfg.env)

    artifact = _run_stage("evaluate", load_any, args.policy)
    seed = args.seed if args.seed is not None else stable_seed("eval", cfg.data.base_seed)
    n_ep = args.episodes[0] if args.episodes else cfg.eval.episodes
    algo = getattr(artifact, "mode", None) or getattr(artifact, "kind", "policy")
    report = _run_stage("evaluate", evaluate_policy, artifact, cfg.env, n_ep,
                        cfg.eval.horizon, cfg.eval.gamma, seed,
                        algo=algo, mode=cfg.data.behavior)
    print(f"mean discounted return {report.mean_return:.3f} +- {report.ci_half:.3f} "
          f"({n_ep} episodes, horizon {report.horizon}, truncation bias bound "
          f"{report.truncation_bias_bound:.2e}, boundary actions {report.amax_events})")
    if args.out:
        oracle = None
        if args.oracle:
            o_art = _run_stage("evaluate", DpArtifact.load, args.oracle, cfg.env)
            oracle = _run_stage("evaluate", evaluate_policy, o_art, cfg.env, n_ep,
                                cfg.eval.horizon, cfg.eval.gamma, seed, algo="oracle_dp",
                                mode=cfg.data.behavior)
        rows = regret_table([report], oracle) if oracle else [report.as_row()]
        _write_csv(args.out, rows)
        print(f"wrote evaluation row to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Experiment ladder


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: str, rows: list) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in RESULT_COLUMNS])


def _registry_load(path: str) -> dict:
    if not os.path.exists(path):
        return {"version": 1, "cells": {}}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError):
        log.warning("registry at %s unreadable; starting fresh", path)
        return {"version": 1, "cells": {}}


def _registry_save(path: str, registry: dict) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(registry, fh, sort_keys=True)
    os.replace(tmp, path)


def _report_from_cell(cell: dict) -> EvalReport:
    return EvalReport(**cell)


def _ladder_cell(cfg: ExperimentConfig, datasets: dict, level: int, rep: int,
                 algos: tuple, eval_seed: int) -> dict:
    """Run impute + train + evaluate for one (episode level, replicate) pair."""
    behavior = cfg.data.behavior
    ds_full = datasets[rep]
    ds = _run_stage("generate", ds_full.subset_trajectories, level)
    model = _run_stage("impute", fit_survival, ds, cfg.survival, cfg.env.demand.d_max)
    aug = _run_stage("impute", impute, ds, model, cfg.env.costs)
    out = {}
    for algo in algos:
        train_seed = stable_seed("train", cfg.data.base_seed, behavior, level, rep, algo)
        artifact = _run_stage("train", run_fqi, aug, cfg.env, cfg.algo, algo, train_seed)
        report = _run_stage("evaluate", evaluate_policy, artifact, cfg.env,
                            cfg.eval.episodes, cfg.eval.horizon, cfg.eval.gamma,
                            eval_seed, algo=algo, mode=behavior, n_train_episodes=level)
        out[algo] = asdict(report)
    return out


def cmd_experiment(cfg: ExperimentConfig, args) -> int:
    _warn_margin(cfg)
    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    cache_dir = os.path.join(out_dir, "cache")
    fp = config_fingerprint(cfg)
    behavior = cfg.data.behavior
    algos = (args.algo,) if args.algo else MODES

    manifest_path = os.path.join(out_dir, "manifest.json")
    manifest = {"config_hash": fp, "version": __version__,
                "env_fingerprint": env_fingerprint(cfg.env),
                "config": config_to_dict(cfg), "runs": []}
    if os.path.exists(manifest_path):
        try:
            with open(manifest_path, "r", encoding="utf-8") as fh:
                prev = json.load(fh)
            if prev.get("config_hash") == fp:
                manifest["runs"] = prev.get("runs", [])
        except (OSError, json.JSONDecodeError):
            pass
    manifest["runs"].append({"started": time.strftime("%Y-%m-%dT%H:%M:%S"),
                             "command": " ".join(sys.argv[1:])})
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)

    registry_path = os.path.join(out_dir, "registry.json")
    registry = _registry_load(registry_path)
    cells = registry["cells"]

    def cell_key(level, rep, algo) -> str:
        return f"{fp}:{behavior}:{level}:{rep}:{algo}"

    # reference policies: solved once per config, evaluated once per config
    oracle_art = _load_or_solve("oracle", cfg, cache_dir)
    censored_art = _load_or_solve("censored", cfg, cache_dir)
    ref_eval_seed = stable_seed("eval-ref", cfg.data.base_seed, behavior)
    for name, art in (("oracle_dp", oracle_art), ("censored_dp", censored_art)):
        key = f"{fp}:{behavior}:ref:{name}"
        if key not in cells:
            report = _run_stage("evaluate", evaluate_policy, art, cfg.env,
                                cfg.eval.episodes, cfg.eval.horizon, cfg.eval.gamma,
                                ref_eval_seed, algo=name, mode=behavior)
            cells[key] = asdict(report)
            _registry_save(registry_path, registry)
            log.info("%s reference value %.2f +- %.2f", name,
                     report.mean_return, report.ci_half)

    levels = sorted(cfg.data.episodes)
    reps = range(cfg.data.replicates)
    pending = [(level, rep) for rep in reps for level in levels
               if any(cell_key(level, rep, a) not in cells for a in algos)]

    datasets: dict = {}
    if pending:
        behavior_policy = _behavior_policy(cfg, cache_dir)
        max_level = max(levels)
        for rep in sorted({rep for _, rep in pending}):
            ds_seed = stable_seed("dataset", cfg.data.base_seed, behavior, rep)
            datasets[rep] = _run_stage("generate", generate_dataset, cfg.env,
                                       behavior_policy, max_level, cfg.data.horizon,
                                       ds_seed)

    def run_pair(pair):
        level, rep = pair
        eval_seed = stable_seed("eval", cfg.data.base_seed, behavior, rep)
        todo = tuple(a for a in algos if cell_key(level, rep, a) not in cells)
        return pair, _ladder_cell(cfg, datasets, level, rep, todo, eval_seed)

    workers = _n_workers()
    done_count = 0
    if pending:
        log.info("running %d ladder cells (%d algos each) with %d worker(s)",
                 len(pending), len(algos), workers)
    if workers == 1 or len(pending) <= 1:
        results_iter = map(run_pair, pending)
        for (level, rep), reports in results_iter:
            for algo, rep_dict in reports.items():
                cells[cell_key(level, rep, algo)] = rep_dict
            _registry_save(registry_path, registry)
            done_count += 1
            log.info("ladder cell %d/%d done (episodes=%d, replicate=%d)",
                     done_count, len(pending), level, rep)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for (level, rep), reports in pool.map(run_pair, pending):
                for algo, rep_dict in reports.items():
                    cells[cell_key(level, rep, algo)] = rep_dict
                _registry_save(registry_path, registry)
                done_count += 1
                log.info("ladder cell %d/%d done (episodes=%d, replicate=%d)",
                         done_count, len(pending), level, rep)

    # deterministic CSV rebuild from this config's cells
    oracle_report = _report_from_cell(cells[f"{fp}:{behavior}:ref:oracle_dp"])
    reports = []
    for name in REFERENCE_ALGOS:
        reports.append(_report_from_cell(cells[f"{fp}:{behavior}:ref:{name}"]))
    for level in levels:
        for rep in reps:
            for algo in algos:
                key = cell_key(level, rep, algo)
                if key in cells:
                    reports.append(_report_from_cell(cells[key]))
    rows = regret_table(reports, oracle_report)
    rows.sort(key=lambda r: (r["mode"], r["algo"], r["n_episodes"], r["seed"]))
    results_path = os.path.join(out_dir, "results.csv")
    _write_csv(results_path, rows)
    print(f"results: {results_path} ({len(rows)} rows, config {fp})")
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cfqi",
        description="Offline pricing-and-inventory policy learning under censored demand")
    parser.add_argument("--version", action="version", version=f"cfqi {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out_dir=False):
        p.add_argument("--config", help="JSON experiment config (defaults match the study protocol)")
        p.add_argument("--seed", type=int, default=None, help="stage seed override")
        p.add_argument("--episodes", type=int, nargs="+", default=None,
                       help="episode count(s); the ladder for `experiment`, a single count elsewhere")
        p.add_argument("--behavior", choices=("uniform", "optimal", "epsilon_safe"), default=None)
        p.add_argument("--quick", action="store_true", help="shrunk protocol for smoke runs")
        p.add_argument("--window-k", dest="window_k", type=int, default=None,
                       help="override the depth-estimation window length")

    p = sub.add_parser("generate", help="simulate an offline dataset under a behavior policy")
    common(p)
    p.add_argument("--out", required=True, help="output dataset path (NDJSON)")
    p.add_argument("--cache-dir", default=None,
                   help="where to cache the reference policy for --behavior optimal")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("impute", help="fit the survival model and fill censored rewards")
    common(p)
    p.add_argument("--data", required=True, help="input dataset path")
    p.add_argument("--out", required=True, help="output augmented dataset path")
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("train", help="fit a policy on an augmented dataset")
    common(p)
    p.add_argument("--data", required=True, help="augmented dataset path (with surrogate rewards)")
    p.add_argument("--algo", choices=MODES, default="cfqi")
    p.add_argument("--out", required=True, help="output policy artifact path (JSON)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="estimate a policy's discounted return by simulation")
    common(p)
    p.add_argument("--policy", required=True, help="policy artifact (.json) or reference table (.npz)")
    p.add_argument("--oracle", default=None, help="cached oracle table (.npz) for a regret column")
    p.add_argument("--out", default=None, help="optional CSV path for the evaluation row")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="run the full episode-ladder study")
    common(p)
    p.add_argument("--algo", choices=MODES, default=None,
                   help="restrict to one algorithm (default: all)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--seeds", type=int, default=None,
                   help="number of replicate seeds (same as --replicates)")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args)
    except (ConfigError, ParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except CfqiError as exc:
        print(f"error: stage '{args.command}' failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
