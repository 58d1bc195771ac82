"""``safeq`` command line: train, eval and oracle-check.

Exit codes: 0 success, 1 run failure or failed acceptance check, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import yaml

from . import config as config_mod
from .agent import (
    FactoredHead,
    build_agents,
    evaluate,
    load_checkpoint,
    run_training,
    save_checkpoint,
)
from .lagrangian import ConfigError, ConstraintKind
from .oracle import run_oracle_benchmark

log = logging.getLogger("safeq")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
EVAL_SEED_OFFSET = 10_000
CONVERGENCE_WINDOW = 200


class MetricsWriter:
    """Append-only CSV; the header comes from the first row and every episode is flushed."""

    def __init__(self, path: str):
        self.path = path
        self._fh = open(path, "w", newline="")
        self._writer = None

    def write(self, rows):
        for row in rows:
            if self._writer is None:
                self._writer = csv.DictWriter(self._fh, fieldnames=list(row), lineterminator="\n")
                self._writer.writeheader()
            self._writer.writerow(row)
        self._fh.flush()

    def close(self):
        self._fh.close()


def head_factory_for(cfg, env):
    if cfg.agent.head == "flat":
        return None
    if cfg.agent.head == "factored":
        radices = getattr(env, "action_radices", None)
        if radices is None:
            raise ConfigError(f"agent.head: environment '{cfg.env_name}' has no factored action layout")
        return lambda: FactoredHead(radices)
    raise ConfigError(f"agent.head: expected 'flat' or 'factored', got {cfg.agent.head!r}")


def convergence_episode(violations_per_episode, window: int = CONVERGENCE_WINDOW):
    """First episode after which violations stay at zero for ``window`` consecutive episodes."""
    run = 0
    for ep, v in enumerate(violations_per_episode):
        run = run + 1 if v == 0 else 0
        if run == window:
            return ep - window + 1
    return None


def _write_yaml(path, data):
    with open(path, "w") as fh:
        yaml.safe_dump(data, fh, sort_keys=True)


def cmd_train(cfg: config_mod.RunConfig) -> int:
    out = cfg.resolved_output_dir()
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "resolved_config.yaml"), "w") as fh:
        fh.write(cfg.dump())
    env = config_mod.make_env(cfg)
    mode = "single" if env.n_agents == 1 else "multi"
    writer = MetricsWriter(os.path.join(out, "metrics.csv"))
    try:
        art = run_training(env, cfg.agent, cfg.duals, cfg.episodes, seed=cfg.seed, mode=mode,
                           penalties=cfg.ablation.penalties_enabled, on_episode=writer.write,
                           head_factory=head_factory_for(cfg, env))
    finally:
        writer.close()
    for i, agent in enumerate(art.agents):
        save_checkpoint(agent, out, i)
    if cfg.record_trajectory and hasattr(env, "write_trajectory"):
        env.write_trajectory(os.path.join(out, "trajectory.csv"))

    per_episode = [sum(r.violations for r in reps) for reps in art.reports]
    summary = {
        "env": cfg.env_name,
        "episodes": cfg.episodes,
        "agents": len(art.agents),
        "mean_return_last_10pct": _tail_mean([np.mean([r.ret for r in reps]) for reps in art.reports]),
        "violations_total": int(sum(per_episode)),
        "shield_overrides_total": int(sum(r.shield_overrides for reps in art.reports for r in reps)),
        "convergence_episode": convergence_episode(per_episode),
        "final_duals": [a.duals.as_dict() for a in art.agents],
    }
    if cfg.env_name == "uav":
        summary["collisions_total"] = int(sum(r.extras["collisions"] for reps in art.reports for r in reps))
    _write_yaml(os.path.join(out, "summary.yaml"), summary)
    print(f"trained {cfg.episodes} episodes on {cfg.env_name}; outputs in {out}")
    return EXIT_OK


def _tail_mean(values, frac: float = 0.1):
    if not values:
        return None
    n = max(1, int(len(values) * frac))
    return float(np.mean(values[-n:]))


def eval_summary(env_name: str, specs, reports) -> dict:
    flat = [r for reps in reports for r in reps]
    steps = sum(r.steps for r in flat) or 1
    out = {"episodes": len(reports), "mean_return": float(np.mean([r.ret for r in flat])) if flat else 0.0}
    for s in specs:
        if s.kind == ConstraintKind.CUMULATIVE:
            rate = np.mean([r.v_hat[s.id] > s.budget for r in flat]) if flat else 0.0
        else:
            rate = sum(r.violation_steps[s.id] for r in flat) / steps
        out[f"violation_rate_{s.id}"] = float(rate)
    if env_name == "ris":
        out["feasible_probability"] = float(np.mean([r.extras["feasible"] for r in flat])) if flat else 0.0
        out["energy_cost_watts"] = float(np.mean([r.extras["energy_cost_watts"] for r in flat])) if flat else 0.0
    else:
        out["feasible_probability"] = float(np.mean([r.violations == 0 for r in flat])) if flat else 0.0
    out["override_rate"] = sum(r.shield_overrides for r in flat) / steps
    if env_name == "uav":
        out["distance_violation_rate"] = sum(r.extras["collisions"] for r in flat) / steps
    return out


def cmd_eval(cfg: config_mod.RunConfig) -> int:
    out = cfg.resolved_output_dir()
    ckpt_dir = cfg.checkpoint_dir or out
    os.makedirs(out, exist_ok=True)
    env = config_mod.make_env(cfg, seed=cfg.seed + EVAL_SEED_OFFSET)
    agents = build_agents(env, cfg.agent, cfg.duals, cfg.seed, cfg.ablation.penalties_enabled,
                          head_factory_for(cfg, env))
    for i, agent in enumerate(agents):
        load_checkpoint(agent, ckpt_dir, i)
    reports = evaluate(agents, env, cfg.eval_episodes)

    path = os.path.join(out, "eval_episodes.csv")
    with open(path, "w", newline="") as fh:
        if cfg.env_name == "ris":
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["episode", "feasible", "energy_cost_watts", "min_sinr_db"])
            for ep, reps in enumerate(reports):
                x = reps[0].extras
                w.writerow([ep, x["feasible"], x["energy_cost_watts"], x["min_sinr_db"]])
        else:
            w = csv.writer(fh, lineterminator="\n")
            extras = sorted(reports[0][0].extras) if reports else []
            w.writerow(["episode", "agent", "return", "violations", "shield_overrides"] + extras)
            for ep, reps in enumerate(reports):
                for i, r in enumerate(reps):
                    w.writerow([ep, i, r.ret, r.violations, r.shield_overrides] + [r.extras[k] for k in extras])
    summary = eval_summary(cfg.env_name, env.constraints, reports)
    _write_yaml(os.path.join(out, "eval_summary.yaml"), summary)
    for k, v in summary.items():
        print(f"{k}: {v}")
    return EXIT_OK


def cmd_oracle_check(cfg: config_mod.RunConfig) -> int:
    out = cfg.resolved_output_dir()
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "resolved_config.yaml"), "w") as fh:
        fh.write(cfg.dump())
    c = cfg.cmdp
    rows = run_oracle_benchmark(cfg.oracle.seeds, cfg.agent, cfg.duals, cfg.oracle.episodes,
                                n_states=c.n_states, n_actions=c.n_actions, n_constraints=c.n_constraints,
                                gamma=cfg.agent.gamma, penalties=cfg.ablation.penalties_enabled)
    fields = [f.name for f in dataclasses.fields(rows[0])] if rows else ["seed"]
    with open(os.path.join(out, "oracle_check.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            d = dataclasses.asdict(r)
            d["passed"] = "skipped" if r.passed is None else r.passed
            d["seconds"] = round(r.seconds, 3)
            w.writerow([d[f] for f in fields])
    for r in rows:
        status = "skipped (no feasible policy)" if r.passed is None else ("pass" if r.passed else "FAIL")
        ratio = "n/a" if math.isnan(r.ratio) else f"{r.ratio:.3f}"
        print(f"seed {r.seed}: {status}  V_r ratio {ratio}  max(V_c - d) {r.max_excess:+.4f}")
    failed = [r.seed for r in rows if r.passed is False]
    if failed:
        print(f"failing seeds: {', '.join(map(str, failed))}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "oracle-check": cmd_oracle_check}


def parse_overrides(tokens) -> dict:
    """``--a.b value`` / ``--a.b=value`` pairs; values are parsed as YAML scalars or lists."""
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) <= 2:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"option --{key} needs a value")
            raw = tokens[i + 1]
            i += 2
        try:
            out[key.replace("-", "_") if "." not in key else key] = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"--{key}: cannot parse value {raw!r}: {exc}") from None
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="safeq", allow_abbrev=False,
        description="Safe Q-learning with augmented-Lagrangian constraints. Any config key can be "
                    "overridden with --dotted.path VALUE (or --leaf VALUE when the leaf is unique).")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("train", "train agents and write metrics/checkpoints"),
                            ("eval", "greedy evaluation of saved checkpoints"),
                            ("oracle-check", "tabular learner vs exact CMDP oracle")):
        p = sub.add_parser(name, help=help_text, allow_abbrev=False)
        p.add_argument("-c", "--config", help="YAML config file")
        p.add_argument("--env", choices=config_mod.ENV_NAMES, help="shortcut for --env.name")
        p.add_argument("-o", "--out", dest="out", help="shortcut for --output_dir")
        if name == "train":
            p.add_argument("--seeds", help="comma-separated seeds; each run writes to <out>/seed_<s>")
            p.add_argument("--parallel-seeds", type=int, default=1,
                           help="number of worker processes for --seeds")
        if name == "eval":
            p.add_argument("--checkpoint", help="directory holding agent_<n>.ckpt files")
    return parser


def _train_one(tree: dict) -> int:
    return cmd_train(config_mod.build(tree))


def main(argv=None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_overrides(rest)
        if args.env:
            overrides["env.name"] = args.env
        if args.out:
            overrides["output_dir"] = args.out
        if getattr(args, "checkpoint", None):
            overrides["checkpoint_dir"] = args.checkpoint
        cfg = config_mod.load(args.config, overrides)
        if args.command == "train" and args.seeds:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
            root = cfg.resolved_output_dir()
            trees = []
            for s in seeds:
                t = json.loads(json.dumps(cfg.tree))
                t["seed"] = s
                t["output_dir"] = os.path.join(root, f"seed_{s}")
                config_mod.build(t)  # validate before anything runs
                trees.append(t)
            if args.parallel_seeds > 1:
                with ProcessPoolExecutor(max_workers=args.parallel_seeds) as pool:
                    codes = list(pool.map(_train_one, trees))
            else:
                codes = [_train_one(t) for t in trees]
            return max(codes, default=EXIT_OK)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"safeq: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - report any module failure as a run failure
        log.debug("run failed", exc_info=True)
        print(f"safeq: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
