"""Run configuration: YAML file + dotted command-line overrides, validated against dataclass schemas.

Grammar (every key optional)::

    env:
      name: cmdp | uav | ris
      cmdp: {seed, n_states, n_actions, n_constraints, budget_fraction}   # discount is agent.gamma
      uav:  {UavConfig fields}
      ris:  {RisConfig fields}
    agent: {AgentConfig fields}
    duals: {DualConfig fields}
    ablation: {penalties_enabled: bool, shield_enabled: bool}
    constraints: [{id, kind, budget, description}, ...]   # restrict/override env constraints
    oracle: {seeds: [..], episodes: int}
    episodes: int
    eval_episodes: int
    seed: int
    output_dir: path
    checkpoint_dir: path        # eval: where agent_<n> checkpoints live
    record_trajectory: bool     # uav: dump the last episode's trajectory CSV

Overrides use dotted paths (``--agent.gamma 0.9``); a leaf name that is
unique across the schema also works bare (``--gamma 0.9``).
"""

from __future__ import annotations

import copy
import dataclasses
import os
import typing
from dataclasses import dataclass, field

import numpy as np
import yaml

from .agent import AgentConfig, DualConfig
from .envs.ris import RisConfig
from .envs.uav import UavConfig
from .lagrangian import ConfigError, ConstraintKind, ConstraintSpec, validate_specs


@dataclass
class CmdpConfig:
    seed: int = 0
    n_states: int = 5
    n_actions: int = 3
    n_constraints: int = 1
    budget_fraction: float = 0.7


@dataclass
class AblationConfig:
    penalties_enabled: bool = True
    shield_enabled: bool = True


@dataclass
class OracleConfig:
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    episodes: int = 500


SECTIONS = {
    ("env", "cmdp"): CmdpConfig,
    ("env", "uav"): UavConfig,
    ("env", "ris"): RisConfig,
    ("agent",): AgentConfig,
    ("duals",): DualConfig,
    ("ablation",): AblationConfig,
    ("oracle",): OracleConfig,
}

TOP_LEVEL = {
    "episodes": (int, 1000),
    "eval_episodes": (int, 100),
    "seed": (int, 0),
    "output_dir": (typing.Optional[str], None),
    "checkpoint_dir": (typing.Optional[str], None),
    "record_trajectory": (bool, False),
}

ENV_NAMES = ("cmdp", "uav", "ris")


def _schema_fields(cls):
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        else:
            out[f.name] = f.default_factory()
    return out


def _to_plain(value):
    if isinstance(value, tuple):
        return [_to_plain(v) for v in value]
    if isinstance(value, list):
        return [_to_plain(v) for v in value]
    if hasattr(value, "item") and not isinstance(value, (list, dict, str)):
        return value.item()
    return value


def default_tree() -> dict:
    tree = {"env": {"name": "cmdp"}}
    for path, cls in SECTIONS.items():
        node = tree
        for p in path[:-1]:
            node = node.setdefault(p, {})
        defaults = _defaults(cls)
        if cls is UavConfig:
            defaults.pop("shield")  # driven by ablation.shield_enabled
        node[path[-1]] = {k: _to_plain(v) for k, v in defaults.items()}
    tree["constraints"] = None
    for k, (_, d) in TOP_LEVEL.items():
        tree[k] = d
    return tree


def _check_type(value, hint, path: str):
    origin = typing.get_origin(hint)
    if origin is typing.Union or type(hint).__name__ == "UnionType":
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _check_type(value, a, path)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0] if errors else f"{path}: bad value {value!r}")
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected bool, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected int, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {value!r}")
        return value
    if hint in (tuple, list) or origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return list(value)
    return value


def _merge(base: dict, override: dict, path: str = ""):
    for k, v in override.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[k], dict) and not isinstance(v, dict):
            raise ConfigError(f"{where}: expected a mapping")
        if isinstance(base[k], dict):
            _merge(base[k], v, where)
        else:
            base[k] = v


def leaf_paths(tree: dict, prefix: str = "") -> list[str]:
    out = []
    for k, v in tree.items():
        p = f"{prefix}.{k}" if prefix else k
        if isinstance(v, dict):
            out += leaf_paths(v, p)
        else:
            out.append(p)
    return out


def resolve_flag(key: str, tree: dict) -> str:
    """Map a flag name (dotted or bare leaf) to its dotted path."""
    paths = leaf_paths(tree)
    if key in paths:
        return key
    matches = [p for p in paths if p.rsplit(".", 1)[-1] == key]
    if len(matches) == 1:
        return matches[0]
    if matches:
        raise ConfigError(f"ambiguous option '--{key}': use one of " + ", ".join(f"--{m}" for m in matches))
    raise ConfigError(f"unknown config key '{key}'")


def set_path(tree: dict, dotted: str, value):
    node = tree
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node[p]
    node[parts[-1]] = value


@dataclass
class RunConfig:
    tree: dict
    env_name: str
    agent: AgentConfig
    duals: DualConfig
    ablation: AblationConfig
    oracle: OracleConfig
    cmdp: CmdpConfig
    uav: UavConfig
    ris: RisConfig
    constraints: list | None
    episodes: int
    eval_episodes: int
    seed: int
    output_dir: str | None
    checkpoint_dir: str | None
    record_trajectory: bool

    def resolved_output_dir(self) -> str:
        if self.output_dir:
            return self.output_dir
        root = os.environ.get("SAFEQ_OUT", "runs")
        return os.path.join(root, f"{self.env_name}_seed{self.seed}")

    def dump(self) -> str:
        return yaml.safe_dump(self.tree, sort_keys=True)


def _build_section(cls, values: dict, path: str):
    kwargs = {}
    hints = _schema_fields(cls)
    for k, v in values.items():
        kwargs[k] = _check_type(v, hints[k], f"{path}.{k}")
        if hints[k] is tuple or typing.get_origin(hints[k]) is tuple or (
                typing.get_origin(hints[k]) is not None and tuple in typing.get_args(hints[k])):
            if isinstance(kwargs[k], list):
                kwargs[k] = tuple(kwargs[k])
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_constraints(raw, path="constraints"):
    if raw is None:
        return None
    if not isinstance(raw, list):
        raise ConfigError(f"{path}: expected a list of constraint declarations")
    specs = []
    seen = {}
    for i, item in enumerate(raw):
        where = f"{path}[{i}]"
        if not isinstance(item, dict):
            raise ConfigError(f"{where}: expected a mapping")
        unknown = set(item) - {"id", "kind", "budget", "description"}
        if unknown:
            raise ConfigError(f"unknown config key '{where}.{sorted(unknown)[0]}'")
        cid = item.get("id")
        if not isinstance(cid, str) or not cid:
            raise ConfigError(f"{where}.id: expected a non-empty string")
        if cid in seen:
            raise ConfigError(f"{where}.id: constraint id '{cid}' collides with {path}[{seen[cid]}]")
        seen[cid] = i
        try:
            kind = ConstraintKind(item.get("kind"))
        except ValueError:
            raise ConfigError(f"{where}.kind: expected one of cumulative/equality/instant, "
                              f"got {item.get('kind')!r}") from None
        budget = item.get("budget")
        if budget is not None:
            budget = _check_type(budget, float, f"{where}.budget")
        try:
            specs.append(ConstraintSpec(cid, kind, budget, str(item.get("description", ""))))
        except ConfigError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    return validate_specs(specs)


def build(tree: dict) -> RunConfig:
    tree = copy.deepcopy(tree)
    env_name = tree["env"]["name"]
    if env_name not in ENV_NAMES:
        raise ConfigError(f"env.name: expected one of {', '.join(ENV_NAMES)}, got {env_name!r}")
    sections = {}
    for path, cls in SECTIONS.items():
        node = tree
        for p in path:
            node = node[p]
        if not isinstance(node, dict):
            raise ConfigError(f"{'.'.join(path)}: expected a mapping")
        values = dict(node)
        if cls is UavConfig:
            values["shield"] = tree["ablation"]["shield_enabled"]
        sections[path[-1]] = _build_section(cls, values, ".".join(path))
    top = {k: _check_type(tree[k], hint, k) for k, (hint, _) in TOP_LEVEL.items()}
    if top["episodes"] < 0 or top["eval_episodes"] < 0:
        raise ConfigError("episodes and eval_episodes must be non-negative")
    for i, s in enumerate(sections["oracle"].seeds):
        _check_type(s, int, f"oracle.seeds[{i}]")
    return RunConfig(
        tree=tree, env_name=env_name, agent=sections["agent"], duals=sections["duals"],
        ablation=sections["ablation"], oracle=sections["oracle"], cmdp=sections["cmdp"],
        uav=sections["uav"], ris=sections["ris"],
        constraints=_parse_constraints(tree.get("constraints")), **top)


def load(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults <- YAML file <- overrides (dotted or bare keys)."""
    tree = default_tree()
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(tree, data)
    for key, value in (overrides or {}).items():
        set_path(tree, resolve_flag(key, tree), value)
    return build(tree)


# -- environment construction --------------------------------------------------------


def make_env(cfg: RunConfig, seed: int | None = None):
    """Environment for the config; ``seed`` defaults to the run seed."""
    from .envs.ris import RisEnv
    from .envs.uav import UavEnv
    from .oracle import CmdpEnv, random_cmdp

    seed = cfg.seed if seed is None else seed
    if cfg.env_name == "cmdp":
        c = cfg.cmdp
        spec = random_cmdp(c.seed, c.n_states, c.n_actions, c.n_constraints, cfg.agent.gamma,
                           c.budget_fraction)
        env = CmdpEnv(spec, horizon=cfg.agent.horizon)
        env.rng = np.random.default_rng(seed)
    elif cfg.env_name == "uav":
        uav = dataclasses.replace(cfg.uav, horizon=cfg.agent.horizon)
        env = UavEnv(uav, seed=seed, record_trajectory=cfg.record_trajectory)
    else:
        env = RisEnv(cfg.ris, seed=seed)
    if cfg.constraints is not None:
        env.constraints = select_constraints(env.constraints, cfg.constraints)
    return env


def select_constraints(env_specs, declared):
    known = {s.id: s for s in env_specs}
    out = []
    for i, spec in enumerate(declared):
        if spec.id not in known:
            raise ConfigError(f"constraints[{i}].id: environment has no constraint '{spec.id}' "
                              f"(available: {', '.join(known)})")
        if spec.kind != known[spec.id].kind:
            raise ConfigError(f"constraints[{i}].kind: '{spec.id}' is {known[spec.id].kind.value}, "
                              f"not {spec.kind.value}")
        out.append(spec)
    return out

