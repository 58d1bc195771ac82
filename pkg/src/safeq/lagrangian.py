"""Augmented-Lagrangian penalty arithmetic and dual-variable bookkeeping.

Three constraint families are handled differently:

* cumulative inequalities ``V_c(pi) <= d`` get a pure linear multiplier
  ``lambda`` and enter the per-step reward as ``lambda * (c - (1 - gamma) d)``;
* instantaneous equalities ``e(s, a) = 0`` get a sign-free multiplier ``mu``
  plus a quadratic term ``rho / 2 * e**2``;
* instantaneous inequalities ``g(s, a) <= 0`` get ``nu * g+ + rho / 2 * g+**2``.

Everything here is a pure function of its inputs. ``DualState`` objects are
never mutated in place by the update rules; a fresh copy is returned.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np


class ConfigError(ValueError):
    """Raised for invalid constraint declarations or hyperparameters."""


class ConstraintKind(str, enum.Enum):
    CUMULATIVE = "cumulative"
    EQUALITY = "equality"
    INSTANT = "instant"


@dataclass(frozen=True)
class ConstraintSpec:
    id: str
    kind: ConstraintKind
    budget: float | None = None
    description: str = ""

    def __post_init__(self):
        kind = ConstraintKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is ConstraintKind.CUMULATIVE:
            if self.budget is None:
                raise ConfigError(f"cumulative constraint {self.id!r} needs a budget")
            if not self.budget >= 0:
                raise ConfigError(f"budget of {self.id!r} must be >= 0, got {self.budget}")
        elif self.budget is not None:
            raise ConfigError(f"only cumulative constraints carry a budget ({self.id!r})")


def validate_specs(specs: Iterable[ConstraintSpec]) -> list[ConstraintSpec]:
    specs = list(specs)
    seen = set()
    for s in specs:
        if s.id in seen:
            raise ConfigError(f"duplicate constraint id {s.id!r}")
        seen.add(s.id)
    return specs


def ids_of(specs: Sequence[ConstraintSpec], kind: ConstraintKind) -> list[str]:
    return [s.id for s in specs if s.kind is kind]


@dataclass
class CostSample:
    """Per-step constraint values, keyed by constraint id."""

    g: dict[str, float] = field(default_factory=dict)
    e: dict[str, float] = field(default_factory=dict)
    c: dict[str, float] = field(default_factory=dict)


@dataclass
class TrainingConfig:
    gamma: float = 0.95
    horizon: int = 100
    dual_period: int = 1
    # "any": scale rho if any step violated; "mean": if the episode mean exceeds tol
    scale_trigger: str = "mean"
    violation_tol: float = 1e-9

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        if self.dual_period < 1:
            raise ConfigError(f"dual_period must be >= 1, got {self.dual_period}")
        if self.scale_trigger not in ("any", "mean"):
            raise ConfigError(f"scale_trigger must be 'any' or 'mean', got {self.scale_trigger!r}")


@dataclass
class DualState:
    lam: dict[str, float]
    mu: dict[str, float]
    nu: dict[str, float]
    rho_eq: dict[str, float]
    rho_inst: dict[str, float]
    xi: float = 1.1
    rho_max: float = 1e5
    beta_lambda: float = 0.1
    beta_mu: float = 0.1
    beta_nu: float = 0.1

    def __post_init__(self):
        if not self.xi > 1.0:
            raise ConfigError(f"xi must be > 1, got {self.xi}")
        if not self.rho_max > 0:
            raise ConfigError("rho_max must be positive")
        for name in ("beta_lambda", "beta_mu", "beta_nu"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for rho in (self.rho_eq, self.rho_inst):
            for k, v in rho.items():
                if not 0 < v <= self.rho_max:
                    raise ConfigError(f"rho[{k!r}]={v} outside (0, rho_max]")

    @classmethod
    def initial(cls, specs: Sequence[ConstraintSpec], rho0: float = 0.05, **kw) -> "DualState":
        """Zero multipliers and uniform initial penalty factors."""
        return cls(
            lam={i: 0.0 for i in ids_of(specs, ConstraintKind.CUMULATIVE)},
            mu={j: 0.0 for j in ids_of(specs, ConstraintKind.EQUALITY)},
            nu={k: 0.0 for k in ids_of(specs, ConstraintKind.INSTANT)},
            rho_eq={j: rho0 for j in ids_of(specs, ConstraintKind.EQUALITY)},
            rho_inst={k: rho0 for k in ids_of(specs, ConstraintKind.INSTANT)},
            **kw,
        )

    def copy(self) -> "DualState":
        return replace(
            self,
            lam=dict(self.lam),
            mu=dict(self.mu),
            nu=dict(self.nu),
            rho_eq=dict(self.rho_eq),
            rho_inst=dict(self.rho_inst),
        )

    def as_dict(self) -> dict:
        return {
            "lambda": dict(self.lam),
            "mu": dict(self.mu),
            "nu": dict(self.nu),
            "rho_eq": dict(self.rho_eq),
            "rho_inst": dict(self.rho_inst),
            "xi": self.xi,
            "rho_max": self.rho_max,
            "beta_lambda": self.beta_lambda,
            "beta_mu": self.beta_mu,
            "beta_nu": self.beta_nu,
        }


def positive_part(x: float) -> float:
    return max(0.0, x)


def _check_keys(values: Mapping[str, float], known: Mapping[str, float], what: str):
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown {what} constraint id(s): {sorted(unknown)}")


def penalty_inst(costs: CostSample, duals: DualState) -> float:
    """Sum over k of ``nu_k g_k+ + rho_k / 2 (g_k+)^2``; always >= 0."""
    _check_keys(costs.g, duals.nu, "instantaneous")
    total = 0.0
    for k, gk in costs.g.items():
        gp = positive_part(gk)
        total += duals.nu[k] * gp + 0.5 * duals.rho_inst[k] * gp * gp
    return total


def penalty_eq(costs: CostSample, duals: DualState) -> float:
    _check_keys(costs.e, duals.mu, "equality")
    total = 0.0
    for j, ej in costs.e.items():
        total += duals.mu[j] * ej + 0.5 * duals.rho_eq[j] * ej * ej
    return total


def _budgets(specs: Sequence[ConstraintSpec]) -> dict[str, float]:
    return {s.id: s.budget for s in specs if s.kind is ConstraintKind.CUMULATIVE}


def penalty_cum_step(
    costs: CostSample,
    duals: DualState,
    specs: Sequence[ConstraintSpec],
    cfg: TrainingConfig,
) -> float:
    """Budget spread over steps: ``sum_i lambda_i (c_i - (1 - gamma) d_i)``."""
    budgets = _budgets(specs)
    total = 0.0
    for i, ci in costs.c.items():
        if i not in budgets:
            raise ConfigError(f"cumulative cost {i!r} has no registered budget")
        total += duals.lam[i] * (ci - (1.0 - cfg.gamma) * budgets[i])
    return total


def penalty_step(costs, duals, specs, cfg) -> float:
    return (
        penalty_inst(costs, duals)
        + penalty_eq(costs, duals)
        + penalty_cum_step(costs, duals, specs, cfg)
    )


def estimate_cumulative_cost(trajectory: Sequence[CostSample], gamma: float) -> dict[str, float]:
    """Single-trajectory Monte-Carlo estimate of ``sum_t gamma^t c_i``."""
    if not trajectory:
        raise ValueError("empty trajectory")
    out: dict[str, float] = {}
    disc = 1.0
    for sample in trajectory:
        for i, ci in sample.c.items():
            out[i] = out.get(i, 0.0) + disc * ci
        disc *= gamma
    return out


def dual_ascent(
    duals: DualState,
    vhat_minus_d: Mapping[str, float],
    mean_e: Mapping[str, float],
    mean_gplus: Mapping[str, float],
) -> DualState:
    """Projected dual ascent step; rho and xi are left untouched.

    ``vhat_minus_d`` holds the budget excess ``V_hat_c - d`` per cumulative id.
    """
    for name in ("beta_lambda", "beta_mu", "beta_nu"):
        if getattr(duals, name) < 0:
            raise ConfigError(f"{name} must be non-negative")
    new = duals.copy()
    for i, v in vhat_minus_d.items():
        new.lam[i] = max(0.0, duals.lam[i] + duals.beta_lambda * v)
    for j, ej in mean_e.items():
        new.mu[j] = duals.mu[j] + duals.beta_mu * ej
    for k, gk in mean_gplus.items():
        new.nu[k] = max(0.0, duals.nu[k] + duals.beta_nu * gk)
    return new


def scale_penalties(duals: DualState, violated: Iterable[str]) -> DualState:
    new = duals.copy()
    for cid in violated:
        for rho in (new.rho_eq, new.rho_inst):
            if cid in rho:
                rho[cid] = min(duals.xi * rho[cid], duals.rho_max)
    return new


# -- vectorised forms used on replay minibatches ---------------------------------


@dataclass(frozen=True)
class ConstraintLayout:
    """Fixed column order for the cost matrices stored in replay buffers."""

    inst: tuple[str, ...]
    eq: tuple[str, ...]
    cum: tuple[str, ...]
    budgets: tuple[float, ...]

    @classmethod
    def from_specs(cls, specs: Sequence[ConstraintSpec]) -> "ConstraintLayout":
        cum = [s for s in specs if s.kind is ConstraintKind.CUMULATIVE]
        return cls(
            inst=tuple(ids_of(specs, ConstraintKind.INSTANT)),
            eq=tuple(ids_of(specs, ConstraintKind.EQUALITY)),
            cum=tuple(s.id for s in cum),
            budgets=tuple(float(s.budget) for s in cum),
        )

    def to_arrays(self, costs: CostSample) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        g = np.array([costs.g[k] for k in self.inst], dtype=float)
        e = np.array([costs.e[j] for j in self.eq], dtype=float)
        c = np.array([costs.c[i] for i in self.cum], dtype=float)
        return g, e, c


def penalty_step_batch(
    g: np.ndarray,
    e: np.ndarray,
    c: np.ndarray,
    duals: DualState,
    layout: ConstraintLayout,
    gamma: float,
) -> np.ndarray:
    """Row-wise ``penalty_step`` for cost matrices of shape (n, n_ids)."""
    n = g.shape[0]
    out = np.zeros(n)
    if layout.inst:
        nu = np.array([duals.nu[k] for k in layout.inst])
        rho = np.array([duals.rho_inst[k] for k in layout.inst])
        gp = np.maximum(g, 0.0)
        out += gp @ nu + 0.5 * (gp * gp) @ rho
    if layout.eq:
        mu = np.array([duals.mu[j] for j in layout.eq])
        rho = np.array([duals.rho_eq[j] for j in layout.eq])
        out += e @ mu + 0.5 * (e * e) @ rho
    if layout.cum:
        lam = np.array([duals.lam[i] for i in layout.cum])
        allowance = (1.0 - gamma) * np.array(layout.budgets)
        out += (c - allowance) @ lam
    return out
