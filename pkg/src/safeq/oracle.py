"""Finite CMDPs with exact ground truth.

``policy_value`` solves the Bellman linear system directly, and
``best_feasible_deterministic`` enumerates every stationary deterministic
policy. Both are cheap for the 5-state/3-action instances used in acceptance.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .lagrangian import ConstraintKind, ConstraintSpec, CostSample


class EnumerationBudgetError(ValueError):
    pass


@dataclass
class CmdpSpec:
    P: np.ndarray  # (S, A, S)
    r: np.ndarray  # (S, A)
    c: np.ndarray  # (n_cum, S, A)
    gamma: float
    budgets: np.ndarray  # (n_cum,)
    init: np.ndarray  # (S,)
    g: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 0)))  # (n_inst, S, A)

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        self.c = np.asarray(self.c, dtype=float).reshape(-1, *self.r.shape)
        self.budgets = np.asarray(self.budgets, dtype=float).reshape(-1)
        self.init = np.asarray(self.init, dtype=float)
        g = np.asarray(self.g, dtype=float)
        self.g = g.reshape(-1, *self.r.shape) if g.size else np.zeros((0, *self.r.shape))
        S, A = self.r.shape
        if self.P.shape != (S, A, S):
            raise ValueError(f"P must have shape {(S, A, S)}, got {self.P.shape}")
        if not np.allclose(self.P.sum(axis=2), 1.0, atol=1e-12, rtol=0):
            raise ValueError("transition rows must sum to 1")
        if (self.P < 0).any():
            raise ValueError("negative transition probability")
        if len(self.budgets) != len(self.c):
            raise ValueError("one budget per cumulative cost required")
        if not np.isclose(self.init.sum(), 1.0, atol=1e-12):
            raise ValueError("initial distribution must sum to 1")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        for arr in (self.P, self.r, self.c, self.init, self.g):
            if not np.isfinite(arr).all():
                raise ValueError("non-finite entries in CMDP")

    @property
    def n_states(self) -> int:
        return self.r.shape[0]

    @property
    def n_actions(self) -> int:
        return self.r.shape[1]

    def constraint_specs(self) -> list[ConstraintSpec]:
        specs = [ConstraintSpec(f"c{i}", ConstraintKind.CUMULATIVE, float(d))
                 for i, d in enumerate(self.budgets)]
        specs += [ConstraintSpec(f"g{k}", ConstraintKind.INSTANT) for k in range(len(self.g))]
        return specs


def state_values(spec: CmdpSpec, policy) -> tuple[np.ndarray, np.ndarray]:
    """Per-state values of reward and of each cumulative cost."""
    pol = np.asarray(policy, dtype=np.int64)
    S = spec.n_states
    states = np.arange(S)
    P_pi = spec.P[states, pol]
    M = np.eye(S) - spec.gamma * P_pi
    rhs = np.column_stack([spec.r[states, pol]] + [c[states, pol] for c in spec.c])
    sol = np.linalg.solve(M, rhs)
    resid = np.abs(M @ sol - rhs).max()
    assert resid < 1e-10, f"linear solve residual {resid}"
    return sol[:, 0], sol[:, 1:].T


def policy_value(spec: CmdpSpec, policy) -> tuple[float, np.ndarray]:
    """(V_r, V_c) of a deterministic policy, weighted by the initial distribution."""
    vr, vc = state_values(spec, policy)
    return float(spec.init @ vr), vc @ spec.init


def value_iteration(P, r, gamma, tol=1e-12, max_iter=100_000):
    """Optimal values and greedy policy (ties to the lowest action)."""
    v = np.zeros(r.shape[0])
    for _ in range(max_iter):
        q = r + gamma * P @ v
        v_new = q.max(axis=1)
        if np.abs(v_new - v).max() < tol:
            v = v_new
            break
        v = v_new
    q = r + gamma * P @ v
    return v, q.argmax(axis=1)


@dataclass
class OracleResult:
    policy: np.ndarray | None
    v_r: float
    v_c: np.ndarray
    infeasible: bool


def best_feasible_deterministic(spec: CmdpSpec, max_policies: int = 1_000_000) -> OracleResult:
    S, A = spec.n_states, spec.n_actions
    if A ** S > max_policies:
        raise EnumerationBudgetError(f"{A}^{S} policies exceed the enumeration budget {max_policies}")
    best = OracleResult(None, -np.inf, np.full(len(spec.budgets), np.nan), True)
    for pol in itertools.product(range(A), repeat=S):
        vr, vc = policy_value(spec, pol)
        if np.all(vc <= spec.budgets) and vr > best.v_r:
            best = OracleResult(np.array(pol), vr, vc, False)
    return best


def random_cmdp(seed: int, n_states: int = 5, n_actions: int = 3, n_constraints: int = 1,
                gamma: float = 0.9, budget_fraction: float = 0.7) -> CmdpSpec:
    """Random instance whose budgets bind against the unconstrained optimum."""
    if n_states < 2 or n_actions < 2:
        raise ValueError("need at least 2 states and 2 actions")
    rng = np.random.default_rng(seed)
    expo = rng.exponential(size=(n_states, n_actions, n_states))
    P = expo / expo.sum(axis=2, keepdims=True)
    r = rng.uniform(size=(n_states, n_actions))
    c = rng.uniform(size=(n_constraints, n_states, n_actions))
    init = np.full(n_states, 1.0 / n_states)
    _, greedy = value_iteration(P, r, gamma)
    probe = CmdpSpec(P, r, c, gamma, np.zeros(n_constraints), init)
    _, vc = policy_value(probe, greedy)
    return CmdpSpec(P, r, c, gamma, budget_fraction * vc, init)


class CmdpEnv:
    """Single-agent episodic wrapper with one-hot observations."""

    n_agents = 1
    name = "cmdp"

    def __init__(self, spec: CmdpSpec, horizon: int = 100):
        self.spec = spec
        self.horizon = horizon
        self.n_actions = spec.n_actions
        self.obs_dim = spec.n_states
        self.constraints = spec.constraint_specs()
        self.state = 0
        self.t = 0
        self.rng = np.random.default_rng(0)
        self._eye = np.eye(spec.n_states)

    def reset(self, seed=None):
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = int(self.rng.choice(self.spec.n_states, p=self.spec.init))
        self.t = 0
        return [self._eye[self.state].copy()]

    def action_mask(self, agent: int = 0) -> np.ndarray:
        return np.ones(self.n_actions, dtype=bool)

    def fallback_action(self, agent: int = 0) -> int:
        return 0

    def step(self, actions):
        from .envs.base import EnvStep  # local import keeps oracle importable on its own

        a = int(actions[0])
        s = self.state
        costs = CostSample(
            g={f"g{k}": float(gk[s, a]) for k, gk in enumerate(self.spec.g)},
            c={f"c{i}": float(ci[s, a]) for i, ci in enumerate(self.spec.c)},
        )
        reward = float(self.spec.r[s, a])
        self.state = int(self.rng.choice(self.spec.n_states, p=self.spec.P[s, a]))
        self.t += 1
        info = {"violation": any(v > 0 for v in costs.g.values()), "overridden": False}
        step = EnvStep(self._eye[self.state].copy(), reward, costs, False,
                       self.t >= self.horizon, info)
        return [step]

    def episode_metrics(self, agent: int = 0) -> dict:
        return {}


@dataclass
class BenchmarkRow:
    seed: int
    infeasible_instance: bool
    oracle_v_r: float
    learner_v_r: float
    ratio: float
    max_excess: float  # max_i V_c,i - d_i of the learner's greedy policy
    feasible: bool
    passed: bool | None  # None when the instance itself has no feasible policy
    env_steps: int
    seconds: float


def run_oracle_benchmark(seeds, agent_cfg, dual_cfg, episodes: int = 500, *, n_states: int = 5,
                         n_actions: int = 3, n_constraints: int = 1, gamma: float = 0.9,
                         penalties: bool = True, ratio: float = 0.95, tol: float = 1e-2,
                         on_row=None) -> list[BenchmarkRow]:
    """Train tabular Safe-Q-Learning on ``random_cmdp(seed)`` for each seed and grade it against the oracle."""
    import dataclasses
    import time

    from .agent import run_training

    cfg = dataclasses.replace(agent_cfg, kind="tabular", gamma=gamma)
    rows = []
    for seed in seeds:
        t0 = time.perf_counter()
        spec = random_cmdp(seed, n_states, n_actions, n_constraints, gamma)
        oracle = best_feasible_deterministic(spec)
        env = CmdpEnv(spec, horizon=cfg.horizon)
        env.rng = np.random.default_rng([seed, 1])
        art = run_training(env, cfg, dual_cfg, episodes, seed=seed, penalties=penalties)
        policy = art.agents[0].q.greedy_policy()
        vr, vc = policy_value(spec, policy)
        excess = float(np.max(vc - spec.budgets)) if len(vc) else -np.inf
        feasible = excess <= tol
        if oracle.infeasible:
            passed, r = None, float("nan")
        else:
            r = vr / oracle.v_r if oracle.v_r != 0 else float("nan")
            passed = bool(feasible and vr >= ratio * oracle.v_r)
        row = BenchmarkRow(seed, oracle.infeasible, oracle.v_r, vr, r, excess, feasible, passed,
                           episodes * cfg.horizon, time.perf_counter() - t0)
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows
