"""Safe Deep Q-Learning: replay, augmented TD targets, masking and dual updates.

One ``SafeQAgent`` owns a Q-function (neural or tabular), a replay buffer and
its own ``DualState``. ``run_training`` drives any number of agents through a
shared environment; with one agent this is the single-agent loop, with several
it is the decentralised multi-agent loop where the joint environment step is
the only synchronisation point.
"""

from __future__ import annotations

import io
import json
import logging
import math
import os
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nn
from .envs.base import EnvFault
from .lagrangian import (
    ConstraintKind,
    ConstraintLayout,
    ConstraintSpec,
    CostSample,
    DualState,
    TrainingConfig,
    dual_ascent,
    penalty_step_batch,
    scale_penalties,
    validate_specs,
)

log = logging.getLogger(__name__)


@dataclass
class AgentConfig:
    kind: str = "neural"  # "neural" or "tabular"
    gamma: float = 0.95
    horizon: int = 100
    hidden: tuple = (128, 128)
    lr: float = 2e-5
    batch_size: int = 1024
    buffer_capacity: int = 50_000
    target_update: int = 100
    update_every: int = 1
    learning_starts: int | None = None
    eps_fraction: float = 0.8
    grad_clip: float | None = 10.0
    head: str = "flat"  # "flat" or "factored"
    tabular_lr: float = 0.5
    tabular_visit_scale: float = 1000.0


@dataclass
class DualConfig:
    beta_lambda: float = 0.1
    beta_mu: float = 0.1
    beta_nu: float = 0.1
    rho0: float = 0.05
    xi: float = 1.1
    rho_max: float = 1e5
    dual_period: int = 1
    scale_trigger: str = "mean"
    violation_tol: float = 1e-9
    vhat_window: int = 1
    dual_rule: str = "on_violation"  # or "always"
    vhat_source: str = "auto"  # "episode", "critic" (tabular only) or "auto"

    def __post_init__(self):
        if self.dual_rule not in ("always", "on_violation"):
            raise ValueError(f"dual_rule must be 'always' or 'on_violation', got {self.dual_rule!r}")
        if self.vhat_source not in ("episode", "critic", "auto"):
            raise ValueError(f"vhat_source must be 'episode', 'critic' or 'auto', got {self.vhat_source!r}")
        if self.vhat_window < 1 or self.dual_period < 1:
            raise ValueError("vhat_window and dual_period must be >= 1")


# -- action heads ------------------------------------------------------------------


class FlatHead:
    """One network output per discrete action."""

    def __init__(self, n_actions: int):
        self.n_actions = int(n_actions)
        self.n_outputs = self.n_actions

    def index_matrix(self, actions) -> np.ndarray:
        return np.asarray(actions, dtype=np.int64).reshape(-1, 1)

    def q_all(self, out: np.ndarray) -> np.ndarray:
        return out

    def argmax(self, out_row: np.ndarray, mask: np.ndarray) -> int:
        return int(np.argmax(np.where(mask, out_row, -np.inf)))

    def max(self, out: np.ndarray, masks: np.ndarray | None) -> np.ndarray:
        if masks is None:
            return out.max(axis=1)
        return np.where(masks, out, -np.inf).max(axis=1)


class FactoredHead:
    """Additive Q over the digits of a mixed-radix action code (least significant first).

    ``Q(s, a) = sum_d Q_d(s, digit_d(a))`` needs only ``sum(radices)`` outputs
    instead of ``prod(radices)``; unmasked maxima decompose digit by digit.
    """

    def __init__(self, radices: Sequence[int]):
        self.radices = tuple(int(r) for r in radices)
        self.offsets = np.concatenate([[0], np.cumsum(self.radices)[:-1]]).astype(np.int64)
        self.n_outputs = int(sum(self.radices))
        self.n_actions = int(np.prod(self.radices))
        self._place = np.concatenate([[1], np.cumprod(self.radices)[:-1]]).astype(np.int64)

    def digits(self, actions) -> np.ndarray:
        a = np.asarray(actions, dtype=np.int64).reshape(-1, 1)
        return (a // self._place) % np.array(self.radices)

    def encode(self, digits) -> int:
        return int(np.dot(np.asarray(digits, dtype=np.int64), self._place))

    def index_matrix(self, actions) -> np.ndarray:
        return self.digits(actions) + self.offsets

    def _segments(self, out):
        return [out[:, o:o + r] for o, r in zip(self.offsets, self.radices)]

    def q_all(self, out: np.ndarray) -> np.ndarray:
        segs = self._segments(np.atleast_2d(out))
        q = segs[-1]
        for seg in reversed(segs[:-1]):
            q = (q[:, :, None] + seg[:, None, :]).reshape(q.shape[0], -1)
        return q

    def argmax(self, out_row: np.ndarray, mask: np.ndarray) -> int:
        if mask.all():
            return self.encode([int(np.argmax(s[0])) for s in self._segments(out_row[None, :])])
        return int(np.argmax(np.where(mask, self.q_all(out_row)[0], -np.inf)))

    def max(self, out: np.ndarray, masks: np.ndarray | None) -> np.ndarray:
        if masks is None or masks.all():
            return sum(s.max(axis=1) for s in self._segments(out))
        return np.where(masks, self.q_all(out), -np.inf).max(axis=1)


# -- Q-functions -----------------------------------------------------------------


class NeuralQ:
    def __init__(self, obs_dim: int, head, hidden, lr, rng, grad_clip=10.0):
        self.head = head
        self.net = nn.Network.init((obs_dim, *hidden, head.n_outputs), rng)
        self.target = nn.sync_target(self.net)
        self.opt = nn.Adam(self.net, lr=lr)
        self.grad_clip = grad_clip

    @property
    def n_actions(self) -> int:
        return self.head.n_actions

    def values(self, obs) -> np.ndarray:
        return self.head.q_all(nn.forward(self.net, obs)[None, :])[0]

    def greedy(self, obs, mask) -> int:
        return self.head.argmax(nn.forward(self.net, obs), mask)

    def target_max(self, next_obs, masks) -> np.ndarray:
        return self.head.max(nn.forward(self.target, next_obs), masks)

    def update(self, obs, actions, targets) -> float:
        return nn.train_step(self.net, self.opt, obs, self.head.index_matrix(actions), targets,
                             clip_norm=self.grad_clip)

    def sync(self):
        nn.sync_target(self.net, self.target)


class TabularQ:
    """Dense Q-table indexed by one-hot observations.

    Each (s, a) entry uses its own step size ``lr / (1 + visits / visit_scale)``.
    """

    def __init__(self, n_states: int, n_actions: int, lr: float = 0.5, visit_scale: float = 1000.0,
                 n_cost_critics: int = 0):
        self.table = np.zeros((n_states, n_actions))
        # Q^pi_c of the current greedy policy, one table per cumulative cost
        self.cost_tables = np.zeros((n_cost_critics, n_states, n_actions))
        self.visits = np.zeros((n_states, n_actions), dtype=np.int64)
        self.lr = lr
        self.visit_scale = visit_scale

    @property
    def n_actions(self) -> int:
        return self.table.shape[1]

    @staticmethod
    def _state(obs) -> np.ndarray:
        return np.argmax(np.atleast_2d(obs), axis=1)

    def values(self, obs) -> np.ndarray:
        return self.table[int(self._state(obs)[0])].copy()

    def greedy(self, obs, mask) -> int:
        return int(np.argmax(np.where(mask, self.values(obs), -np.inf)))

    def target_max(self, next_obs, masks) -> np.ndarray:
        q = self.table[self._state(next_obs)]
        if masks is not None:
            q = np.where(masks, q, -np.inf)
        return q.max(axis=1)

    def update(self, obs, actions, targets) -> float:
        """Move each sampled (s, a) toward the mean of its targets in this batch."""
        flat = self._state(obs) * self.n_actions + np.asarray(actions, dtype=np.int64)
        targets = np.asarray(targets, dtype=float)
        q = self.table.reshape(-1)
        visits = self.visits.reshape(-1)
        loss = float(np.mean((targets - q[flat]) ** 2))
        uniq, inv, counts = np.unique(flat, return_inverse=True, return_counts=True)
        mean_y = np.bincount(inv, weights=targets) / counts
        step = self.lr / (1.0 + visits[uniq] / self.visit_scale)
        q[uniq] += step * (mean_y - q[uniq])
        visits[uniq] += 1
        return loss

    def update_costs(self, obs, actions, costs, next_obs, next_masks, terminal, gamma: float):
        """Off-policy evaluation step for the cost critics under the current greedy policy."""
        if not len(self.cost_tables):
            return
        s = self._state(obs)
        a = np.asarray(actions, dtype=np.int64)
        s2 = self._state(next_obs)
        q2 = self.table[s2]
        if next_masks is not None:
            q2 = np.where(next_masks, q2, -np.inf)
        a2 = q2.argmax(axis=1)
        flat = s * self.n_actions + a
        uniq, inv, counts = np.unique(flat, return_inverse=True, return_counts=True)
        step = self.lr / (1.0 + self.visits.reshape(-1)[uniq] / self.visit_scale)
        for i, tab in enumerate(self.cost_tables):
            y = costs[:, i] + gamma * np.where(terminal, 0.0, tab[s2, a2])
            q = tab.reshape(-1)
            q[uniq] += step * (np.bincount(inv, weights=y) / counts - q[uniq])

    def greedy_cost_values(self, start_weights: np.ndarray) -> np.ndarray:
        """Critic estimate of each cumulative cost of the greedy policy from the start distribution."""
        pol = self.greedy_policy()
        per_state = self.cost_tables[:, np.arange(len(pol)), pol]
        return per_state @ start_weights

    def greedy_policy(self) -> np.ndarray:
        return self.table.argmax(axis=1)

    def sync(self):
        pass


# -- replay -----------------------------------------------------------------------


@dataclass
class Transition:
    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    costs: CostSample
    next_mask: np.ndarray
    terminal: bool


class ReplayBuffer:
    """FIFO ring of transitions with uniform minibatch sampling.

    Next-state masks are interned: each distinct mask is stored once and
    transitions keep an index into that pool.
    """

    def __init__(self, capacity: int, layout: ConstraintLayout, rng: np.random.Generator):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.layout = layout
        self.rng = rng
        self.size = 0
        self.pos = 0
        self._arrays = None
        self._mask_pool: list[np.ndarray] = []
        self._mask_ids: dict[bytes, int] = {}

    def __len__(self) -> int:
        return self.size

    def _alloc(self, obs_dim: int):
        n, L = self.capacity, self.layout
        self._arrays = {
            "obs": np.zeros((n, obs_dim)),
            "action": np.zeros(n, dtype=np.int64),
            "reward": np.zeros(n),
            "next_obs": np.zeros((n, obs_dim)),
            "g": np.zeros((n, len(L.inst))),
            "e": np.zeros((n, len(L.eq))),
            "c": np.zeros((n, len(L.cum))),
            "mask_id": np.zeros(n, dtype=np.int64),
            "terminal": np.zeros(n, dtype=bool),
        }

    def _intern(self, mask: np.ndarray) -> int:
        key = np.packbits(mask).tobytes() + len(mask).to_bytes(4, "little")
        idx = self._mask_ids.get(key)
        if idx is None:
            idx = len(self._mask_pool)
            self._mask_pool.append(mask.copy())
            self._mask_ids[key] = idx
        return idx

    def add(self, tr: Transition):
        if self._arrays is None:
            self._alloc(len(tr.obs))
        mask = np.asarray(tr.next_mask, dtype=bool)
        if not tr.terminal and not mask.any():
            raise ValueError("non-terminal transition needs at least one safe next action")
        g, e, c = self.layout.to_arrays(tr.costs)
        a, i = self._arrays, self.pos
        a["obs"][i] = tr.obs
        a["action"][i] = tr.action
        a["reward"][i] = tr.reward
        a["next_obs"][i] = tr.next_obs
        a["g"][i] = g
        a["e"][i] = e
        a["c"][i] = c
        a["mask_id"][i] = self._intern(mask)
        a["terminal"][i] = tr.terminal
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def oldest_index(self) -> int:
        return self.pos if self.size == self.capacity else 0

    def sample(self, batch_size: int) -> dict:
        """Uniform draw without replacement; masks resolved to a bool matrix or None if all-true."""
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        k = min(batch_size, self.size)
        idx = self.rng.choice(self.size, size=k, replace=False)
        batch = {name: arr[idx] for name, arr in self._arrays.items()}
        ids = batch.pop("mask_id")
        uniq = np.unique(ids)
        if all(self._mask_pool[u].all() for u in uniq):
            batch["next_mask"] = None
        else:
            batch["next_mask"] = np.stack([self._mask_pool[u] for u in ids])
        batch["index"] = idx
        return batch


# -- core operations -----------------------------------------------------------------


def select_action(q, obs, mask, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy restricted to the safe set; greedy ties go to the lowest index."""
    mask = np.asarray(mask, dtype=bool)
    allowed = np.flatnonzero(mask)
    if allowed.size == 0:
        raise ValueError("action mask has no safe action")
    if rng.random() < epsilon:
        return int(allowed[rng.integers(allowed.size)])
    return int(q.greedy(obs, mask))


def augmented_target(batch: dict, q, duals: DualState, layout: ConstraintLayout, gamma: float,
                     penalties: bool = True) -> np.ndarray:
    """``r - phi_step + gamma * max_{a' safe} Q_target(s', a')``; no bootstrap on terminals."""
    boot = q.target_max(batch["next_obs"], batch["next_mask"])
    boot = np.where(batch["terminal"], 0.0, boot)
    y = batch["reward"] + gamma * boot
    if penalties:
        y = y - penalty_step_batch(batch["g"], batch["e"], batch["c"], duals, layout, gamma)
    bad = ~np.isfinite(y)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        row = {k: (v[i] if isinstance(v, np.ndarray) else v) for k, v in batch.items() if k != "next_mask"}
        log.error("non-finite augmented target for transition %s", row)
        raise nn.TrainingError(f"non-finite augmented target at buffer index {batch['index'][i]}")
    return y


def epsilon_at(episode: int, total: int, fraction: float = 0.8) -> float:
    """Linear decay from 1 to 0 over the first ``fraction`` of episodes."""
    span = fraction * total
    if span <= 0:
        return 0.0
    return max(0.0, 1.0 - episode / span)


@dataclass
class EpisodeReport:
    ret: float = 0.0
    steps: int = 0
    v_hat: dict = field(default_factory=dict)
    mean_gplus: dict = field(default_factory=dict)
    max_g: dict = field(default_factory=dict)
    mean_e: dict = field(default_factory=dict)
    mean_abs_e: dict = field(default_factory=dict)
    violations: int = 0
    violation_steps: dict = field(default_factory=dict)
    shield_overrides: int = 0
    loss_mean: float = math.nan
    aborted: bool = False
    extras: dict = field(default_factory=dict)


class _ReportBuilder:
    def __init__(self, layout: ConstraintLayout, gamma: float):
        self.layout = layout
        self.gamma = gamma
        self.report = EpisodeReport(
            v_hat={i: 0.0 for i in layout.cum},
            mean_gplus={k: 0.0 for k in layout.inst},
            max_g={k: -math.inf for k in layout.inst},
            mean_e={j: 0.0 for j in layout.eq},
            mean_abs_e={j: 0.0 for j in layout.eq},
            violation_steps={k: 0 for k in layout.inst + layout.eq},
        )
        self.disc = 1.0
        self.losses = []

    def add(self, reward: float, costs: CostSample, info: dict, tol: float):
        r = self.report
        r.ret += reward
        r.steps += 1
        for i in self.layout.cum:
            r.v_hat[i] += self.disc * costs.c[i]
        for k in self.layout.inst:
            gk = costs.g[k]
            r.mean_gplus[k] += max(0.0, gk)
            r.max_g[k] = max(r.max_g[k], gk)
        for j in self.layout.eq:
            r.mean_e[j] += costs.e[j]
            r.mean_abs_e[j] += abs(costs.e[j])
        hit = False
        for k in self.layout.inst:
            if costs.g[k] > tol:
                r.violation_steps[k] += 1
                hit = True
        for j in self.layout.eq:
            if abs(costs.e[j]) > tol:
                r.violation_steps[j] += 1
                hit = True
        r.violations += hit
        if info.get("overridden"):
            r.shield_overrides += 1
        self.disc *= self.gamma

    def finish(self) -> EpisodeReport:
        r = self.report
        n = max(r.steps, 1)
        for d in (r.mean_gplus, r.mean_e, r.mean_abs_e):
            for k in d:
                d[k] /= n
        if self.losses:
            r.loss_mean = float(np.mean(self.losses))
        return r


class SafeQAgent:
    def __init__(self, obs_dim: int, n_actions: int, specs: Sequence[ConstraintSpec],
                 cfg: AgentConfig, dual_cfg: DualConfig, rng: np.random.Generator,
                 penalties: bool = True, head=None):
        self.specs = validate_specs(specs)
        self.layout = ConstraintLayout.from_specs(self.specs)
        self.cfg = cfg
        self.dual_cfg = dual_cfg
        self.penalties = penalties
        self.rng = rng
        self.train_cfg = TrainingConfig(gamma=cfg.gamma, horizon=cfg.horizon,
                                        dual_period=dual_cfg.dual_period,
                                        scale_trigger=dual_cfg.scale_trigger,
                                        violation_tol=dual_cfg.violation_tol)
        self.duals = DualState.initial(
            self.specs, rho0=dual_cfg.rho0, xi=dual_cfg.xi, rho_max=dual_cfg.rho_max,
            beta_lambda=dual_cfg.beta_lambda, beta_mu=dual_cfg.beta_mu, beta_nu=dual_cfg.beta_nu)
        source = dual_cfg.vhat_source
        if source == "auto":
            source = "critic" if cfg.kind == "tabular" else "episode"
        self.vhat_source = source
        critic = source == "critic"
        if cfg.kind == "tabular":
            self.q = TabularQ(obs_dim, n_actions, cfg.tabular_lr, cfg.tabular_visit_scale,
                              len(self.layout.cum) if critic else 0)
        elif critic:
            raise ValueError("vhat_source 'critic' is only available for tabular agents")
        elif cfg.kind == "neural":
            head = head or FlatHead(n_actions)
            if head.n_actions != n_actions:
                raise ValueError(f"head covers {head.n_actions} actions, environment has {n_actions}")
            self.q = NeuralQ(obs_dim, head, cfg.hidden, cfg.lr, rng, cfg.grad_clip)
        else:
            raise ValueError(f"unknown agent kind {cfg.kind!r}")
        self.buffer = ReplayBuffer(cfg.buffer_capacity, self.layout, rng)
        self.env_steps = 0
        self.grad_steps = 0
        self.episodes = 0
        self._vhat_hist = deque(maxlen=max(1, dual_cfg.vhat_window))
        self._pending: list[EpisodeReport] = []
        self.start_counts = np.zeros(obs_dim)

    @property
    def n_actions(self) -> int:
        return self.q.n_actions

    def act(self, obs, mask, epsilon: float) -> int:
        return select_action(self.q, obs, mask, epsilon, self.rng)

    def begin_episode(self, obs):
        if self.vhat_source == "critic":
            self.start_counts[int(np.argmax(obs))] += 1

    def cost_estimate(self, report: EpisodeReport) -> dict:
        """V_hat per cumulative id used by the dual step."""
        if self.vhat_source == "episode" or self.start_counts.sum() == 0:
            return dict(report.v_hat)
        est = self.q.greedy_cost_values(self.start_counts / self.start_counts.sum())
        return {i: float(v) for i, v in zip(self.layout.cum, est)}

    def remember(self, tr: Transition):
        self.buffer.add(tr)
        self.env_steps += 1

    def learn(self) -> float | None:
        cfg = self.cfg
        starts = cfg.learning_starts if cfg.learning_starts is not None else cfg.batch_size
        if self.env_steps % cfg.update_every or len(self.buffer) < max(starts, 1):
            return None
        batch = self.buffer.sample(cfg.batch_size)
        y = augmented_target(batch, self.q, self.duals, self.layout, cfg.gamma, self.penalties)
        if self.vhat_source == "critic":
            self.q.update_costs(batch["obs"], batch["action"], batch["c"], batch["next_obs"],
                                batch["next_mask"], batch["terminal"], cfg.gamma)
        loss = self.q.update(batch["obs"], batch["action"], y)
        self.grad_steps += 1
        if self.grad_steps % cfg.target_update == 0:
            self.q.sync()
        return loss


def _merge_reports(reports: Sequence[EpisodeReport]) -> EpisodeReport:
    if len(reports) == 1:
        return reports[0]
    out = EpisodeReport()
    for name in ("v_hat", "mean_gplus", "mean_e", "mean_abs_e"):
        keys = getattr(reports[0], name)
        setattr(out, name, {k: float(np.mean([getattr(r, name)[k] for r in reports])) for k in keys})
    out.max_g = {k: max(r.max_g[k] for r in reports) for k in reports[0].max_g}
    return out


def end_of_episode(agent: SafeQAgent, report: EpisodeReport) -> None:
    """Slow-timescale update: projected dual ascent, then rho scaling for violated ids."""
    agent.episodes += 1
    if not agent.penalties:
        return
    agent._pending.append(report)
    if agent.episodes % agent.train_cfg.dual_period:
        return
    rep = _merge_reports(agent._pending)
    agent._pending = []
    agent._vhat_hist.append(agent.cost_estimate(rep))
    budgets = dict(zip(agent.layout.cum, agent.layout.budgets))
    vhat = {i: float(np.mean([h[i] for h in agent._vhat_hist])) for i in agent.layout.cum}
    excess = {i: vhat[i] - budgets[i] for i in agent.layout.cum}
    step_excess = excess
    if agent.dual_cfg.dual_rule == "on_violation":
        # multipliers only move for constraints that are currently violated
        step_excess = {i: max(0.0, v) for i, v in excess.items()}
    agent.duals = dual_ascent(agent.duals, step_excess, rep.mean_e, rep.mean_gplus)
    tol = agent.train_cfg.violation_tol
    violated = [i for i in agent.layout.cum if excess[i] > 0]
    violated += [j for j in agent.layout.eq if rep.mean_abs_e[j] > tol]
    if agent.train_cfg.scale_trigger == "any":
        violated += [k for k in agent.layout.inst if rep.max_g[k] > tol]
    else:
        violated += [k for k in agent.layout.inst if rep.mean_gplus[k] > tol]
    agent.duals = scale_penalties(agent.duals, violated)


def safe_action_mask(env, i: int) -> np.ndarray:
    """Env safe set for agent ``i``; an empty set falls back to the env's safe fallback action."""
    mask = np.asarray(env.action_mask(i), dtype=bool)
    if not mask.any():
        log.warning("agent %d: empty safe action set, enabling the fallback action", i)
        mask = mask.copy()
        mask[env.fallback_action(i)] = True
    return mask


def run_episode(agents: Sequence[SafeQAgent], env, epsilon: float, learn: bool = True,
                max_steps: int | None = None) -> list[EpisodeReport]:
    """Play one episode with all agents acting simultaneously on local observations."""
    n = env.n_agents
    if len(agents) != n:
        raise ValueError(f"environment has {n} agents, got {len(agents)} learners")
    horizon = max_steps or env.horizon
    builders = [_ReportBuilder(a.layout, a.cfg.gamma) for a in agents]
    obs = env.reset()
    for agent, o in zip(agents, obs):
        agent.begin_episode(o)
    masks = [safe_action_mask(env, i) for i in range(n)]
    try:
        for _ in range(horizon):
            actions = [agents[i].act(obs[i], masks[i], epsilon) for i in range(n)]
            for i, a in enumerate(actions):
                assert masks[i][a], "selected action outside the safe set"
            steps = env.step(actions)
            next_masks = [safe_action_mask(env, i) for i in range(n)]
            for i, (agent, st) in enumerate(zip(agents, steps)):
                builders[i].add(st.reward, st.costs, st.info, agent.dual_cfg.violation_tol)
                if learn:
                    agent.remember(Transition(obs[i], actions[i], st.reward, st.obs, st.costs,
                                              next_masks[i], st.terminal))
                    loss = agent.learn()
                    if loss is not None:
                        builders[i].losses.append(loss)
            obs = [st.obs for st in steps]
            masks = next_masks
            if any(st.done for st in steps):
                break
    except EnvFault as exc:
        log.warning("episode aborted: %s", exc)
        for b in builders:
            b.report.aborted = True
    reports = [b.finish() for b in builders]
    for i, r in enumerate(reports):
        r.extras = env.episode_metrics(i)
    return reports


def train_episode(agent: SafeQAgent, env, epsilon: float) -> EpisodeReport:
    return run_episode([agent], env, epsilon)[0]


def metrics_row(episode: int, agent_id: int, agent: SafeQAgent, report: EpisodeReport,
                epsilon: float) -> dict:
    row = {"episode": episode, "agent": agent_id, "return": report.ret}
    for i in agent.layout.cum:
        row[f"v_hat_{i}"] = report.v_hat[i]
    for k in agent.layout.inst:
        row[f"mean_gplus_{k}"] = report.mean_gplus[k]
    for j in agent.layout.eq:
        row[f"mean_abs_e_{j}"] = report.mean_abs_e[j]
    for i in agent.layout.cum:
        row[f"lambda_{i}"] = agent.duals.lam[i]
    for k in agent.layout.inst:
        row[f"nu_{k}"] = agent.duals.nu[k]
    for j in agent.layout.eq:
        row[f"mu_{j}"] = agent.duals.mu[j]
    for cid, rho in list(agent.duals.rho_inst.items()) + list(agent.duals.rho_eq.items()):
        row[f"rho_{cid}"] = rho
    row.update({
        "violations": report.violations,
        "shield_overrides": report.shield_overrides,
        "epsilon": epsilon,
        "loss_mean": report.loss_mean,
    })
    row.update(report.extras)
    return row


@dataclass
class RunArtifacts:
    agents: list
    rows: list = field(default_factory=list)
    reports: list = field(default_factory=list)


def build_agents(env, cfg: AgentConfig, dual_cfg: DualConfig, seed: int, penalties: bool = True,
                 head_factory: Callable | None = None) -> list[SafeQAgent]:
    seqs = np.random.SeedSequence(seed).spawn(env.n_agents)
    agents = []
    for s in seqs:
        head = head_factory() if head_factory else None
        agents.append(SafeQAgent(env.obs_dim, env.n_actions, env.constraints, cfg, dual_cfg,
                                 np.random.default_rng(s), penalties=penalties, head=head))
    return agents


def run_training(env, cfg: AgentConfig, dual_cfg: DualConfig, episodes: int, seed: int = 0,
                 mode: str = "single", penalties: bool = True, on_episode: Callable | None = None,
                 head_factory: Callable | None = None, agents=None) -> RunArtifacts:
    """Train for ``episodes`` episodes; ``on_episode(rows)`` receives each episode's metric rows."""
    if mode == "single" and env.n_agents != 1:
        raise ValueError(f"single mode needs a one-agent environment, got {env.n_agents} agents")
    if mode not in ("single", "multi"):
        raise ValueError(f"unknown mode {mode!r}")
    if agents is None:
        agents = build_agents(env, cfg, dual_cfg, seed, penalties, head_factory)
    art = RunArtifacts(agents)
    for ep in range(episodes):
        eps = epsilon_at(ep, episodes, cfg.eps_fraction)
        reports = run_episode(agents, env, eps)
        rows = []
        for i, (agent, rep) in enumerate(zip(agents, reports)):
            end_of_episode(agent, rep)
            rows.append(metrics_row(ep, i, agent, rep, eps))
        art.rows.extend(rows)
        art.reports.append(reports)
        if on_episode is not None:
            on_episode(rows)
    return art


def evaluate(agents: Sequence[SafeQAgent], env, episodes: int) -> list[list[EpisodeReport]]:
    """Greedy roll-outs with learning and dual updates switched off."""
    return [run_episode(agents, env, 0.0, learn=False) for _ in range(episodes)]


def stage2_grid_refine(q, obs, choice, candidates, encode: Callable, feasible: Callable, fallback: int) -> int:
    """Best feasible grid point for a fixed discrete choice, as an encoded action index."""
    if len(candidates) == 0:
        raise ValueError("empty candidate grid")
    values = q.values(obs)
    best, best_val = None, -math.inf
    for y in candidates:
        if not feasible(choice, y):
            continue
        a = encode(choice, y)
        if values[a] > best_val:
            best, best_val = a, values[a]
    return fallback if best is None else best


# -- checkpoints ---------------------------------------------------------------------


def checkpoint_paths(directory: str, index: int) -> tuple[str, str]:
    return (os.path.join(directory, f"agent_{index}.ckpt"),
            os.path.join(directory, f"agent_{index}.duals.json"))


def save_checkpoint(agent: SafeQAgent, directory: str, index: int):
    """Network (or Q-table) plus duals, one file pair per agent."""
    model_path, duals_path = checkpoint_paths(directory, index)
    if isinstance(agent.q, NeuralQ):
        payload = nn.serialize(agent.q.net)
    else:
        buf = io.BytesIO()
        np.savez(buf, table=agent.q.table, visits=agent.q.visits, cost_tables=agent.q.cost_tables)
        payload = buf.getvalue()
    with open(model_path, "wb") as fh:
        fh.write(payload)
    with open(duals_path, "w") as fh:
        json.dump(agent.duals.as_dict(), fh, indent=2, sort_keys=True)


def load_checkpoint(agent: SafeQAgent, directory: str, index: int):
    model_path, duals_path = checkpoint_paths(directory, index)
    with open(model_path, "rb") as fh:
        payload = fh.read()
    if isinstance(agent.q, NeuralQ):
        net = nn.deserialize(payload)
        want = agent.q.net.layer_dims
        if net.layer_dims != want:
            raise nn.CheckpointError(f"{model_path}: network shape {net.layer_dims} does not match "
                                     f"the configured {want} (observation size / action-space size)")
        agent.q.net = net
        agent.q.target = nn.sync_target(net)
    else:
        data = np.load(io.BytesIO(payload))
        if data["table"].shape != agent.q.table.shape:
            raise nn.CheckpointError(f"{model_path}: Q-table shape {data['table'].shape} does not match "
                                     f"the configured {agent.q.table.shape}")
        agent.q.table = data["table"].copy()
        agent.q.visits = data["visits"].copy()
        if data["cost_tables"].shape == agent.q.cost_tables.shape:
            agent.q.cost_tables = data["cost_tables"].copy()
    if os.path.exists(duals_path):
        with open(duals_path) as fh:
            d = json.load(fh)
        for attr, key in (("lam", "lambda"), ("mu", "mu"), ("nu", "nu"),
                          ("rho_eq", "rho_eq"), ("rho_inst", "rho_inst")):
            target = getattr(agent.duals, attr)
            target.update({k: float(v) for k, v in d.get(key, {}).items() if k in target})
