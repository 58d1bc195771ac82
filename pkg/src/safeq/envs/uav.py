"""Multi-UAV spectrum-sharing environment with a collision/energy safety shield.

Each UAV flies in a horizontal plane at fixed altitude, broadcasts a DAA
message to its peers (U2U) and uploads data to a ground gNB (U2R) on a
different subchannel. Moves happen once per ``slow_interval`` fast steps;
power and subchannel choices happen every fast step.

Flat action layout (least significant first)::

    a = mobility + 5 * (u2u_power + Zp * (u2u_sub + B * (u2r_power + Zp * u2r_slot)))

``u2r_slot`` indexes the B - 1 subchannels other than ``u2u_sub`` in
ascending order, so U2U and U2R never share a subchannel.

Observation layout for K visible peers (K = knn_k, or N_u - 1 when 0)::

    [0:B)            U2R gain per subchannel, (dB + 80) / 20
    [B:B+K)          best U2U gain towards each of the K nearest peers, same scale
    B+K              residual energy E / E0
    B+K+1, B+K+2     own position, x / width and y / height
    [B+K+3:B+2K+3)   distance to the K nearest peers / arena diagonal (frozen per slow interval)
    B+2K+3           1.0 on slow (mobility) steps, else 0.0
    B+2K+4           t / horizon
"""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from ..lagrangian import ConfigError, ConstraintKind, ConstraintSpec, CostSample
from .base import EnvStep

log = logging.getLogger(__name__)


def dbm_to_watts(dbm):
    return 10.0 ** (np.asarray(dbm, dtype=float) / 10.0) / 1000.0


class Mobility(enum.IntEnum):
    FORWARD = 0
    BACKWARD = 1
    LEFT = 2
    RIGHT = 3
    HOVER = 4


MOVES = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0], [0.0, 0.0]])


@dataclass
class UavConfig:
    n_u: int = 5
    B: int = 5
    W_b: float = 1e6
    sigma2: float = float(dbm_to_watts(-104.0))
    power_levels: tuple = (5.0, 10.0, 15.0, 23.0)  # dBm
    d_min: float = 30.0
    E0: float = 0.0833
    E_min: float = 0.04165
    eps_o: float = 1e-4
    delta_t: float = 1e-3
    slow_interval: int = 20
    D: float = 1000.0
    eta_min: float = 1.0
    arena: tuple = (200.0, 200.0)
    altitude: float = 100.0
    rician_K: float = 10.0  # dB
    pathloss_exponent: float = 2.2
    ref_loss: float = -40.0  # dB at 1 m
    knn_k: int = 0
    horizon: int = 100
    shield: bool = True
    gnb: tuple | None = None  # ground position, arena centre when None
    energy_budget: float | None = None  # discounted spend budget / E0; adds a cumulative constraint

    def __post_init__(self):
        self.power_levels = tuple(float(p) for p in self.power_levels)
        self.arena = tuple(float(a) for a in self.arena)
        if self.n_u < 2:
            raise ConfigError("n_u must be >= 2")
        if self.B < 2:
            raise ConfigError("B must be >= 2 so U2U and U2R can use different subchannels")
        if self.d_min <= 0:
            raise ConfigError("d_min must be positive")
        if not self.E_min < self.E0:
            raise ConfigError("E_min must be below E0")
        if len(self.power_levels) < 1 or any(b <= a for a, b in zip(self.power_levels, self.power_levels[1:])):
            raise ConfigError("power_levels must be strictly increasing")
        if not 0 <= self.knn_k <= self.n_u - 1:
            raise ConfigError(f"knn_k must lie in [0, {self.n_u - 1}]")
        if self.slow_interval < 1 or self.horizon < 1:
            raise ConfigError("slow_interval and horizon must be >= 1")
        if self.energy_budget is not None and self.energy_budget <= 0:
            raise ConfigError("energy_budget must be positive when set")
        if self.sigma2 <= 0 or self.W_b <= 0 or self.delta_t <= 0:
            raise ConfigError("sigma2, W_b and delta_t must be positive")

    @property
    def n_power(self) -> int:
        return len(self.power_levels)

    @property
    def n_actions(self) -> int:
        return 5 * self.n_power * self.B * self.n_power * (self.B - 1)

    @property
    def k_visible(self) -> int:
        return self.knn_k or self.n_u - 1

    @property
    def obs_dim(self) -> int:
        return self.B + 2 * self.k_visible + 5

    @property
    def gnb_position(self) -> np.ndarray:
        if self.gnb is None:
            return np.array([self.arena[0] / 2, self.arena[1] / 2, 0.0])
        return np.asarray(self.gnb, dtype=float)

    @property
    def max_step_spend(self) -> float:
        return self.eps_o + 2 * float(dbm_to_watts(self.power_levels[-1])) * self.delta_t


@dataclass(frozen=True)
class UavAction:
    mobility: Mobility
    u2u: tuple  # (power index, subchannel)
    u2r: tuple  # (power index, subchannel)

    def __post_init__(self):
        if self.u2u[1] == self.u2r[1]:
            raise ValueError("U2U and U2R must use different subchannels")


def encode_action(act: UavAction, cfg: UavConfig) -> int:
    Zp, B = cfg.n_power, cfg.B
    (pu, bu), (pr, br) = act.u2u, act.u2r
    if not (0 <= pu < Zp and 0 <= pr < Zp and 0 <= bu < B and 0 <= br < B):
        raise ValueError(f"action component out of range: {act}")
    slot = br if br < bu else br - 1
    return int(act.mobility) + 5 * (pu + Zp * (bu + B * (pr + Zp * slot)))


def decode_action(a: int, cfg: UavConfig) -> UavAction:
    if not 0 <= a < cfg.n_actions:
        raise ValueError(f"action {a} outside [0, {cfg.n_actions})")
    Zp, B = cfg.n_power, cfg.B
    mob, a = a % 5, a // 5
    pu, a = a % Zp, a // Zp
    bu, a = a % B, a // B
    pr, slot = a % Zp, a // Zp
    br = slot if slot < bu else slot + 1
    return UavAction(Mobility(mob), (pu, bu), (pr, br))


# -- radio model -------------------------------------------------------------------


def rician_fading(K_db: float, size, rng: np.random.Generator) -> np.ndarray:
    """Unit-power Rician small-scale fading with random LoS phase."""
    K = 10.0 ** (K_db / 10.0)
    los = np.exp(1j * rng.uniform(0.0, 2 * np.pi, size=size))
    nlos = (rng.standard_normal(size) + 1j * rng.standard_normal(size)) / np.sqrt(2.0)
    return np.sqrt(K / (K + 1)) * los + np.sqrt(1 / (K + 1)) * nlos


def path_gain(dist, cfg: UavConfig) -> np.ndarray:
    """Large-scale power gain nu^2 = ref_loss * d^-alpha."""
    return 10.0 ** (cfg.ref_loss / 10.0) * np.asarray(dist, dtype=float) ** (-cfg.pathloss_exponent)


class _FloorCounter:
    hits = 0


def _floored(dist):
    d = np.asarray(dist, dtype=float)
    low = d < 1.0
    if low.any():
        _FloorCounter.hits += int(low.sum())
        log.warning("link distance below 1 m floored (%d links)", int(low.sum()))
        d = np.maximum(d, 1.0)
    return d


def sample_channel(tx_pos, rx_pos, cfg: UavConfig, rng: np.random.Generator) -> np.ndarray:
    """Complex gain per subchannel for one link: nu * f, with |nu|^2 the path gain."""
    dist = _floored(np.linalg.norm(np.asarray(tx_pos, float) - np.asarray(rx_pos, float)))
    return np.sqrt(path_gain(dist, cfg)) * rician_fading(cfg.rician_K, cfg.B, rng)


def sinr(gain, power, interference, sigma2):
    """|h|^2 P / (sigma^2 + I); ``gain`` is the power gain |h|^2."""
    return gain * power / (sigma2 + interference)


def rate(sinr_value, W_b):
    return W_b * np.log2(1.0 + sinr_value)


# -- environment -------------------------------------------------------------------


@dataclass
class UavWorldState:
    positions: np.ndarray  # (N, 3)
    energies: np.ndarray  # (N,)
    u2u_gain: np.ndarray = field(default_factory=lambda: np.zeros(0))  # |h|^2, (N tx, N rx, B)
    u2r_gain: np.ndarray = field(default_factory=lambda: np.zeros(0))  # |h|^2, (N, B)
    u2u_fade: np.ndarray = field(default_factory=lambda: np.zeros(0))  # |f|^2
    u2r_fade: np.ndarray = field(default_factory=lambda: np.zeros(0))
    t: int = 0


class UavEnv:
    name = "uav"

    def __init__(self, cfg: UavConfig | None = None, seed: int = 0, record_trajectory: bool = False):
        self.cfg = cfg or UavConfig()
        self.rng = np.random.default_rng(seed)
        self.n_agents = self.cfg.n_u
        self.n_actions = self.cfg.n_actions
        # digit radices of the flat action index, least significant first
        self.action_radices = (5, self.cfg.n_power, self.cfg.B, self.cfg.n_power, self.cfg.B - 1)
        self.obs_dim = self.cfg.obs_dim
        self.horizon = self.cfg.horizon
        self.shield_enabled = self.cfg.shield
        self.constraints = [
            ConstraintSpec("reliability", ConstraintKind.INSTANT, description="eta_min - own DAA delivery"),
            ConstraintSpec("energy", ConstraintKind.INSTANT, description="(E_min - E) / E0"),
            ConstraintSpec("collision", ConstraintKind.INSTANT, description="(d_min - min distance) / d_min"),
        ]
        if self.cfg.energy_budget is not None:
            self.constraints.append(ConstraintSpec("energy_spend", ConstraintKind.CUMULATIVE,
                                                   self.cfg.energy_budget, "per-step spend / E0"))
        self._powers_w = dbm_to_watts(self.cfg.power_levels)
        self.record_trajectory = record_trajectory
        self.trajectory: list[dict] = []
        self.state: UavWorldState | None = None
        self.clamp_events = 0
        self._decoded = {}

    # helpers

    def _decode(self, a: int) -> UavAction:
        act = self._decoded.get(a)
        if act is None:
            act = self._decoded[a] = decode_action(a, self.cfg)
        return act

    def _pairwise(self, pos2d: np.ndarray) -> np.ndarray:
        diff = pos2d[:, None, :] - pos2d[None, :, :]
        d = np.sqrt((diff ** 2).sum(-1))
        np.fill_diagonal(d, np.inf)
        return d

    def is_slow_step(self, t: int | None = None) -> bool:
        t = self.state.t if t is None else t
        return t % self.cfg.slow_interval == 0

    def _in_arena(self, xy) -> np.ndarray:
        xy = np.atleast_2d(xy)
        w, h = self.cfg.arena
        return (xy[:, 0] >= 0) & (xy[:, 0] <= w) & (xy[:, 1] >= 0) & (xy[:, 1] <= h)

    def _sample_channels(self):
        """New block-fading draw for every link and subchannel."""
        cfg, st = self.cfg, self.state
        n = cfg.n_u
        st.u2u_fade = np.abs(rician_fading(cfg.rician_K, (n, n, cfg.B), self.rng)) ** 2
        st.u2r_fade = np.abs(rician_fading(cfg.rician_K, (n, cfg.B), self.rng)) ** 2
        self._apply_path_loss()

    def _apply_path_loss(self):
        cfg, st = self.cfg, self.state
        n = cfg.n_u
        d = np.linalg.norm(st.positions[:, None, :] - st.positions[None, :, :], axis=-1)
        d = _floored(d + np.eye(n) * 1e3)  # self-links are never used
        st.u2u_gain = path_gain(d, cfg)[:, :, None] * st.u2u_fade
        dg = _floored(np.linalg.norm(st.positions - cfg.gnb_position, axis=1))
        st.u2r_gain = path_gain(dg, cfg)[:, None] * st.u2r_fade

    def _refresh_distances(self):
        d = self._pairwise(self.state.positions[:, :2])
        k = self.cfg.k_visible
        self._knn = np.argsort(d, axis=1, kind="stable")[:, :k]
        self._knn_dist = np.take_along_axis(d, self._knn, axis=1)

    # public API

    def reset(self, seed=None):
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        cfg = self.cfg
        w, h = cfg.arena
        for _ in range(1000):
            xy = self.rng.uniform([0, 0], [w, h], size=(cfg.n_u, 2))
            if self._pairwise(xy).min() >= 2 * cfg.d_min:
                break
        else:
            raise ConfigError(f"could not place {cfg.n_u} UAVs {2 * cfg.d_min} m apart in a "
                              f"{w} x {h} m arena after 1000 tries; arena too small")
        pos = np.column_stack([xy, np.full(cfg.n_u, cfg.altitude)])
        self.state = UavWorldState(pos, np.full(cfg.n_u, cfg.E0))
        self._sample_channels()
        self._refresh_distances()
        self.trajectory = []
        self._ep = {
            "collisions": np.zeros(cfg.n_u, dtype=np.int64),
            "reliability_failures": np.zeros(cfg.n_u, dtype=np.int64),
            "min_dist": np.full(cfg.n_u, np.inf),
            "u2r_rate": np.zeros(cfg.n_u),
            "steps": 0,
        }
        return [self.observe(i) for i in range(cfg.n_u)]

    def observe(self, i: int) -> np.ndarray:
        cfg, st = self.cfg, self.state
        to_db = lambda g: (10.0 * np.log10(np.maximum(g, 1e-30)) + 80.0) / 20.0  # noqa: E731
        peers = self._knn[i]
        diag = float(np.hypot(*cfg.arena))
        return np.concatenate([
            to_db(st.u2r_gain[i]),
            to_db(st.u2u_gain[i, peers].max(axis=1)),
            [st.energies[i] / cfg.E0],
            st.positions[i, :2] / np.array(cfg.arena),
            self._knn_dist[i] / diag,
            [1.0 if self.is_slow_step() else 0.0],
            [st.t / cfg.horizon],
        ])

    def action_mask(self, i: int) -> np.ndarray:
        """Hover-only mobility on fast steps; on slow steps, moves that stay in the arena and
        keep d_min from every peer's current position. Hover is always allowed."""
        allowed_mob = np.zeros(5, dtype=bool)
        if self.is_slow_step():
            xy = self.state.positions[:, :2]
            nxt = xy[i] + MOVES
            peers = np.delete(xy, i, axis=0)
            d = np.linalg.norm(nxt[:, None, :] - peers[None, :, :], axis=-1).min(axis=1)
            allowed_mob = self._in_arena(nxt) & (d >= self.cfg.d_min)
        allowed_mob[Mobility.HOVER] = True
        return np.tile(allowed_mob, self.n_actions // 5)

    def fallback_action(self, i: int = 0, intended: int | None = None) -> int:
        """Hover at the lowest power level, keeping the intended subchannels if given."""
        if intended is None:
            return encode_action(UavAction(Mobility.HOVER, (0, 0), (0, 1)), self.cfg)
        act = self._decode(intended)
        return encode_action(UavAction(Mobility.HOVER, (0, act.u2u[1]), (0, act.u2r[1])), self.cfg)

    def shield(self, intended) -> tuple[list[int], list[bool]]:
        """Joint override: hover + lowest power for any UAV whose move is unsafe or whose battery is low.

        Moves are checked against every other UAV's post-move position; the
        check repeats until no new override is needed, so the final joint
        action keeps all pairs at least d_min apart if they started that way.
        """
        cfg, st = self.cfg, self.state
        acts = [self._decode(a) for a in intended]
        override = np.array([st.energies[i] <= cfg.E_min + cfg.max_step_spend for i in range(cfg.n_u)])
        moves = np.array([MOVES[a.mobility] if self.is_slow_step() else MOVES[Mobility.HOVER] for a in acts])
        cur = st.positions[:, :2]
        while True:
            nxt = cur + np.where(override[:, None], 0.0, moves)
            d = self._pairwise(nxt)
            bad = ((d < cfg.d_min).any(axis=1) | ~self._in_arena(nxt)) & ~override
            bad &= np.abs(moves).sum(axis=1) > 0
            if not bad.any():
                break
            override |= bad
        executed = [self.fallback_action(i, a) if override[i] else a for i, a in enumerate(intended)]
        return executed, override.tolist()

    def step(self, actions) -> list[EnvStep]:
        cfg, st = self.cfg, self.state
        n = cfg.n_u
        if len(actions) != n:
            raise ValueError(f"expected {n} actions, got {len(actions)}")
        if (st.energies <= 0).any():
            raise ValueError("step called with a depleted UAV; reset first")
        if self.shield_enabled:
            executed, overridden = self.shield(actions)
        else:
            executed, overridden = list(actions), [False] * n
        acts = [self._decode(int(a)) for a in executed]
        slow = self.is_slow_step()

        if slow:
            self._step_slow([a.mobility for a in acts])
            self._apply_path_loss()  # keep the observed fading, update geometry

        # per-agent transmit powers on each subchannel
        p_u = np.array([self._powers_w[a.u2u[0]] for a in acts])
        p_r = np.array([self._powers_w[a.u2r[0]] for a in acts])
        b_u = np.array([a.u2u[1] for a in acts])
        b_r = np.array([a.u2r[1] for a in acts])
        ptx = np.zeros((n, cfg.B))
        ptx[np.arange(n), b_u] += p_u
        ptx[np.arange(n), b_r] += p_r

        # received power at every UAV (and the gNB) per subchannel, from all other UAVs
        rx = np.einsum("kb,kmb->mb", ptx, st.u2u_gain * (1 - np.eye(n))[:, :, None])
        rx_gnb = (ptx * st.u2r_gain).sum(axis=0)

        u2u_ok = np.zeros(n, dtype=bool)
        worst_bits = np.zeros(n)
        for i in range(n):
            b = b_u[i]
            sig = st.u2u_gain[i, :, b] * p_u[i]
            interf = rx[:, b] - sig
            s = sinr(st.u2u_gain[i, :, b], p_u[i], interf, cfg.sigma2)
            bits = rate(np.delete(s, i), cfg.W_b) * cfg.delta_t
            worst_bits[i] = bits.min()
            u2u_ok[i] = worst_bits[i] >= cfg.D
        sig_r = st.u2r_gain[np.arange(n), b_r] * p_r
        u2r_sinr = sinr(st.u2r_gain[np.arange(n), b_r], p_r, rx_gnb[b_r] - sig_r, cfg.sigma2)
        u2r_rate = rate(u2r_sinr, cfg.W_b)

        spend = cfg.eps_o + (p_u + p_r) * cfg.delta_t
        before = st.energies.copy()
        st.energies = before - spend
        st.t += 1

        dist = self._pairwise(st.positions[:, :2])
        min_dist = dist.min(axis=1)
        depleted = st.energies <= 0
        truncated = st.t >= cfg.horizon

        ep = self._ep
        ep["collisions"] += min_dist < cfg.d_min
        ep["reliability_failures"] += ~u2u_ok
        ep["min_dist"] = np.minimum(ep["min_dist"], min_dist)
        ep["u2r_rate"] += u2r_rate
        ep["steps"] += 1

        if slow:
            self._refresh_distances()
        self._sample_channels()

        out = []
        for i in range(n):
            costs = CostSample(g={
                "reliability": cfg.eta_min - float(u2u_ok[i]),
                "energy": float((cfg.E_min - st.energies[i]) / cfg.E0),
                "collision": float((cfg.d_min - min_dist[i]) / cfg.d_min),
            }, c={"energy_spend": float(spend[i] / cfg.E0)} if cfg.energy_budget is not None else {})
            info = {
                "overridden": overridden[i],
                "executed_action": int(executed[i]),
                "intended_action": int(actions[i]),
                "slow": slow,
                "energy_before": float(before[i]),
                "energy": float(st.energies[i]),
                "spend": float(spend[i]),
                "tx_power_w": (float(p_u[i]), float(p_r[i])),
                "u2u_ok": bool(u2u_ok[i]),
                "u2u_worst_bits": float(worst_bits[i]),
                "u2r_rate": float(u2r_rate[i]),
                "min_dist": float(min_dist[i]),
                "failure": bool(depleted[i]),
            }
            out.append(EnvStep(self.observe(i), float(u2r_rate[i]) / 1e6, costs,
                               terminal=bool(depleted.any()), truncated=truncated, info=info))
            if self.record_trajectory:
                x, y = st.positions[i, :2]
                self.trajectory.append({
                    "step": st.t, "agent": i, "x": x, "y": y, "energy": st.energies[i],
                    "min_dist": min_dist[i], "u2u_ok": int(u2u_ok[i]), "u2r_rate": u2r_rate[i],
                    "overridden": int(overridden[i]),
                })
        return out

    def _step_slow(self, mobility):
        cfg, st = self.cfg, self.state
        xy = st.positions[:, :2] + MOVES[np.asarray(mobility, dtype=int)]
        w, h = cfg.arena
        clamped = np.clip(xy, [0, 0], [w, h])
        hits = int((clamped != xy).any(axis=1).sum())
        if hits:
            self.clamp_events += hits
            log.info("%d UAV position(s) clamped to the arena", hits)
        st.positions[:, :2] = clamped

    def collision_cost(self) -> np.ndarray:
        """d_min - min pairwise distance per UAV, in metres."""
        return self.cfg.d_min - self._pairwise(self.state.positions[:, :2]).min(axis=1)

    def episode_metrics(self, i: int) -> dict:
        ep = self._ep
        steps = max(ep["steps"], 1)
        return {
            "collisions": int(ep["collisions"][i]),
            "reliability_failures": int(ep["reliability_failures"][i]),
            "min_distance": float(ep["min_dist"][i]),
            "mean_u2r_mbps": float(ep["u2r_rate"][i] / steps / 1e6),
            "energy_final": float(self.state.energies[i]),
        }

    def write_trajectory(self, path):
        fields = ["step", "agent", "x", "y", "energy", "min_dist", "u2u_ok", "u2r_rate", "overridden"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(self.trajectory)
