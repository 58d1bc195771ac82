"""RIS-assisted multi-user downlink with discrete powers and a block-wise DFT phase codebook.

The EBS (M_t antennas) reaches M_u users only through the RIS (M_r passive
elements on a rows x cols planar grid). One integer action picks a power
level per user and a codebook phase per RIS block::

    a = p_0 + Zp * (p_1 + ... + Zp * (phase_block_0 + 8 * (phase_block_1 + ...)))

with user powers in the least-significant digits and blocks in row-major
order. The reward is the negative total transmit power; each user carries an
instantaneous SINR constraint.

Channels use relative (unit-mean) gains, so ``sigma2`` sets the operating SNR.
G is stored as an M_r x M_t matrix so that ``h^H diag(theta) G`` is a
1 x M_t row directly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..lagrangian import ConfigError, ConstraintKind, ConstraintSpec, CostSample
from .base import EnvStep

log = logging.getLogger(__name__)

UNIT_MODULUS_SNAP = 1e-12


def _default_powers():
    return tuple(float(p) for p in np.linspace(0.0, 21.0, 8))


@dataclass
class RisConfig:
    M_t: int = 8
    M_r: int = 64
    M_u: int = 4
    ris_shape: tuple | None = None  # (rows, cols), square when None
    blocks: tuple = (2, 2)  # (bx, bz): block rows x block cols
    codebook_size: int = 8
    power_levels: tuple = _default_powers()  # dBm
    Gamma: float = 10.0  # dB
    sigma2: float = 5e-4  # W, relative to unit-mean channel gains
    rician_K: float = 10.0  # dB
    clusters: int = 5
    precoder: str = "mrt"  # "mrt" or "zf"
    horizon: int = 1
    freeze_channels: bool = False
    reward_scale: float = 1.0  # reward = -reward_scale * sum(p) with p in watts
    bandwidth_hz: float = 100e6  # metadata only
    carrier_hz: float = 28e9  # metadata only

    def __post_init__(self):
        self.power_levels = tuple(float(p) for p in self.power_levels)
        self.blocks = tuple(int(b) for b in self.blocks)
        if self.ris_shape is None:
            side = int(round(np.sqrt(self.M_r)))
            self.ris_shape = (side, side) if side * side == self.M_r else (self.M_r, 1)
        self.ris_shape = tuple(int(s) for s in self.ris_shape)
        if min(self.M_t, self.M_r, self.M_u) < 1:
            raise ConfigError("M_t, M_r and M_u must be positive")
        rows, cols = self.ris_shape
        if rows * cols != self.M_r:
            raise ConfigError(f"ris_shape {self.ris_shape} does not hold {self.M_r} elements")
        bx, bz = self.blocks
        if bx < 1 or bz < 1 or rows % bx or cols % bz:
            raise ConfigError(f"blocks {self.blocks} do not tile a {rows} x {cols} RIS")
        if self.codebook_size < 2:
            raise ConfigError("codebook_size must be >= 2")
        if any(b <= a for a, b in zip(self.power_levels, self.power_levels[1:])) or not self.power_levels:
            raise ConfigError("power_levels must be strictly increasing")
        if self.reward_scale <= 0:
            raise ConfigError("reward_scale must be positive")
        if self.sigma2 <= 0 or self.clusters < 1 or self.horizon < 1:
            raise ConfigError("sigma2, clusters and horizon must be positive")
        if self.precoder not in ("mrt", "zf"):
            raise ConfigError(f"precoder must be 'mrt' or 'zf', got {self.precoder!r}")
        if self.precoder == "zf" and self.M_u > self.M_t:
            raise ConfigError("zero-forcing needs M_u <= M_t")
        self.gamma_linear = 10.0 ** (self.Gamma / 10.0)

    @property
    def n_blocks(self) -> int:
        return self.blocks[0] * self.blocks[1]

    @property
    def n_power(self) -> int:
        return len(self.power_levels)

    @property
    def radices(self) -> tuple:
        return (self.n_power,) * self.M_u + (self.codebook_size,) * self.n_blocks

    @property
    def n_actions(self) -> int:
        return self.n_power ** self.M_u * self.codebook_size ** self.n_blocks

    def block_of_element(self) -> np.ndarray:
        """Row-major block index for every RIS element (elements also row-major)."""
        rows, cols = self.ris_shape
        bx, bz = self.blocks
        r = np.arange(rows)[:, None] // (rows // bx)
        c = np.arange(cols)[None, :] // (cols // bz)
        return (r * bz + c).reshape(-1)


@dataclass(frozen=True)
class RisAction:
    powers: tuple  # level index per user
    phases: tuple  # codebook index per block


@dataclass
class RisChannels:
    G: np.ndarray  # (M_r, M_t)
    h_r: np.ndarray  # (M_u, M_r)

    def __post_init__(self):
        if not (np.isfinite(self.G).all() and np.isfinite(self.h_r).all()):
            raise ValueError("non-finite channel entries")


def decode_action(a: int, cfg: RisConfig) -> RisAction:
    if not 0 <= a < cfg.n_actions:
        raise ValueError(f"action {a} outside [0, {cfg.n_actions})")
    digits = []
    for r in cfg.radices:
        digits.append(a % r)
        a //= r
    return RisAction(tuple(digits[:cfg.M_u]), tuple(digits[cfg.M_u:]))


def encode_action(act: RisAction, cfg: RisConfig) -> int:
    digits = list(act.powers) + list(act.phases)
    if len(digits) != len(cfg.radices):
        raise ValueError("wrong number of action digits")
    a, place = 0, 1
    for d, r in zip(digits, cfg.radices):
        if not 0 <= d < r:
            raise ValueError(f"digit {d} outside [0, {r})")
        a += d * place
        place *= r
    return a


def build_theta(phase_idx, cfg: RisConfig) -> np.ndarray:
    """Unit-modulus RIS coefficients; every element copies its block's codebook phase."""
    idx = np.asarray(phase_idx, dtype=np.int64)
    if idx.shape != (cfg.n_blocks,) or (idx < 0).any() or (idx >= cfg.codebook_size).any():
        raise ValueError(f"need {cfg.n_blocks} phase indices in [0, {cfg.codebook_size})")
    z = np.exp(2j * np.pi * idx / cfg.codebook_size)
    z = z / np.abs(z)
    return z[cfg.block_of_element()]


def _ula(angle: float, n: int) -> np.ndarray:
    return np.exp(1j * np.pi * np.arange(n) * np.sin(angle))


def _upa(az: float, el: float, shape) -> np.ndarray:
    rows, cols = shape
    vr = np.exp(1j * np.pi * np.arange(rows) * np.sin(el))
    vc = np.exp(1j * np.pi * np.arange(cols) * np.sin(az) * np.cos(el))
    return np.kron(vr, vc)


def _cn(rng, size, var=1.0):
    return np.sqrt(var / 2) * (rng.standard_normal(size) + 1j * rng.standard_normal(size))


def sample_channels(cfg: RisConfig, rng: np.random.Generator) -> RisChannels:
    """Geometric multi-cluster G and Rician RIS-to-user links, unit mean power per entry."""
    G = np.zeros((cfg.M_r, cfg.M_t), dtype=complex)
    half = np.pi / 2
    for _ in range(cfg.clusters):
        gain = _cn(rng, None, 1.0 / cfg.clusters)
        a_r = _upa(rng.uniform(-half, half), rng.uniform(-half, half), cfg.ris_shape)
        a_t = _ula(rng.uniform(-half, half), cfg.M_t)
        G += gain * np.outer(a_r, a_t.conj())
    K = 10.0 ** (cfg.rician_K / 10.0)
    h = np.empty((cfg.M_u, cfg.M_r), dtype=complex)
    for u in range(cfg.M_u):
        los = _upa(rng.uniform(-half, half), rng.uniform(-half, half), cfg.ris_shape)
        h[u] = np.sqrt(K / (K + 1)) * los + np.sqrt(1 / (K + 1)) * _cn(rng, cfg.M_r)
    return RisChannels(G, h)


def effective_rows(ch: RisChannels, theta: np.ndarray) -> np.ndarray:
    """Row u is h_u^H diag(theta) G, shape (M_u, M_t)."""
    return (ch.h_r.conj() * theta) @ ch.G


def beamform(ch: RisChannels, theta, powers_w, precoder: str = "mrt"):
    """Per-user precoders (rows of W) with ||w_u||^2 = p_u, and an unreachable flag per user."""
    rows = effective_rows(ch, theta)
    p = np.asarray(powers_w, dtype=float)
    if precoder == "mrt":
        dirs = rows.conj()
    elif precoder == "zf":
        dirs = np.linalg.pinv(rows).T
    else:
        raise ValueError(f"unknown precoder {precoder!r}")
    norms = np.linalg.norm(dirs, axis=1)
    unreachable = ~(norms > 0) | (np.linalg.norm(rows, axis=1) == 0)
    safe = np.where(unreachable, 1.0, norms)
    W = np.sqrt(p)[:, None] * dirs / safe[:, None]
    W[unreachable] = 0.0
    return W, unreachable


def sinr_all(ch: RisChannels, theta, W, sigma2: float) -> np.ndarray:
    rows = effective_rows(ch, theta)
    A = np.abs(rows @ W.T) ** 2  # A[u, v] = |r_u w_v|^2
    sig = np.diag(A)
    return sig / (A.sum(axis=1) - sig + sigma2)


def sinr_user(ch: RisChannels, theta, W, u: int, sigma2: float) -> float:
    """|r_u w_u|^2 / (sum_{v != u} |r_u w_v|^2 + sigma^2) with r_u = h_u^H diag(theta) G."""
    r = effective_rows(ch, theta)[u]
    num = abs(r @ W[u]) ** 2
    interf = sum(abs(r @ W[v]) ** 2 for v in range(W.shape[0]) if v != u)
    return float(num / (interf + sigma2))


class RisEnv:
    name = "ris"
    n_agents = 1

    def __init__(self, cfg: RisConfig | None = None, seed: int = 0):
        self.cfg = cfg or RisConfig()
        self.rng = np.random.default_rng(seed)
        self.n_actions = self.cfg.n_actions
        self.horizon = self.cfg.horizon
        self.obs_dim = 2 * (self.cfg.M_r * self.cfg.M_t + self.cfg.M_u * self.cfg.M_r) + self.cfg.M_u
        self.constraints = [ConstraintSpec(f"sinr_u{u}", ConstraintKind.INSTANT,
                                           description=f"Gamma - SINR of user {u}")
                            for u in range(self.cfg.M_u)]
        self.constraints.append(ConstraintSpec("unit_modulus", ConstraintKind.EQUALITY,
                                               description="max | |theta_i| - 1 |"))
        self._powers_w = 10.0 ** (np.asarray(self.cfg.power_levels) / 10.0) / 1000.0
        self.channels: RisChannels | None = None
        self.t = 0
        self._ep = {}

    @property
    def action_radices(self) -> tuple:
        return self.cfg.radices

    def reset(self, seed=None):
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        if self.channels is None or not self.cfg.freeze_channels:
            self.channels = sample_channels(self.cfg, self.rng)
        self.t = 0
        self._ep = {"feasible_steps": 0, "steps": 0, "energy": 0.0, "min_sinr": np.inf}
        return [self.observe()]

    def observe(self, agent: int = 0) -> np.ndarray:
        ch = self.channels
        scale = 1.0 / np.sqrt(2.0)
        return np.concatenate([
            ch.G.real.ravel() * scale, ch.G.imag.ravel() * scale,
            ch.h_r.real.ravel() * scale, ch.h_r.imag.ravel() * scale,
            np.log10(np.sum(np.abs(ch.h_r) ** 2, axis=1) / self.cfg.M_r),
        ])

    def action_mask(self, agent: int = 0) -> np.ndarray:
        return np.ones(self.n_actions, dtype=bool)

    def fallback_action(self, agent: int = 0) -> int:
        """Every user at the highest power level, all phases at codebook index 0."""
        return encode_action(RisAction((self.cfg.n_power - 1,) * self.cfg.M_u, (0,) * self.cfg.n_blocks),
                             self.cfg)

    def evaluate(self, a: int):
        """(powers_w, sinr per user, theta, W) for action ``a`` on the current channels."""
        act = decode_action(int(a), self.cfg)
        theta = build_theta(act.phases, self.cfg)
        p = self._powers_w[list(act.powers)]
        W, unreachable = beamform(self.channels, theta, p, self.cfg.precoder)
        s = sinr_all(self.channels, theta, W, self.cfg.sigma2)
        return p, s, theta, W, unreachable

    def step(self, actions) -> list[EnvStep]:
        cfg = self.cfg
        p, s, theta, W, unreachable = self.evaluate(actions[0])
        dev = float(np.max(np.abs(np.abs(theta) - 1.0)))
        if dev > UNIT_MODULUS_SNAP:
            log.error("unit-modulus deviation %.3e exceeds %.0e", dev, UNIT_MODULUS_SNAP)
        e_um = 0.0 if dev <= UNIT_MODULUS_SNAP else dev
        g = {f"sinr_u{u}": float(cfg.gamma_linear - s[u]) for u in range(cfg.M_u)}
        feasible = bool(all(v <= 0 for v in g.values()))
        energy = float(np.sum(np.abs(W) ** 2))
        min_sinr_db = float(10 * np.log10(max(s.min(), 1e-300)))
        self.t += 1
        ep = self._ep
        ep["feasible_steps"] += feasible
        ep["steps"] += 1
        ep["energy"] += energy
        ep["min_sinr"] = min(ep["min_sinr"], min_sinr_db)
        info = {
            "overridden": False,
            "feasible": feasible,
            "energy_cost_watts": energy,
            "min_sinr_db": min_sinr_db,
            "sinr": s,
            "unreachable": unreachable.tolist(),
        }
        # the next episode is a fresh channel draw, so the episode end is a true terminal
        done = self.t >= self.horizon
        step = EnvStep(self.observe(), -cfg.reward_scale * float(np.sum(p)), CostSample(g=g, e={"unit_modulus": e_um}),
                       terminal=done, truncated=False, info=info)
        return [step]

    def episode_metrics(self, agent: int = 0) -> dict:
        ep = self._ep
        n = max(ep.get("steps", 0), 1)
        return {
            "feasible": int(ep.get("feasible_steps", 0) == ep.get("steps", 0) and ep.get("steps", 0) > 0),
            "energy_cost_watts": ep.get("energy", 0.0) / n,
            "min_sinr_db": ep.get("min_sinr", float("nan")),
        }

    def exhaustive(self):
        """(feasible, energy) for every action on the current channels, by brute force."""
        feas = np.zeros(self.n_actions, dtype=bool)
        energy = np.zeros(self.n_actions)
        for a in range(self.n_actions):
            p, s, _, _, _ = self.evaluate(a)
            feas[a] = bool((s >= self.cfg.gamma_linear).all())
            energy[a] = p.sum()
        return feas, energy
