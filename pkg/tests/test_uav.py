import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safeq.envs.uav import (
    MOVES,
    Mobility,
    UavAction,
    UavConfig,
    UavEnv,
    decode_action,
    encode_action,
    path_gain,
    rate,
    rician_fading,
    sample_channel,
    sinr,
)
from safeq.lagrangian import ConfigError


def place(env, xy, energies=None):
    """Reset, then move the UAVs to the given planar positions."""
    env.reset()
    env.state.positions[:, :2] = np.asarray(xy, dtype=float)
    if energies is not None:
        env.state.energies[:] = energies
    env._apply_path_loss()
    env._refresh_distances()
    return env


def act(cfg, mob=Mobility.HOVER, pu=0, bu=0, pr=0, br=1):
    return encode_action(UavAction(mob, (pu, bu), (pr, br)), cfg)


# -- configuration and reset ---------------------------------------------------


def test_config_validation():
    for bad in (dict(n_u=1), dict(d_min=0), dict(E_min=1.0), dict(power_levels=(10, 5)), dict(B=1)):
        with pytest.raises(ConfigError):
            UavConfig(**bad)


def test_reset_spacing_in_huge_arena():
    env = UavEnv(UavConfig(n_u=2, arena=(1e5, 1e5)), seed=1)
    env.reset()
    d = np.linalg.norm(env.state.positions[0] - env.state.positions[1])
    assert d >= 2 * env.cfg.d_min


def test_reset_same_seed_same_positions():
    a, b = UavEnv(seed=3), UavEnv(seed=3)
    a.reset(), b.reset()
    assert np.array_equal(a.state.positions, b.state.positions)


def test_reset_arena_too_small():
    with pytest.raises(ConfigError, match="arena too small"):
        UavEnv(UavConfig(n_u=5, arena=(50.0, 50.0))).reset()


# -- radio model ----------------------------------------------------------------


def test_pure_los_limit_has_unit_modulus():
    f = rician_fading(400.0, 1000, np.random.default_rng(0))
    assert np.allclose(np.abs(f), 1.0, atol=1e-12)


def test_fading_normalization():
    f = rician_fading(10.0, 100_000, np.random.default_rng(1))
    assert 0.98 <= np.mean(np.abs(f) ** 2) <= 1.02


def test_path_gain_power_law():
    cfg = UavConfig(pathloss_exponent=2.0)
    assert path_gain(10.0, cfg) / path_gain(20.0, cfg) == pytest.approx(4.0)


def test_sample_channel_shape_and_floor():
    cfg = UavConfig()
    h = sample_channel([0, 0, 0], [0, 0, 0], cfg, np.random.default_rng(0))
    assert h.shape == (cfg.B,) and np.isfinite(h).all()


@pytest.mark.parametrize("g, p, i, s2, want", [(1, 1, 0, 1, 1.0), (1, 0, 0, 1, 0.0), (1, 1, 1, 1, 0.5)])
def test_sinr_examples(g, p, i, s2, want):
    assert sinr(g, p, i, s2) == pytest.approx(want)


@pytest.mark.parametrize("s, w, want", [(1, 1, 1.0), (0, 1, 0.0), (3, 1e6, 2e6)])
def test_rate_examples(s, w, want):
    assert rate(s, w) == pytest.approx(want)


# -- actions --------------------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_encode_decode_round_trip(data):
    cfg = UavConfig(B=data.draw(st.integers(2, 6)), power_levels=(1.0, 2.0, 3.0))
    a = data.draw(st.integers(0, cfg.n_actions - 1))
    d = decode_action(a, cfg)
    assert d.u2u[1] != d.u2r[1]
    assert encode_action(d, cfg) == a


def test_same_subchannel_rejected():
    with pytest.raises(ValueError):
        UavAction(Mobility.HOVER, (0, 2), (0, 2))


# -- stepping -------------------------------------------------------------------


def test_forward_moves_one_metre():
    env = place(UavEnv(UavConfig(n_u=2, shield=False)), [[0.0, 0.0], [100.0, 100.0]])
    env.step([act(env.cfg, Mobility.FORWARD), act(env.cfg)])
    assert np.array_equal(env.state.positions[0], [1.0, 0.0, env.cfg.altitude])


def test_all_hover_keeps_positions():
    env = UavEnv(seed=2)
    env.reset()
    before = env.state.positions.copy()
    env.step([act(env.cfg)] * env.n_agents)
    assert np.array_equal(env.state.positions, before)


def test_collision_cost_zero_at_boundary():
    env = place(UavEnv(UavConfig(n_u=2)), [[50.0, 50.0], [80.0, 50.0]])
    out = env.step([act(env.cfg)] * 2)
    assert out[0].costs.g["collision"] == 0.0 and out[1].costs.g["collision"] == 0.0


def test_lone_transmitter_sees_no_interference():
    cfg = UavConfig(n_u=2)
    env = place(UavEnv(cfg, seed=3), [[20.0, 20.0], [150.0, 150.0]])
    gain = env.state.u2u_gain.copy()
    pw = env._powers_w[1]
    # UAV 0 on subchannels (0, 1), UAV 1 on (2, 3): nothing is shared
    out = env.step([act(cfg, pu=1, bu=0, br=1), act(cfg, bu=2, br=3)])
    want = rate(sinr(gain[0, 1, 0], pw, 0.0, cfg.sigma2), cfg.W_b) * cfg.delta_t
    assert out[0].info["u2u_worst_bits"] == pytest.approx(want, rel=1e-12)


def test_co_channel_interference_two_term_sum():
    cfg = UavConfig(n_u=2)
    env = place(UavEnv(cfg, seed=4), [[20.0, 20.0], [150.0, 150.0]])
    gain_u2r = env.state.u2r_gain.copy()
    pw = env._powers_w[0]
    out_shared = env.step([act(cfg, bu=0, br=1), act(cfg, bu=2, br=1)])
    s = [o.info["u2r_rate"] for o in out_shared]
    want = [rate(sinr(gain_u2r[i, 1], pw, gain_u2r[1 - i, 1] * pw, cfg.sigma2), cfg.W_b) for i in range(2)]
    assert s == pytest.approx(want, rel=1e-12)

    env = place(UavEnv(cfg, seed=4), [[20.0, 20.0], [150.0, 150.0]])
    gain_u2r = env.state.u2r_gain.copy()
    out_split = env.step([act(cfg, bu=0, br=1), act(cfg, bu=2, br=3)])
    assert out_split[0].info["u2r_rate"] == pytest.approx(
        rate(sinr(gain_u2r[0, 1], pw, 0.0, cfg.sigma2), cfg.W_b), rel=1e-12)


def test_energy_identity_and_monotone():
    env = UavEnv(UavConfig(horizon=50), seed=5)
    env.reset()
    r = np.random.default_rng(0)
    for _ in range(50):
        out = env.step([int(r.choice(np.flatnonzero(env.action_mask(i)))) for i in range(env.n_agents)])
        for o in out:
            assert o.info["energy"] == o.info["energy_before"] - o.info["spend"]
            assert o.info["energy"] <= o.info["energy_before"]


def test_depletion_ends_episode_with_failure_flag():
    env = place(UavEnv(UavConfig(n_u=2)), [[20.0, 20.0], [150.0, 150.0]], energies=[1e-5, 0.08])
    env.shield_enabled = False
    out = env.step([act(env.cfg)] * 2)
    assert out[0].terminal and out[0].info["failure"]
    with pytest.raises(ValueError):
        env.step([act(env.cfg)] * 2)


def test_positions_clamped_without_shield():
    env = place(UavEnv(UavConfig(n_u=2, shield=False)), [[0.0, 0.0], [100.0, 100.0]])
    env.step([act(env.cfg, Mobility.BACKWARD), act(env.cfg)])
    assert env._in_arena(env.state.positions[:, :2]).all()
    assert env.clamp_events == 1


# -- shield and mask ------------------------------------------------------------


def test_shield_overrides_move_towards_neighbour_at_d_min():
    env = place(UavEnv(UavConfig(n_u=2)), [[50.0, 50.0], [80.0, 50.0]])
    intended = [act(env.cfg, Mobility.FORWARD, pu=2), act(env.cfg)]
    executed, over = env.shield(intended)
    assert over == [True, False]
    assert decode_action(executed[0], env.cfg).mobility == Mobility.HOVER
    assert decode_action(executed[0], env.cfg).u2u[0] == 0


def test_shield_passes_isolated_agent():
    env = place(UavEnv(UavConfig(n_u=2)), [[100.0, 100.0], [10.0, 10.0]])
    intended = [act(env.cfg, Mobility.LEFT, pu=3, pr=3), act(env.cfg)]
    assert env.shield(intended) == (intended, [False, False])


def test_shield_curtails_power_near_energy_floor():
    cfg = UavConfig(n_u=2)
    env = place(UavEnv(cfg), [[100.0, 100.0], [10.0, 10.0]], energies=[cfg.E_min + 1e-6, cfg.E0])
    executed, over = env.shield([act(cfg, pu=3, pr=3), act(cfg)])
    assert over[0]
    assert decode_action(executed[0], cfg).u2r[0] == 0


def test_joint_shield_never_closes_below_d_min():
    cfg = UavConfig(n_u=5, horizon=400, slow_interval=1)
    env = UavEnv(cfg, seed=11)
    env.reset()
    r = np.random.default_rng(1)
    for _ in range(400):
        # push everyone towards the arena centre, ignoring the mask
        moves = []
        for i in range(cfg.n_u):
            d = np.array(cfg.arena) / 2 - env.state.positions[i, :2]
            mob = (Mobility.FORWARD if d[0] > 0 else Mobility.BACKWARD) if abs(d[0]) > abs(d[1]) else \
                (Mobility.LEFT if d[1] > 0 else Mobility.RIGHT)
            moves.append(act(cfg, mob, pu=int(r.integers(cfg.n_power))))
        out = env.step(moves)
        assert min(o.info["min_dist"] for o in out) >= cfg.d_min
    assert sum(env.episode_metrics(i)["collisions"] for i in range(cfg.n_u)) == 0


def test_mask_blocks_moves_into_neighbour_and_edge():
    cfg = UavConfig(n_u=2)
    env = place(UavEnv(cfg), [[0.0, 50.0], [30.5, 50.0]])
    mob = env.action_mask(0)[:5]
    assert not mob[Mobility.FORWARD]  # 29.5 m after the move
    assert not mob[Mobility.BACKWARD]  # leaves the arena
    assert mob[Mobility.LEFT] and mob[Mobility.RIGHT] and mob[Mobility.HOVER]


def test_mask_is_hover_only_between_slow_steps():
    env = UavEnv(UavConfig(slow_interval=5), seed=0)
    env.reset()
    env.step([act(env.cfg)] * env.n_agents)
    m = env.action_mask(0).reshape(-1, 5)
    assert m[:, Mobility.HOVER].all() and not m[:, :4].any()


def test_fallback_is_hover_at_lowest_power():
    cfg = UavConfig()
    env = UavEnv(cfg)
    d = decode_action(env.fallback_action(0, act(cfg, Mobility.LEFT, 3, 2, 3, 4)), cfg)
    assert d == UavAction(Mobility.HOVER, (0, 2), (0, 4))


# -- observations and extras ------------------------------------------------------


def test_observation_layout_constant_and_distances_frozen():
    cfg = UavConfig(slow_interval=5, horizon=10)
    env = UavEnv(cfg, seed=6)
    obs = env.reset()
    assert all(len(o) == cfg.obs_dim for o in obs)
    k = cfg.k_visible
    dist_slice = slice(cfg.B + k + 3, cfg.B + 2 * k + 3)
    out = env.step([act(cfg, Mobility.LEFT)] * cfg.n_u)  # slow step: positions change
    frozen = out[0].obs[dist_slice].copy()
    chan = out[0].obs[: cfg.B].copy()
    for _ in range(3):
        out = env.step([act(cfg)] * cfg.n_u)
        assert len(out[0].obs) == cfg.obs_dim
        assert np.array_equal(out[0].obs[dist_slice], frozen)
    assert not np.array_equal(out[0].obs[: cfg.B], chan)


def test_knn_full_distance_vector():
    cfg = UavConfig(knn_k=4)
    env = UavEnv(cfg, seed=0)
    env.reset()
    d = np.linalg.norm(env.state.positions[0, :2] - env.state.positions[1:, :2], axis=1)
    got = env.observe(0)[cfg.B + 4 + 3: cfg.B + 8 + 3] * np.hypot(*cfg.arena)
    assert np.allclose(got, np.sort(d))


def test_same_seed_same_trajectory():
    def run():
        env = UavEnv(UavConfig(horizon=20), seed=9)
        env.reset()
        r = np.random.default_rng(2)
        rows = []
        for _ in range(20):
            out = env.step([int(r.integers(env.n_actions)) for _ in range(env.n_agents)])
            rows.append([(o.reward, o.info["energy"]) for o in out])
        return rows, env.state.positions.copy()

    a, b = run(), run()
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


def test_energy_budget_adds_cumulative_cost():
    cfg = UavConfig(energy_budget=0.5)
    env = UavEnv(cfg)
    assert [c.id for c in env.constraints][-1] == "energy_spend"
    env.reset()
    out = env.step([act(cfg)] * cfg.n_u)
    assert out[0].costs.c["energy_spend"] == pytest.approx(out[0].info["spend"] / cfg.E0)
    with pytest.raises(ConfigError):
        UavConfig(energy_budget=0.0)


def test_moves_table():
    assert MOVES[Mobility.FORWARD].tolist() == [1.0, 0.0] and not MOVES[Mobility.HOVER].any()
