import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safeq.lagrangian import (
    ConfigError,
    ConstraintKind,
    ConstraintLayout,
    ConstraintSpec,
    CostSample,
    DualState,
    TrainingConfig,
    dual_ascent,
    estimate_cumulative_cost,
    penalty_cum_step,
    penalty_eq,
    penalty_inst,
    penalty_step,
    penalty_step_batch,
    positive_part,
    scale_penalties,
    validate_specs,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)
nonneg = st.floats(0.0, 1e3, allow_nan=False)
# exact zero or clear of the denormal range, so (g+)^2 cannot underflow
signed = finite.filter(lambda x: x == 0.0 or abs(x) > 1e-100)


def specs_one_each(budget=10.0):
    return [
        ConstraintSpec("i", ConstraintKind.CUMULATIVE, budget),
        ConstraintSpec("j", ConstraintKind.EQUALITY),
        ConstraintSpec("k", ConstraintKind.INSTANT),
    ]


def duals_for(specs, **kw):
    return DualState.initial(specs, **kw)


@pytest.mark.parametrize("x, want", [(0.5, 0.5), (-2.0, 0.0), (0.0, 0.0)])
def test_positive_part(x, want):
    assert positive_part(x) == want


def test_penalty_inst_examples():
    specs = [ConstraintSpec("k", ConstraintKind.INSTANT), ConstraintSpec("k2", ConstraintKind.INSTANT)]
    d = duals_for(specs)
    d.nu.update(k=1.0, k2=1.0)
    d.rho_inst.update(k=2.0, k2=2.0)
    assert penalty_inst(CostSample(g={"k": 0.5}), d) == pytest.approx(0.75)
    assert penalty_inst(CostSample(g={"k": -1.0}), d) == 0.0
    assert penalty_inst(CostSample(g={"k": 1.0, "k2": -3.0}), d) == pytest.approx(2.0)


def test_penalty_unknown_id_is_config_error():
    d = duals_for([ConstraintSpec("k", ConstraintKind.INSTANT)])
    with pytest.raises(ConfigError):
        penalty_inst(CostSample(g={"nope": 1.0}), d)
    with pytest.raises(ConfigError):
        penalty_eq(CostSample(e={"nope": 1.0}), d)


def test_penalty_eq_examples():
    d = duals_for([ConstraintSpec("j", ConstraintKind.EQUALITY)])
    assert penalty_eq(CostSample(e={"j": 0.0}), d) == 0.0
    d.rho_eq["j"] = 2.0
    assert penalty_eq(CostSample(e={"j": 1.0}), d) == pytest.approx(1.0)
    d.mu["j"] = 1.0
    assert penalty_eq(CostSample(e={"j": -1.0}), d) == pytest.approx(0.0)


def test_penalty_cum_step_examples():
    cfg = TrainingConfig(gamma=0.95)
    specs = [ConstraintSpec("i", ConstraintKind.CUMULATIVE, 10.0)]
    d = duals_for(specs)
    d.lam["i"] = 1.0
    assert penalty_cum_step(CostSample(c={"i": 0.5}), d, specs, cfg) == pytest.approx(0.0)
    d.lam["i"] = 0.0
    assert penalty_cum_step(CostSample(c={"i": 123.0}), d, specs, cfg) == 0.0
    specs5 = [ConstraintSpec("i", ConstraintKind.CUMULATIVE, 5.0)]
    d.lam["i"] = 2.0
    assert penalty_cum_step(CostSample(c={"i": 1.0}), d, specs5, TrainingConfig(gamma=0.9)) == pytest.approx(1.0)


def test_cumulative_without_budget_rejected():
    with pytest.raises(ConfigError):
        ConstraintSpec("i", ConstraintKind.CUMULATIVE, None)


def test_duplicate_ids_rejected():
    with pytest.raises(ConfigError):
        validate_specs([ConstraintSpec("a", ConstraintKind.INSTANT), ConstraintSpec("a", ConstraintKind.EQUALITY)])


def test_penalty_step_sums_components():
    specs = specs_one_each(budget=5.0)
    cfg = TrainingConfig(gamma=0.9)
    d = duals_for(specs)
    d.nu["k"], d.rho_inst["k"] = 1.0, 2.0
    d.lam["i"] = 2.0
    costs = CostSample(g={"k": 0.5}, e={"j": 0.0}, c={"i": 1.0})
    assert penalty_step(costs, d, specs, cfg) == pytest.approx(1.75)
    only_inst = CostSample(g={"k": 0.5}, e={"j": 0.0}, c={"i": 0.5})
    assert penalty_step(only_inst, d, specs, cfg) == pytest.approx(penalty_inst(only_inst, d))


@pytest.mark.parametrize("c, gamma, want", [([1, 1, 1], 0.0, 1.0), ([1, 1], 0.5, 1.5), ([0, 0, 0, 0], 0.9, 0.0)])
def test_estimate_cumulative_cost(c, gamma, want):
    traj = [CostSample(c={"i": float(v)}) for v in c]
    assert estimate_cumulative_cost(traj, gamma)["i"] == pytest.approx(want)


def test_estimate_cumulative_cost_empty():
    with pytest.raises(ValueError):
        estimate_cumulative_cost([], 0.9)


def test_dual_ascent_examples():
    specs = specs_one_each()
    d = duals_for(specs)
    d.lam["i"] = 0.5
    assert dual_ascent(d, {"i": -10.0}, {}, {}).lam["i"] == 0.0
    d.lam["i"] = 0.2
    assert dual_ascent(d, {"i": 2.0}, {}, {}).lam["i"] == pytest.approx(0.4)
    assert dual_ascent(d, {}, {}, {"k": 0.0}).nu["k"] == 0.0
    assert dual_ascent(d, {}, {"j": -0.2}, {}).mu["j"] == pytest.approx(-0.02)


def test_dual_ascent_leaves_rho_untouched():
    specs = specs_one_each()
    d = duals_for(specs)
    new = dual_ascent(d, {"i": 3.0}, {"j": 1.0}, {"k": 2.0})
    assert new.rho_eq == d.rho_eq and new.rho_inst == d.rho_inst and new.xi == d.xi


def test_negative_beta_rejected():
    with pytest.raises(ConfigError):
        duals_for(specs_one_each(), beta_lambda=-0.1)


def test_scale_penalties_examples():
    specs = specs_one_each()
    d = duals_for(specs, rho0=0.05, xi=1.1)
    assert scale_penalties(d, ["k"]).rho_inst["k"] == pytest.approx(0.055)
    d.rho_inst["k"] = d.rho_max
    assert scale_penalties(d, ["k"]).rho_inst["k"] == d.rho_max
    assert scale_penalties(d, []).rho_eq == d.rho_eq


def test_training_config_validation():
    with pytest.raises(ConfigError):
        TrainingConfig(gamma=1.0)
    with pytest.raises(ConfigError):
        TrainingConfig(horizon=0)


# -- properties ------------------------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(x=finite)
def test_positive_part_property(x):
    assert positive_part(x) == max(0.0, x) >= 0.0


@settings(max_examples=200, deadline=None)
@given(g=st.lists(signed, min_size=1, max_size=4), nu=nonneg, rho=st.floats(1e-3, 1e3))
def test_penalty_inst_nonnegative_and_zero_iff_feasible(g, nu, rho):
    specs = [ConstraintSpec(f"k{n}", ConstraintKind.INSTANT) for n in range(len(g))]
    d = duals_for(specs)
    for n in range(len(g)):
        d.nu[f"k{n}"], d.rho_inst[f"k{n}"] = nu, rho
    val = penalty_inst(CostSample(g={f"k{n}": v for n, v in enumerate(g)}), d)
    assert val >= 0.0
    if all(v <= 0 for v in g):
        assert val == 0.0
    else:
        assert val > 0.0


@settings(max_examples=200, deadline=None)
@given(lam=nonneg, v=finite, nu=nonneg, gp=finite, mu=finite, e=finite)
def test_projection_keeps_multipliers_nonnegative(lam, v, nu, gp, mu, e):
    d = duals_for(specs_one_each())
    d.lam["i"], d.nu["k"], d.mu["j"] = lam, nu, mu
    new = dual_ascent(d, {"i": v}, {"j": e}, {"k": max(0.0, gp)})
    assert new.lam["i"] >= 0.0 and new.nu["k"] >= 0.0


@settings(max_examples=100, deadline=None)
@given(lam0=nonneg, v=st.floats(1e-3, 1e2), n=st.integers(1, 50))
def test_lambda_grows_linearly_under_fixed_violation(lam0, v, n):
    d = duals_for(specs_one_each())
    d.lam["i"] = lam0
    for _ in range(n):
        d = dual_ascent(d, {"i": v}, {}, {})
    assert d.lam["i"] == pytest.approx(lam0 + n * d.beta_lambda * v, rel=1e-9, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(rho0=st.floats(1e-3, 10.0), n=st.integers(1, 300))
def test_rho_nondecreasing_and_capped(rho0, n):
    d = duals_for(specs_one_each(), rho0=rho0)
    prev = d.rho_inst["k"]
    for _ in range(n):
        d = scale_penalties(d, ["k", "j"])
        assert prev <= d.rho_inst["k"] <= 1e5
        prev = d.rho_inst["k"]


@settings(max_examples=200, deadline=None)
@given(g=finite, e=finite, c=finite, lam=nonneg, mu=finite, nu=nonneg,
       rho=st.floats(1e-3, 1e3), gamma=st.floats(0.0, 0.99))
def test_decomposition_and_batch_agree(g, e, c, lam, mu, nu, rho, gamma):
    specs = specs_one_each(budget=3.0)
    cfg = TrainingConfig(gamma=gamma)
    d = duals_for(specs)
    d.lam["i"], d.mu["j"], d.nu["k"] = lam, mu, nu
    d.rho_eq["j"] = d.rho_inst["k"] = rho
    costs = CostSample(g={"k": g}, e={"j": e}, c={"i": c})
    total = penalty_step(costs, d, specs, cfg)
    parts = penalty_inst(costs, d) + penalty_eq(costs, d) + penalty_cum_step(costs, d, specs, cfg)
    assert total == pytest.approx(parts, rel=1e-12, abs=1e-9)
    layout = ConstraintLayout.from_specs(specs)
    gv, ev, cv = layout.to_arrays(costs)
    batch = penalty_step_batch(gv[None], ev[None], cv[None], d, layout, gamma)[0]
    assert batch == pytest.approx(total, rel=1e-9, abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(g=st.floats(-1e3, 0.0), lam=nonneg, mu=finite, nu=nonneg, d_budget=st.floats(0.0, 100.0),
       gamma=st.floats(0.0, 0.99))
def test_feasible_neutrality(g, lam, mu, nu, d_budget, gamma):
    specs = specs_one_each(budget=d_budget)
    d = duals_for(specs)
    d.lam["i"], d.mu["j"], d.nu["k"] = lam, mu, nu
    costs = CostSample(g={"k": g}, e={"j": 0.0}, c={"i": (1 - gamma) * d_budget})
    assert math.isclose(penalty_step(costs, d, specs, TrainingConfig(gamma=gamma)), 0.0, abs_tol=1e-9)


def test_layout_column_order():
    layout = ConstraintLayout.from_specs(specs_one_each())
    g, e, c = layout.to_arrays(CostSample(g={"k": 1.0}, e={"j": 2.0}, c={"i": 3.0}))
    assert (g, e, c) == (np.array([1.0]), np.array([2.0]), np.array([3.0]))
