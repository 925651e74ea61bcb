import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import rk4_fixed
from vrclf import fields as fx
from vrclf import reaction_network as rn
from vrclf import sim_harness as sh
from vrclf.feasibility import ControlSet
from vrclf.gain_calculus import GainMatrix
from vrclf.vclf_core import ControlAffineSystem, VRCLFSpec


def decay(x, u, d):
    return -x


def fixed_steps(h):
    # tolerances loose enough that every step is capped by max_step
    return sh.IntegratorOptions(rtol=1e3, atol=1e3, max_step=h)


@pytest.fixture(scope="module")
def stabilized51():
    inst = rn.example51_instance()
    fb = rn.stabilize(inst.network, inst.conservation, inst.config)
    return inst, fb, rn.log_transform(inst.network)


@pytest.fixture(scope="module")
def bistable51():
    inst = rn.example51_instance(theta=1.9)
    fb = rn.stabilize(inst.network, inst.conservation, inst.config)
    return inst, fb, rn.log_transform(inst.network)


# -------------------------------------------------------------- integration

def test_linear_decay_closed_form():
    tr = sh.integrate(decay, [1.0], 1.0)
    assert tr.t[-1] == 1.0
    assert tr.final[0] == pytest.approx(math.exp(-1), abs=1e-7)


def test_observed_order_at_least_four():
    errs = [abs(sh.integrate(decay, [1.0], 1.0, opts=fixed_steps(h)).final[0] - math.exp(-1))
            for h in (0.2, 0.1, 0.05)]
    orders = [math.log2(a / b) for a, b in zip(errs[:-1], errs[1:])]
    assert min(orders) >= 4.0


def test_agrees_with_fixed_step_rk4_on_nonlinear_field():
    def f(x, u, d):
        return np.array([x[1], -np.sin(x[0]) - 0.1 * x[1]])

    tr = sh.integrate(f, [1.0, 0.0], 5.0)
    ref = rk4_fixed(lambda x: f(x, 0.0, ()), np.array([1.0, 0.0]), 5.0, 1e-3)
    assert np.allclose(tr.final, ref, atol=1e-7)


def test_constant_control_is_held():
    tr = sh.integrate(lambda x, u, d: np.array([u]), [0.0], 2.0, control=lambda x: 3.0)
    assert tr.final[0] == pytest.approx(6.0) and np.all(tr.u == 3.0)


def test_open_loop_input():
    tr = sh.integrate(lambda x, u, d: np.array([u]), [0.0], 2.0, open_loop=lambda t: 1.0 if t < 1 else 0.0,
                      disturbance=sh.DisturbanceSignal.piecewise([1.0], [(), ()]))
    assert tr.final[0] == pytest.approx(1.0, abs=1e-12)


def test_disturbance_switches_are_step_boundaries():
    sig = sh.DisturbanceSignal.piecewise([0.5, 1.25], [(0.0,), (1.0,), (-2.0,)])
    tr = sh.integrate(lambda x, u, d: np.array([d[0]]), [0.0], 2.0, disturbance=sig)
    assert 0.5 in tr.t and 1.25 in tr.t
    assert tr.final[0] == pytest.approx(0.75 - 1.5, abs=1e-12)


def test_random_disturbance_reproducible_and_in_box():
    sig = sh.DisturbanceSignal.random([(-1.0, 1.0), (0.0, 2.0)], dwell=0.1, seed=7)
    t1, v1 = sig.realize(3.0)
    t2, v2 = sig.realize(3.0)
    assert np.array_equal(t1, t2) and v1 == v2
    assert len(v1) == len(t1) + 1 == 30
    V = np.array(v1)
    assert np.all((V[:, 0] >= -1) & (V[:, 0] <= 1) & (V[:, 1] >= 0) & (V[:, 1] <= 2))


def test_disturbance_signal_validation():
    with pytest.raises(ValueError):
        sh.DisturbanceSignal.piecewise([1.0], [(0.0,)])
    with pytest.raises(ValueError):
        sh.DisturbanceSignal.piecewise([1.0, 0.5], [(0.0,)] * 3)
    with pytest.raises(ValueError):
        sh.DisturbanceSignal.random([(0.0, 1.0)], dwell=0.0)


def test_integration_errors():
    with pytest.raises(ValueError):
        sh.integrate(decay, [1.0], 0.0)
    with pytest.raises(sh.IntegrationError):
        sh.integrate(decay, [math.nan], 1.0)
    with pytest.raises(sh.IntegrationError) as info:
        sh.integrate(lambda x, u, d: x * x, [1.0], 2.0)  # blows up at t = 1
    assert info.value.t < 1.0 + 1e-6


def test_stop_norm_ends_early():
    tr = sh.integrate(decay, [1.0], 100.0, opts=sh.IntegratorOptions(stop_norm=1e-3))
    assert tr.t[-1] < 100.0 and np.linalg.norm(tr.final) < 1e-3


# -------------------------------------------------------------- reproducibility

def _csv(stab, seed):
    inst, fb, system = stab
    c0 = np.random.default_rng(seed).uniform(0.2, 3.0, 2)
    tr = sh.simulate(system, np.log(c0), 5.0, feedback=fb.law)
    ch = sh.channels(tr, system, fb.law.spec)
    return sh.csv_text(*sh.trajectory_rows(tr, ch, state_map=np.exp, state_prefix="c"))


def test_identical_seeds_give_identical_csv(stabilized51):
    a, b = _csv(stabilized51, 11), _csv(stabilized51, 11)
    assert a == b
    assert a != _csv(stabilized51, 12)
    assert a.splitlines()[0] == "t,c_1,c_2,u,eta,W,V_1,V_2,active_set"


def test_hold_refinement_changes_terminal_state_little(stabilized51):
    _, fb, system = stabilized51
    x0 = np.log([0.3, 2.0])
    coarse = sh.simulate(system, x0, 10.0, fb.law, opts=sh.IntegratorOptions(max_step=0.05))
    fine = sh.simulate(system, x0, 10.0, fb.law, opts=sh.IntegratorOptions(max_step=0.0125))
    assert np.max(np.abs(coarse.final - fine.final)) <= 1e-5


def test_run_batch_sorted_by_seed():
    assert sh.run_batch(lambda s: s * s, [3, 1, 2]) == [1, 4, 9]


def test_manifest_hash_stable():
    m = sh.RunManifest("x", {"b": 1, "a": [1, 2]}, [0], {"rtol": 1e-8}, sh.versions(), 0.1)
    j = m.to_json()
    assert j["config_hash"] == sh.config_hash({"a": [1, 2], "b": 1})
    assert len(j["config_hash"]) == 64


# -------------------------------------------------------------- monitors

def test_stabilized_runs_have_no_monitor_violations(stabilized51):
    _, fb, system = stabilized51
    rng = np.random.default_rng(3)
    for c0 in rng.uniform(0.1, 4.0, (5, 2)):
        tr = sh.simulate(system, np.log(c0), 30.0, feedback=fb.law)
        rep = sh.monitor(tr, system, fb.law.spec)
        assert rep.passed, rep.to_json()
        assert np.allclose(np.exp(tr.final), 1.0, atol=1e-3)


def test_broken_feedback_flags_decrease_condition(bistable51):
    _, fb, system = bistable51
    tr = sh.simulate(system, np.log([2.5, 0.2]), 20.0, feedback=lambda x: 0.0)
    rep = sh.monitor(tr, system, fb.law.spec)
    assert not rep.passed and rep.counts()["2.5"] > 0
    assert not np.allclose(np.exp(tr.final), 1.0, atol=0.1)
    v = rep.violations[0]
    assert v.condition == "2.5" and v.residual > 0


def test_scalar_decay_residual_nonpositive():
    x = fx.var(0)
    system = ControlAffineSystem((-x,), (fx.const(1.0),), ControlSet.reals())
    spec = VRCLFSpec((0.5 * x * x,), fx.const(-1.0), fx.const(1.0), lambda e: np.ones_like(e),
                     lambda e: np.ones_like(e), lambda s: s, 1.0, GainMatrix.zeros(1), np.array([-1.0]), 0.1)
    tr = sh.simulate(system, [2.0], 5.0, feedback=lambda z: 0.0)
    rep = sh.monitor(tr, system, spec)
    assert rep.passed and rep.checked["2.5"] == len(tr.t) - 1
    V = 0.5 * tr.x[:, 0] ** 2
    dt = np.diff(tr.t)
    resid = np.diff(V) / dt + 0.25 * (V[:-1] + V[1:])
    assert np.all(resid <= 0)


def test_monitor_json_shape(stabilized51):
    _, fb, system = stabilized51
    tr = sh.simulate(system, np.log([0.5, 1.5]), 2.0, feedback=fb.law)
    j = sh.monitor(tr, system, fb.law.spec).to_json()
    assert set(j) == {"passed", "checked", "violations", "first_violations"}


# -------------------------------------------------------------- KL envelopes

def _batch(rhs, radii, T=10.0):
    return [sh.integrate(rhs, [r], T, opts=sh.IntegratorOptions(max_step=0.05)) for r in radii]


def test_linear_envelope_is_radius_times_exponential():
    radii = np.linspace(0.1, 2.0, 20)
    est = sh.estimate_kl(_batch(decay, radii))
    assert est.counts.tolist() == [5, 5, 5, 5]
    for b in range(4):
        want = est.bin_edges[b + 1] * np.exp(-est.t_grid)
        assert np.allclose(est.envelope[b], want, rtol=1e-3)
    assert est.verdict and est.monotonicity_violations == 0


def test_envelope_nonincreasing_and_dominates_raw():
    rng = np.random.default_rng(0)
    trajs = _batch(lambda x, u, d: -x + 0.8 * np.sin(5 * x), rng.uniform(0.1, 3, 10), T=3.0)
    est = sh.estimate_kl(trajs)
    assert np.all(np.diff(est.envelope, axis=1) <= 0)
    assert np.all(est.envelope >= est.raw)
    assert np.all(np.diff(est.isotonic, axis=1) <= 1e-12)


def test_unstable_batch_fails_verdict():
    est = sh.estimate_kl(_batch(lambda x, u, d: 0.1 * x, np.linspace(0.1, 1, 10), T=5.0))
    assert not est.verdict and np.all(est.final_ratio > 1)


def test_insufficient_batch():
    with pytest.raises(sh.InsufficientBatch):
        sh.estimate_kl(_batch(decay, [0.5, 1.0], T=1.0))
    with pytest.raises(sh.InsufficientBatch):
        sh.estimate_kl(_batch(decay, np.linspace(0.1, 1, 9), T=1.0), bins=2)


# -------------------------------------------------------------- reactor physics

def test_feed_shutoff_conserves_total(stabilized51):
    inst, _, system = stabilized51
    p = np.array(rn.find_conservation(inst.network.S)[0].p)
    x0 = np.log([0.4, 2.2])
    tr = sh.simulate(system, x0, 50.0, open_loop=lambda t: -1.0)
    totals = np.exp(tr.x) @ p
    assert np.max(np.abs(totals - totals[0])) <= 1e-6


@settings(max_examples=15)
@given(st.floats(0.05, 5.0), st.floats(0.05, 5.0))
def test_unit_dilution_relaxes_total_to_feed(c1, c2):
    net = rn.normalized_example51(1.0, 0.5, 10.0)
    system = rn.log_transform(net)
    tr = sh.simulate(system, np.log([c1, c2]), 3.0)
    p = np.array([0.5, 1.0])   # mu c1 + c2 is conserved by the reaction
    total = np.exp(tr.x) @ p
    feed = p @ net.c_f
    want = feed + (p @ [c1, c2] - feed) * np.exp(-tr.t)
    assert np.allclose(total, want, rtol=1e-6, atol=1e-8)
