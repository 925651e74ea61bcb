import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vrclf import corollary_lab as cl
from vrclf import fields as fx
from vrclf.feasibility import ControlSet
from vrclf.gain_calculus import GainMatrix, Linear, Power, Zero
from vrclf.vclf_core import (ControlAffineSystem, SynthesisError, VRCLFSpec, active_set, bump, certify,
                             check_implications, check_structure, lie_derivatives, max_over_disturbance,
                             synthesize)


def half_square(i):
    return 0.5 * fx.var(i) * fx.var(i)


def scalar_spec(rho=lambda s: s, local=(-1.0,), radius=0.25):
    return VRCLFSpec((half_square(0),), fx.const(-1.0), fx.const(1.0), lambda e: np.ones_like(e),
                     lambda e: np.ones_like(e), rho, 1.0, GainMatrix.zeros(1), np.array(local), radius)


# -------------------------------------------------------------- Lie derivatives

def test_lie_derivatives_third_order_system(ex43):
    system = ex43[0]
    V1 = fx.ScalarField(half_square(0), 3)
    for x in ([1.0, 2.0, -1.0], [-0.5, 0.3, 2.0]):
        lf, lg = lie_derivatives(system, V1, x)
        assert lf == pytest.approx(x[0] * (-x[0] + x[1]))
        assert lg == 0.0
    V3 = fx.ScalarField(half_square(2), 3)
    assert lie_derivatives(system, V3, [1.0, 0.0, 2.0]) == (2.0, 2.0)


def test_lie_derivatives_of_constant(ex43):
    assert lie_derivatives(ex43[0], fx.ScalarField(fx.const(4.0), 3), [1.0, 2.0, 3.0]) == (0.0, 0.0)


def test_disturbance_max_affine_vertex():
    x, d = fx.var(0), fx.dist(0)
    system = ControlAffineSystem((-x + 3.0 * d,), (fx.const(1.0),), ControlSet.reals(), ((-1.0, 1.0),))
    phi = fx.ScalarField(x, 1, 1)
    val, conservative = max_over_disturbance(system, phi, [2.0])
    assert val == pytest.approx(-2.0 + 3.0) and not conservative


def test_disturbance_max_single_point_equals_lie_derivative():
    x, d = fx.var(0), fx.dist(0)
    system = ControlAffineSystem((-x + d * d,), (fx.const(1.0),), ControlSet.reals(), ((0.5, 0.5),))
    phi = fx.ScalarField(half_square(0), 1, 1)
    assert max_over_disturbance(system, phi, [2.0])[0] == pytest.approx(lie_derivatives(system, phi, [2.0], (0.5,))[0])


def test_disturbance_grid_flagged_conservative():
    x, d = fx.var(0), fx.dist(0)
    system = ControlAffineSystem((-x + d * d,), (fx.const(1.0),), ControlSet.reals(), ((-1.0, 1.0),))
    val, conservative = max_over_disturbance(system, fx.ScalarField(x, 1, 1), [0.0])
    assert conservative and val == pytest.approx(1.0)


def test_input_gain_may_not_see_disturbance():
    with pytest.raises(ValueError):
        ControlAffineSystem((fx.var(0),), (fx.dist(0),), ControlSet.reals(), ((0.0, 1.0),))


# -------------------------------------------------------------- active set

def two_component_spec(g12, g21):
    G = GainMatrix.from_dict(2, {(0, 1): g12, (1, 0): g21})
    return VRCLFSpec((half_square(0), half_square(1)), fx.const(-1.0), fx.const(1.0), lambda e: e * 0 + 1,
                     lambda e: e * 0 + 1, lambda s: s, 1.0, G, np.zeros(2), 0.1)


def test_active_set_hand_example():
    spec = two_component_spec(Linear(2.0), Linear(1.0 / 3.0))
    assert active_set(spec, [1.0, 3.0]) == (1,)


def test_active_set_at_origin_is_everything():
    spec = two_component_spec(Linear(2.0), Linear(1.0 / 3.0))
    assert active_set(spec, [0.0, 0.0]) == (0, 1)


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=2))
def test_largest_component_active_under_contractive_gains(x):
    spec = two_component_spec(Linear(0.9), Power(0.5, 1.0))
    V = [0.5 * v * v for v in x]
    j = int(np.argmax(V))
    if V[j] > V[1 - j]:
        assert j in active_set(spec, x)


# -------------------------------------------------------------- implications

def test_stable_scalar_passes_decrease():
    x = fx.var(0)
    system = ControlAffineSystem((-x,), (fx.const(0.0),), ControlSet.reals())
    X = np.linspace(-3, 3, 401)[None, :]
    rep = check_implications(system, scalar_spec(), X)
    assert rep["3.3"].hits > 0 and rep["3.3"].passed


def test_example43_implications_pass(ex43):
    system, cfg, _ = ex43
    X = np.random.default_rng(3).uniform(-2, 2, (3, 20000))
    rep = check_implications(system, cl.build_spec(cfg), X)
    assert rep.passed
    assert rep["3.3"].hits > 1000


def test_inflated_rho_is_caught(ex43):
    system, cfg, _ = ex43
    spec = cl.build_spec(cfg)
    bad = dataclasses.replace(spec, rho=lambda s, r=spec.rho: 1e6 * r(s))
    X = np.random.default_rng(3).uniform(-2, 2, (3, 5000))
    res = check_implications(system, bad, X)["3.3"]
    assert res.violations > 0 and res.witnesses
    w = np.array(res.witnesses[0].x)
    assert w.shape == (3,)


def test_structure_checks(ex43):
    system, cfg, _ = ex43
    X = np.random.default_rng(4).uniform(-2, 2, (3, 5000))
    rep = check_structure(system, cl.build_spec(cfg), X)
    assert rep.passed
    for rid in ("3.2-lower", "3.2-upper", "W>=1", "eta(0)<0", "f(d,0)=0", "3.10"):
        assert rid in rep.results


def test_spec_rejects_bad_data():
    with pytest.raises(ValueError):
        dataclasses.replace(scalar_spec(), epsilon=0.0)
    with pytest.raises(ValueError):
        dataclasses.replace(scalar_spec(), radius=-1.0)
    with pytest.raises(ValueError):
        dataclasses.replace(scalar_spec(), gains=GainMatrix.zeros(2))


# -------------------------------------------------------------- synthesis

def test_bump_values():
    assert bump(-1.0) == 0.0 and bump(2.0) == 1.0
    assert bump(0.5) == pytest.approx(0.5)
    s = np.linspace(-0.5, 1.5, 1000)
    assert np.all(np.diff([bump(v) for v in s]) >= 0)


def test_origin_returns_zero(ex43):
    law = synthesize(ex43[0], cl.build_spec(ex43[1]))
    assert law.evaluate([0.0, 0.0, 0.0])[:2] == (0.0, "origin")


def test_scalar_law_is_pointwise_min_norm_clf():
    # x' = x + u with V = x^2/2: the admissible set is u < -x - 0.75 rho(V)/x (x > 0)
    x = fx.var(0)
    system = ControlAffineSystem((x,), (fx.const(1.0),), ControlSet.reals())
    law = synthesize(system, scalar_spec(rho=lambda s: s, local=(-2.0,), radius=0.1))
    for v in (0.5, 1.0, 3.0):
        bound = -v - 0.75 * (0.5 * v * v) / v
        u, region, _ = law.evaluate([v])
        assert region == "k2"
        assert u < bound and u == pytest.approx(bound, abs=2e-6)


def test_blend_weight_at_seven_tenths_epsilon():
    # eta constant at 0.7 eps sits in the k3/k1 blend with weight p(0.5) = 0.5
    x = fx.var(0)
    system = ControlAffineSystem((x,), (fx.const(1.0),), ControlSet.reals())
    spec = VRCLFSpec((half_square(0),), (0.7 / 2.25) * x * x - 0.1, 1.0 + 0.5 * x * x,
                     lambda e: np.ones_like(e), lambda e: 2.0 + 0 * e, lambda s: s, 1.0,
                     GainMatrix.zeros(1), np.array([-2.0]), 0.01)
    law = synthesize(system, spec)
    x0 = math.sqrt(0.8 * 2.25 / 0.7)  # eta(x0) = 0.7
    u, region, p = law.evaluate([x0])
    assert region == "k3/k1" and p.eta == pytest.approx(0.7)
    assert u == pytest.approx(0.5 * law.k3([x0]) + 0.5 * law.k1([x0]), rel=1e-9)


def test_local_region_uses_local_law(ex43):
    law = synthesize(ex43[0], cl.build_spec(ex43[1]))
    r = law.spec.radius
    x = [0.0, 0.0, 0.5 * r]
    u, region, _ = law.evaluate(x)
    assert region == "local"
    assert u == pytest.approx(np.dot(ex43[1].kvec, x))


def test_seams_agree_with_pure_controllers(ex43):
    law = synthesize(ex43[0], cl.build_spec(ex43[1]))
    r = law.spec.radius
    for direction in np.random.default_rng(5).normal(size=(20, 3)):
        d = direction / np.linalg.norm(direction)
        inner = law(d * r * (1 + 1e-12))
        assert inner == pytest.approx(law.local(d * r * (1 + 1e-12)), abs=1e-9)
        outer = d * 2 * r
        assert law(outer) == pytest.approx(law.k2(outer), abs=1e-9)


def test_infeasible_point_raises_with_region():
    # g = 0 and an unstable drift: no control can decrease V
    x = fx.var(0)
    system = ControlAffineSystem((x,), (fx.const(0.0),), ControlSet.reals())
    law = synthesize(system, scalar_spec(radius=0.1))
    with pytest.raises(SynthesisError) as info:
        law.evaluate([1.0])
    assert info.value.region == "k2" and info.value.result.implication == "I"


def test_certificate_example43(ex43):
    law = synthesize(ex43[0], cl.build_spec(ex43[1]))
    X = np.random.default_rng(6).uniform(-2, 2, (3, 600))
    rep = certify(law, X)
    assert rep.passed and rep["3.20"].hits > 0


def test_example51_law_admissible(ex51, ex51_feedback):
    law = ex51_feedback.law
    rng = np.random.default_rng(7)
    for c in rng.uniform(0.05, 5.0, (50, 2)):
        u = law(np.log(c))
        assert -1.0 <= u <= ex51.network.D_max - 1.0
