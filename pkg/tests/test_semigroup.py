import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from bdproc.model import RateModel
from bdproc.resolvent import BoundaryClassError, BoundaryTriple, ReturnDistribution, wang_yang_resolvent
from bdproc.semigroup import (
    SplittingError,
    build_generator,
    convergence_experiment,
    laplace_crosscheck,
    transition_path,
    uniformized_transition,
)

REG = RateModel.regular_reference()
ELASTIC = BoundaryTriple.from_dict({}, 1.0, 1.0)
FELLER = BoundaryTriple.from_dict({0: 1.0, 2: 0.5}, 0.5, 1.0)


# moderate boundary speeds: expm itself loses accuracy on very stiff generators
@pytest.mark.parametrize("kw", [{}, {"pi": ReturnDistribution.delta(0), "boundary_scale": 50.0},
                                {"triple": ELASTIC, "boundary_scale": 50.0},
                                {"triple": FELLER, "boundary_scale": 50.0}])
@pytest.mark.parametrize("t", [0.1, 0.5, 2.0])
def test_uniformization_matches_expm(kw, t):
    gen = build_generator(RateModel.geometric(2.0, 1.5), None, 12, **kw)
    ref = expm(t * gen.matrix)
    ev = uniformized_transition(gen, t)
    assert np.allclose(ev.p, ref, rtol=1e-10, atol=1e-13)
    assert ev.error_bound <= 1e-12


def test_generator_rows():
    gen = build_generator(REG, None, 30, triple=FELLER)
    G = gen.matrix
    off = G - np.diag(np.diag(G))
    assert np.all(off >= 0)
    assert np.allclose(G.sum(axis=1) + gen.killing, 0.0, atol=1e-6 * np.abs(np.diag(G)))
    assert gen.b == 31
    assert build_generator(REG, None, 30).b is None


@pytest.mark.parametrize("kw", [{"pi": ReturnDistribution.delta(0)}, {"triple": FELLER}, {"triple": ELASTIC}])
def test_semigroup_property_at_full_depth(kw):
    gen = build_generator(REG, None, 60, **kw)
    P1 = uniformized_transition(gen, 0.3).p
    P2 = uniformized_transition(gen, 0.7).p
    P = uniformized_transition(gen, 1.0).p
    assert np.all(P >= 0)
    assert np.all(P.sum(axis=1) <= 1 + 1e-12)
    assert np.max(np.abs(P1 @ P2 - P)) <= 1e-9


def test_doob_chain_is_honest_and_elastic_loses_mass():
    pd = uniformized_transition(build_generator(REG, None, 100, pi=ReturnDistribution.delta(0)), 1.0).p
    assert np.max(np.abs(pd.sum(axis=1) - 1)) <= 1e-10
    pe = uniformized_transition(build_generator(REG, None, 100, triple=ELASTIC), 1.0).p
    assert pe.sum(axis=1)[0] < 1 - 1e-3


def test_transition_path_consistency():
    gen = build_generator(REG, None, 40, triple=FELLER)
    path = transition_path(gen, 0.25, 4, 0)
    P = uniformized_transition(gen, 1.0).p
    assert np.allclose(path[-1], P[0], atol=1e-10)


def test_zero_time_is_identity():
    gen = build_generator(REG, None, 10)
    assert np.array_equal(uniformized_transition(gen, 0.0).p, np.eye(11))
    with pytest.raises(ValueError):
        uniformized_transition(gen, -1.0)


def test_split_cap():
    with pytest.raises(SplittingError):
        uniformized_transition(build_generator(REG, None, 200), 1.0, max_splits=10)


@settings(max_examples=10, deadline=None)
@given(t=st.floats(0.05, 3.0), g=st.floats(0.0, 2.0), beta=st.floats(0.1, 2.0))
def test_elastic_rows_substochastic(t, g, beta):
    gen = build_generator(REG, None, 30, triple=BoundaryTriple.from_dict({}, g, beta))
    P = uniformized_transition(gen, t).p
    assert np.all(P >= 0)
    rs = P.sum(axis=1)
    assert np.all(rs <= 1 + 1e-12)
    if g == 0:
        assert np.max(np.abs(rs - 1)) <= 1e-10


def test_generator_resolvent_dispatch():
    gen = build_generator(REG, None, 50, triple=FELLER)
    ev = gen.resolvent(1.0)
    assert np.array_equal(ev.psi, wang_yang_resolvent(REG, None, FELLER, 1.0, 50).psi)


@pytest.mark.parametrize("kw", [{}, {"pi": ReturnDistribution.delta(0)}, {"triple": FELLER}])
def test_laplace_crosscheck(kw):
    gen = build_generator(REG, None, 60, **kw)
    lc = laplace_crosscheck(gen, 1.0, 0, 0)
    assert lc.rel_gap <= 1e-7
    assert lc.quad_error <= 1e-7


def test_laplace_needs_long_horizon():
    with pytest.raises(ValueError):
        laplace_crosscheck(build_generator(REG, None, 10), 1.0, 0, 0, T=5.0)


# --- approximation by Feller triples ---------------------------------------

def test_convergence_decreasing():
    target = BoundaryTriple.geometric_nu(1.0, 0.5, 0.0, 1.0)
    rows = convergence_experiment(REG, target, (5, 10, 20, 40), (1.0,), 100)
    gaps = [r.sup_gap_resolvent for r in rows]
    tg = [r.sup_gap_transition for r in rows]
    assert all(x > y for x, y in zip(gaps, gaps[1:]))
    assert all(x > y for x, y in zip(tg, tg[1:]))
    assert gaps[-1] <= 1e-4


def test_convergence_exact_once_support_covered():
    rows = convergence_experiment(REG, FELLER, (1, 2, 5), (1.0, 2.0), 60)
    last = [r for r in rows if r.n == 5]
    assert all(r.sup_gap_resolvent == 0.0 and r.sup_gap_transition == 0.0 for r in last)
    assert rows[0].sup_gap_resolvent > 0


def test_convergence_with_beta_schedule():
    target = BoundaryTriple.geometric_nu(1.0, 0.5, 0.0, 0.0)
    rows = convergence_experiment(REG, target, (5, 10, 20), (1.0,), 80)
    gaps = [r.sup_gap_resolvent for r in rows]
    assert all(x > y for x, y in zip(gaps, gaps[1:]))


def test_convergence_refuses_non_regular():
    with pytest.raises(BoundaryClassError):
        convergence_experiment(RateModel.exit_reference(), FELLER.with_beta(0.0), (5,), (1.0,), 50)
