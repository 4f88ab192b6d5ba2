import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bdproc.model import (
    Boundary,
    GridFunction,
    ModelError,
    RateModel,
    apply_Q,
    build_scale_speed,
    classify_boundary,
    dirichlet_energy,
    forward_derivative,
    load_model,
    mean_explosion_time,
    second_order_identity_check,
)

REG = RateModel.regular_reference()
EXIT = RateModel.exit_reference()
NAT = RateModel.natural_reference()
ENT = RateModel.entrance_reference()


# --- hand-computed values -------------------------------------------------

def test_regular_scale_speed_by_hand():
    # mu_1 = b_0/a_1 = 2/3, mu_2 = mu_1 b_1/a_2 = 4/9; dc_k = 1/(2 b_k mu_k)
    ss = build_scale_speed(REG, 2)
    assert np.allclose(ss.mu[:3], [1, 2 / 3, 4 / 9], rtol=1e-15)
    assert np.allclose(ss.c[:3], [0, 0.25, 0.375], rtol=1e-15)


def test_geometric_closed_forms():
    # Regular: dc_k = 2^-(k+2), mu_k = (2/3)^k, so c_inf = 1/2
    ss = build_scale_speed(REG, 80)
    k = np.arange(81)
    assert np.allclose(ss.dc, 0.5 ** (k + 2), rtol=1e-13)
    assert ss.c[-1] == pytest.approx(0.5, rel=1e-15)
    # Exit: mu_k = 1, dc_k = 2^-(k+1)
    ex = build_scale_speed(EXIT, 40)
    assert np.all(ex.mu == 1.0)
    assert np.allclose(ex.dc, 0.5 ** (np.arange(41) + 1), rtol=1e-15)


def test_exit_sigma_is_two():
    # sigma = sum_k dc_k M_k = sum_k (k+1) 2^-(k+1) = 2
    bc = classify_boundary(EXIT, N=60)
    assert bc.kind is Boundary.EXIT
    assert abs(bc.sigma.value - 2.0) <= 1e-10


@pytest.mark.parametrize("model,kind", [(REG, Boundary.REGULAR), (EXIT, Boundary.EXIT),
                                        (NAT, Boundary.NATURAL), (ENT, Boundary.ENTRANCE)])
def test_reference_classes(model, kind):
    assert classify_boundary(model, N=60).kind is kind
    assert model.analytic_boundary() is kind


def test_slowly_varying_family_is_inconclusive_at_small_N():
    bc = classify_boundary(RateModel.power(1.5), N=5, window=5)
    assert bc.kind is Boundary.INCONCLUSIVE


def test_divergence_certificate_past_double_range():
    ss = build_scale_speed(ENT, 1100)   # dc_k = 2^(k-1)
    assert ss.certificate is not None


# --- expected explosion time: 3-state absorbing oracle ---------------------

@pytest.mark.parametrize("model", [REG, EXIT, RateModel.explicit([0, 2, 5, 1], [1, 3, 7, 1])])
def test_mean_explosion_time_matches_absorbing_chain(model):
    """States 0,1,2 with absorption from 2 at rate b_2; exact mean absorption time by a linear solve."""
    N = 2
    a, b = model.rates(N)
    Q = np.zeros((3, 3))
    for k in range(3):
        Q[k, k] = -(a[k] + b[k])
        if k > 0:
            Q[k, k - 1] = a[k]
        if k < 2:
            Q[k, k + 1] = b[k]
    T = np.linalg.solve(-Q, np.ones(3))
    ss = build_scale_speed(model, N)
    assert np.allclose(mean_explosion_time(ss)[:3], T, rtol=1e-13)


def test_exit_mean_explosion_time_is_four():
    ss = build_scale_speed(EXIT, 80)
    assert mean_explosion_time(ss)[0] == pytest.approx(4.0, rel=1e-12)


# --- identities -----------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(fam=st.sampled_from([REG, EXIT, NAT, ENT]), N=st.integers(3, 80),
       seed=st.integers(0, 2**32 - 1))
def test_second_order_identity(fam, N, seed):
    F = np.random.default_rng(seed).standard_normal(N + 1)
    res = second_order_identity_check(fam, F, build_scale_speed(fam, N + 1))
    assert res.relative <= 1e-12


@settings(max_examples=40, deadline=None)
@given(r=st.floats(0.3, 4.0), ratio=st.floats(0.3, 4.0), scale=st.floats(0.1, 10.0), N=st.integers(2, 300))
def test_scale_speed_identities(r, ratio, scale, N):
    m = RateModel.geometric(r, ratio, scale)
    ss = build_scale_speed(m, N)
    try:
        a, b = m.rates(N + 1)
    except ModelError:
        return
    if not (np.all(np.isfinite(ss.mu)) and np.all(ss.mu > 0) and np.all(ss.mu < 1e300)):
        return
    assert np.max(np.abs(2 * ss.dc * b[: N + 1] * ss.mu[: N + 1] - 1)) <= 1e-14
    # detailed balance mu_k a_k = mu_{k-1} b_{k-1}
    lhs, rhs = ss.mu[1:] * a[1:], ss.mu[:-1] * b[:-1]
    assert np.max(np.abs(lhs - rhs) / rhs) <= 1e-14


@settings(max_examples=40, deadline=None)
@given(fam=st.sampled_from([REG, EXIT, NAT]), N=st.integers(3, 60), seed=st.integers(0, 2**32 - 1))
def test_green_identity(fam, N, seed):
    """sum_{k<=N} mu_k G(k) QF(k) = (1/2) G(N) F+(N) - E(F, G) on 0..N."""
    rng = np.random.default_rng(seed)
    F, G = rng.standard_normal(N + 2), rng.standard_normal(N + 2)
    ss = build_scale_speed(fam, N + 1)
    lhs = float(np.sum(ss.mu[: N + 1] * G[: N + 1] * apply_Q(fam, F).values))
    Fp = forward_derivative(F, ss).values
    rhs = 0.5 * G[N] * Fp[N] - dirichlet_energy(F[: N + 1], G[: N + 1], ss)
    scale = np.sum(ss.mu[: N + 1] * np.abs(G[: N + 1]) * (np.abs(Fp[: N + 1]) / ss.mu[: N + 1]).max())
    assert abs(lhs - rhs) <= 1e-12 * max(scale, 1.0)


def test_energy_is_symmetric_and_nonnegative():
    ss = build_scale_speed(REG, 30)
    rng = np.random.default_rng(1)
    F, G = rng.standard_normal(31), rng.standard_normal(31)
    assert dirichlet_energy(F, G, ss) == pytest.approx(dirichlet_energy(G, F, ss), rel=1e-14)
    assert dirichlet_energy(F, F, ss) >= 0
    assert dirichlet_energy(np.ones(31), F, ss) == 0.0
    Fb, Gb = GridFunction(F, boundary=1.0), GridFunction(G, boundary=2.0)
    assert dirichlet_energy(Fb, Gb, ss, kappa=0.5) == pytest.approx(dirichlet_energy(F, G, ss) + 1.0)
    with pytest.raises(ModelError):
        dirichlet_energy(F, G, ss, kappa=0.5)


def test_forward_derivative_reports_cauchy_gap():
    ss = build_scale_speed(REG, 20)
    F = GridFunction(ss.c[:21])          # F = c has F+ = 1 everywhere
    d = forward_derivative(F, ss)
    assert np.allclose(d.values, 1.0, rtol=1e-12)
    assert d.cauchy_gap <= 1e-10


# --- model files ----------------------------------------------------------

def test_load_model_roundtrip(tmp_path):
    for m in (REG, EXIT, NAT, RateModel.explicit([0, 1, 2], [1, 1, 1])):
        p = tmp_path / "m.json"
        p.write_text(json.dumps(m.to_json()))
        assert load_model(p) == m


@pytest.mark.parametrize("doc", [
    "not json", "[1, 2]", '{"family": "cubic"}', '{"family": "geometric", "params": {"r": -1}}',
    '{"family": "geometric", "params": {"r": 2, "q": 1}}', '{"a": [0, 1], "b": [1, 1]}',
    '{"a": [1, 1, 1], "b": [1, 1, 1]}', '{"a": [0, 1, "x"], "b": [1, 1, 1]}', '{"b": [1, 2, 3]}',
])
def test_load_model_rejects(tmp_path, doc):
    p = tmp_path / "bad.json"
    p.write_text(doc)
    with pytest.raises(ModelError):
        load_model(p)


def test_explicit_model_range():
    m = RateModel.explicit([0, 1, 2, 3], [1, 1, 1, 1])
    assert m.max_index == 3
    with pytest.raises(ModelError):
        m.rates(5)
    assert REG.max_index is None


def test_rates_overflow_raises():
    with pytest.raises(ModelError):
        REG.rates(1000)
    # the scale data fall back to logs and stay finite
    ss = build_scale_speed(REG, 700)
    assert math.isfinite(ss.c[-1])
