import math

import numpy as np
import pytest

from bdproc.model import RateModel, build_scale_speed, mean_explosion_time
from bdproc.resolvent import AdmissibilityError, BoundaryTriple, ReturnDistribution
from bdproc.semigroup import build_generator, uniformized_transition
from bdproc.simulate import (
    ALIVE,
    BAILOUT,
    FLY_RESTART,
    KILL,
    KILLED,
    SimConfig,
    UnsupportedConstruction,
    estimate_transition,
    sample_paths,
    simulate_doob,
    simulate_feller,
    simulate_minimal,
)

REG = RateModel.regular_reference()
EXIT = RateModel.exit_reference()
FELLER = BoundaryTriple.from_dict({0: 1.0, 2: 0.5}, 0.5, 1.0)
D0 = ReturnDistribution.delta(0)


def _explosion_times(model, n, cap=48):
    cfg = SimConfig(horizon=1e6, n_cap=cap, seed=7)
    out = []
    for p in range(n):
        rec = simulate_minimal(model, 0, cfg, path=p)
        assert rec.kinds[-1] == KILL
        out.append(rec.times[-1])
    return np.asarray(out)


@pytest.mark.parametrize("model", [EXIT, REG])
def test_mean_explosion_time_by_simulation(model):
    # exit family: E_0 eta = 2 sigma = 4
    want = mean_explosion_time(build_scale_speed(model, 200))[0]
    eta = _explosion_times(model, 4000)
    se = eta.std(ddof=1) / math.sqrt(eta.size)
    assert abs(eta.mean() - want) <= 4 * se


def test_explosion_time_second_moment():
    """E_0 eta^2 = 2 h2(0) where Q h1 = -1 and Q h2 = -h1, with h at infinity 0."""
    N = 200
    ss = build_scale_speed(EXIT, N)
    h1 = mean_explosion_time(ss)
    # solve Q h2 = -h1 with the same scale form: h(k) = 2 sum_{j>=k} dc_j sum_{i<=j} mu_i g(i)
    inner = np.cumsum(ss.mu[: N + 1] * h1)
    h2 = 2.0 * np.cumsum((ss.dc * inner)[::-1])[::-1]
    eta = _explosion_times(EXIT, 4000)
    m2 = np.mean(eta ** 2)
    se = np.std(eta ** 2, ddof=1) / math.sqrt(eta.size)
    assert abs(m2 - 2 * h2[0]) <= 4 * se


def test_fixed_seed_is_deterministic_and_chunk_independent():
    obs = (0.5, 1.0)
    b1 = sample_paths(REG, "feller", 0, obs, SimConfig(paths=2000, chunk=500), triple=FELLER)
    b2 = sample_paths(REG, "feller", 0, obs, SimConfig(paths=2000, chunk=333), triple=FELLER)
    b3 = sample_paths(REG, "feller", 0, obs, SimConfig(paths=2000, seed=1), triple=FELLER)
    assert np.array_equal(b1.states, b2.states)
    assert np.array_equal(b1.events, b2.events)
    assert not np.array_equal(b1.states, b3.states)


@pytest.mark.slow
def test_worker_pool_matches_serial():
    obs = (0.5, 1.0)
    one = sample_paths(REG, "doob", 1, obs, SimConfig(paths=3000, chunk=1000, jobs=1), pi=D0)
    two = sample_paths(REG, "doob", 1, obs, SimConfig(paths=3000, chunk=1000, jobs=2), pi=D0)
    assert np.array_equal(one.states, two.states)


def test_single_paths_match_batch():
    cfg = SimConfig(paths=200, horizon=1.0)
    batch = sample_paths(REG, "doob", 0, (0.25, 1.0), cfg, pi=D0)
    recs = [simulate_doob(REG, D0, 0, cfg, path=p) for p in range(200)]
    for m, t in enumerate((0.25, 1.0)):
        assert [r.state_at(t) for r in recs] == list(batch.states[:, m])
    for j in range(3):
        assert estimate_transition(recs, 0, j, 1.0) == estimate_transition(batch, 0, j, 1.0)


@pytest.mark.parametrize("mode", ["minimal", "doob", "feller"])
def test_path_invariants(mode):
    cfg = SimConfig(horizon=3.0)
    for p in range(50):
        if mode == "minimal":
            rec = simulate_minimal(REG, 0, cfg, path=p)
        elif mode == "doob":
            rec = simulate_doob(REG, ReturnDistribution(((0, 0.9),), 0.1), 0, cfg, path=p)
        else:
            rec = simulate_feller(REG, None, FELLER, 0, cfg, path=p)
        rec.check_invariants()
        assert rec.status in (ALIVE, KILLED)
        lines = rec.dump_lines()
        assert len(lines) == len(rec.times)
        if np.any(rec.kinds == FLY_RESTART):
            assert any("FLY→" in s for s in lines)
        if rec.status == KILLED:
            assert lines[-1].endswith("KILL")


def test_doob_paths_restart():
    cfg = SimConfig(horizon=5.0)
    rec = next(r for r in (simulate_doob(REG, D0, 0, cfg, path=p) for p in range(100)) if r.restarts > 0)
    idx = np.nonzero(rec.kinds == FLY_RESTART)[0]
    assert np.all(rec.states[idx] == 0)
    assert np.all(rec.states[idx - 1] == cfg.n_cap)


def test_non_explosive_minimal_stays_alive():
    batch = sample_paths(RateModel.natural_reference(), "minimal", 0, (1.0,), SimConfig(paths=500))
    assert np.all(batch.status == ALIVE)
    assert np.all(batch.flights == 0)


def test_non_explosive_bailout_at_cap():
    m = RateModel.constant(1.0, 50.0)     # natural boundary, strong upward drift
    batch = sample_paths(m, "minimal", 0, (5.0,), SimConfig(paths=50, horizon=5.0, n_cap=10))
    assert np.all(batch.status == BAILOUT)
    assert np.all(batch.states == -2)


@pytest.mark.parametrize("mode,kw", [
    ("minimal", {}),
    ("doob", {"pi": D0}),
    ("feller", {"triple": FELLER}),
    ("feller", {"triple": BoundaryTriple.from_dict({}, 1.0, 1.0)}),
])
def test_agreement_with_uniformization(mode, kw):
    cfg = SimConfig(paths=20000, horizon=1.0)
    gkw = {"pi": kw["pi"]} if "pi" in kw else {"triple": kw.get("triple")} if "triple" in kw else {}
    P = uniformized_transition(build_generator(REG, None, cfg.n_cap - 1, **gkw), 1.0).p
    batch = sample_paths(REG, mode, 1, (1.0,), cfg, **kw)
    for j in range(4):
        est, _ = estimate_transition(batch, 1, j, 1.0)
        se = math.sqrt(P[1, j] * (1 - P[1, j]) / cfg.paths)
        assert abs(est - P[1, j]) <= 4 * se


def test_antithetic_pairs_share_streams():
    cfg = SimConfig(paths=2000, antithetic=True)
    batch = sample_paths(REG, "doob", 0, (0.5,), cfg, pi=D0)
    again = sample_paths(REG, "doob", 0, (0.5,), cfg, pi=D0)
    assert np.array_equal(batch.states, again.states)
    P = uniformized_transition(build_generator(REG, None, 47, pi=D0), 0.5).p
    est, _ = estimate_transition(batch, 0, 0, 0.5)
    assert abs(est - P[0, 0]) <= 4 * math.sqrt(P[0, 0] * (1 - P[0, 0]) / 2000)


def test_feller_refusals():
    with pytest.raises(UnsupportedConstruction):
        sample_paths(REG, "feller", 0, (1.0,), SimConfig(paths=10),
                     triple=BoundaryTriple((), 0.0, 1.0, ("power", 1.0, 1.0)))
    with pytest.raises(AdmissibilityError):
        sample_paths(REG, "feller", 0, (1.0,), SimConfig(paths=10), triple=BoundaryTriple.from_dict({0: 1.0}))
    with pytest.raises(AdmissibilityError):
        sample_paths(REG, "feller", 0, (1.0,), SimConfig(paths=10), triple=BoundaryTriple.from_dict({}, 0.0, 1.0))
    with pytest.raises(AdmissibilityError):
        sample_paths(EXIT, "feller", 0, (1.0,), SimConfig(paths=10), triple=FELLER)


def test_input_validation():
    with pytest.raises(ValueError):
        sample_paths(REG, "doob", 0, (1.0,), SimConfig(paths=10), pi=ReturnDistribution.delta(60))
    with pytest.raises(ValueError):
        sample_paths(REG, "minimal", 60, (1.0,), SimConfig(paths=10))
    with pytest.raises(ValueError):
        sample_paths(REG, "minimal", 0, (2.0,), SimConfig(paths=10, horizon=1.0))
    with pytest.raises(ValueError):
        sample_paths(REG, "ray", 0, (1.0,), SimConfig(paths=10))
    with pytest.raises(ValueError):
        SimConfig(n_cap=3)
    with pytest.raises(ValueError):
        SimConfig(residual="exact")


def test_dump_lines_format():
    rec = simulate_minimal(EXIT, 0, SimConfig(horizon=1e6), path=3)
    lines = rec.dump_lines()
    assert lines[0] == "0.0,0"
    assert lines[-1].endswith(",KILL")
    for s in lines:
        t, state = s.split(",")
        float(t)
        assert state == "KILL" or state.startswith("FLY→") or state.isdigit()
