"""Jump-chain Monte Carlo with flying times, piecing-out regeneration and elastic killing.

Minimal and Doob modes run the embedded jump chain up to the explosion cap
``N_cap``.  Reaching the cap is a flying time; the remaining flight lasts the
mean tail ``m(N_cap) = E_{N_cap}[eta]`` (or 0), after which the path is killed
(minimal) or restarted from ``y ~ pi`` (Doob).  The mean tail makes the
simulated explosion time unbiased in expectation by the strong Markov property.

Feller mode (``X^kappa`` pieced out by ``pi``) meets a different obstacle: a
regular boundary that reflects is touched infinitely often, and a truncated
jump chain makes about ``sum_{j<L} mu_j q_j / sum_{j<L} mu_j`` jumps per unit time
(``~2^L`` for the regular reference family).  Excursions above ``L-1`` started
from ``L`` are therefore resolved in one draw, exactly in law:

* the excursion hits infinity before ``L-1`` with probability
  ``h = dc_{L-1} / (c_inf - c_{L-1})``;
* from infinity, ``X^kappa`` reaches ``L-1`` before its death with probability
  ``rho = 1 / (1 + 2 kappa (c_inf - c_{L-1}))``.

So the path returns to ``L-1`` with probability ``(1-h) + h rho`` and
otherwise dies at infinity, where ``pi`` picks the restart state or the
cemetery.  The excursion's duration is replaced by its mean
``2 dc_{L-1} sum_{i>=L} mu_i``; the fraction of time spent above ``L`` is
about ``(2/3)^L`` on the reference family and only its fluctuation is
dropped.

Random numbers: path ``p`` draws from Philox keyed by ``(seed, p)``.  A
block of uniforms is pre-drawn per path; a path that exhausts its block is
re-run with a longer block from the same stream, so results do not depend on
block size or chunking.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from numba import njit

from .model import Boundary, RateModel, ScaleSpeed, build_scale_speed
from .resolvent import (
    AdmissibilityError,
    BoundaryTriple,
    ReturnDistribution,
    boundary_class,
    check_admissible,
)

__all__ = [
    "ALIVE",
    "BAILOUT",
    "KILLED",
    "PathBatch",
    "PathRecord",
    "SimConfig",
    "UnsupportedConstruction",
    "estimate_transition",
    "sample_paths",
    "simulate_doob",
    "simulate_feller",
    "simulate_minimal",
]

ALIVE, KILLED, BAILOUT, _OUT_OF_RANDOMNESS = 0, 1, 2, 3
STATUS_NAMES = {ALIVE: "Alive", KILLED: "Killed", BAILOUT: "TruncationBailout"}

# event kinds in a PathRecord
JUMP, FLY_RESTART, EXCURSION, KILL, START = 0, 1, 2, 3, 4
DEAD = -1


class UnsupportedConstruction(ValueError):
    """No pathwise construction exists for the requested process."""


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    ``n_cap`` is the explosion cap for minimal and Doob paths;
    ``agg_level`` the level above which Feller excursions are aggregated.
    ``residual`` is ``"mean_tail"`` or ``"zero"``.
    """

    n_cap: int = 48
    residual: str = "mean_tail"
    horizon: float = 1.0
    paths: int = 10_000
    seed: int = 20231015
    antithetic: bool = False
    agg_level: int = 10
    max_events: int = 50_000_000
    block: int = 4096
    chunk: int = 4096
    jobs: int = 1

    def __post_init__(self) -> None:
        if self.n_cap < 10:
            raise ValueError("n_cap must be at least 10")
        if self.paths < 1:
            raise ValueError("paths must be at least 1")
        if self.residual not in ("mean_tail", "zero"):
            raise ValueError("residual must be 'mean_tail' or 'zero'")
        if self.horizon < 0:
            raise ValueError("horizon must be non-negative")
        if not 2 <= self.agg_level:
            raise ValueError("agg_level must be at least 2")
        if not 0 <= self.seed < 2**63:
            raise ValueError("seed must be a non-negative 63-bit integer")


# --------------------------------------------------------------------------
# kernel
# --------------------------------------------------------------------------

@njit(cache=True)
def _run(start, a, b, cap, agg, residual, p_return, pi_state, pi_cdf, explosive,
         horizon, obs, u, flip, max_events, out_obs, rec_t, rec_s, rec_k, record):
    """Simulate one path.  Returns (status, events, flights, restarts, used, n_rec, t_end)."""
    nu_ = u.shape[0]
    nobs = obs.shape[0]
    ui = 0
    oi = 0
    nrec = 0
    events = 0
    flights = 0
    restarts = 0
    t = 0.0
    k = start
    if record:
        rec_t[0] = 0.0
        rec_s[0] = k
        rec_k[0] = 4
        nrec = 1
    while True:
        if ui + 2 > nu_:
            return 3, events, flights, restarts, ui, nrec, t
        if events >= max_events:
            for r in range(oi, nobs):
                out_obs[r] = -2
            return 2, events, flights, restarts, ui, nrec, t
        x = u[ui]
        ui += 1
        if flip:
            e = -math.log(x) if x > 0.0 else 36.7368005696771
        else:
            e = -math.log1p(-x)
        q = a[k] + b[k]
        tn = t + e / q
        while oi < nobs and obs[oi] < tn:
            out_obs[oi] = k
            oi += 1
        if tn > horizon:
            return 0, events, flights, restarts, ui, nrec, horizon
        t = tn
        events += 1
        if u[ui] * q < b[k]:
            k += 1
        else:
            k -= 1
        ui += 1
        if record:
            if nrec >= rec_t.shape[0]:
                return 2, events, flights, restarts, ui, nrec, t
            rec_t[nrec] = t
            rec_s[nrec] = k
            rec_k[nrec] = 0
            nrec += 1
        # boundary handling; the loop repeats if a restart lands at or above cap
        while k >= cap:
            if not explosive:
                for r in range(oi, nobs):
                    out_obs[r] = -2
                return 2, events, flights, restarts, ui, nrec, t
            tf = t + residual
            while oi < nobs and obs[oi] < tf:
                out_obs[oi] = cap
                oi += 1
            if tf > horizon:
                return 0, events, flights, restarts, ui, nrec, horizon
            t = tf
            if ui + 1 > nu_:
                return 3, events, flights, restarts, ui, nrec, t
            if agg:
                v = u[ui]
                ui += 1
                if v < p_return:
                    k = cap - 1
                    kind = 2
                    y = k
                else:
                    flights += 1
                    w = (v - p_return) / (1.0 - p_return)
                    y = -1
                    for r in range(pi_cdf.shape[0]):
                        if w < pi_cdf[r]:
                            y = pi_state[r]
                            break
                    kind = 1 if y >= 0 else 3
            else:
                flights += 1
                if pi_cdf.shape[0] == 1 and pi_state[0] < 0:
                    y = -1
                else:
                    w = u[ui]
                    ui += 1
                    y = -1
                    for r in range(pi_cdf.shape[0]):
                        if w < pi_cdf[r]:
                            y = pi_state[r]
                            break
                kind = 1 if y >= 0 else 3
            if record:
                if nrec >= rec_t.shape[0]:
                    return 2, events, flights, restarts, ui, nrec, t
                rec_t[nrec] = t
                rec_s[nrec] = y
                rec_k[nrec] = kind
                nrec += 1
            if y < 0:
                for r in range(oi, nobs):
                    out_obs[r] = -1
                return 1, events, flights, restarts, ui, nrec, t
            if kind == 1:
                restarts += 1
            k = y


@njit(cache=True)
def _run_batch(starts, a, b, cap, agg, residual, p_return, pi_state, pi_cdf, explosive,
               horizon, obs, U, flips, max_events, out_obs, status, events, flights, restarts, used):
    dummy_t = np.empty(1)
    dummy_i = np.empty(1, dtype=np.int64)
    for p in range(U.shape[0]):
        st, ev, fl, rs, used_, nrec, tend = _run(
            starts[p], a, b, cap, agg, residual, p_return, pi_state, pi_cdf, explosive,
            horizon, obs, U[p], flips[p], max_events, out_obs[p], dummy_t, dummy_i, dummy_i, False)
        status[p] = st
        events[p] = ev
        flights[p] = fl
        restarts[p] = rs
        used[p] = used_


# --------------------------------------------------------------------------
# prepared dynamics
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class _Dynamics:
    mode: str
    a: np.ndarray
    b: np.ndarray
    cap: int
    agg: bool
    residual: float
    p_return: float
    pi_state: np.ndarray
    pi_cdf: np.ndarray
    explosive: bool
    info: dict


def _pi_arrays(weights: Sequence[tuple[int, float]], dead: float) -> tuple[np.ndarray, np.ndarray]:
    states = [k for k, _ in weights] + [DEAD]
    probs = np.array([v for _, v in weights] + [dead], dtype=float)
    probs /= probs.sum()
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    keep = probs > 0
    keep[-1] = True if dead > 0 or len(weights) == 0 else keep[-1]
    st = np.array(states, dtype=np.int64)[keep]
    cdf = cdf[keep]
    cdf[-1] = 1.0
    return st, cdf


def _c_inf(model: RateModel, level: int) -> float:
    far = max(4 * level, level + 200)
    mi = model.max_index
    if mi is not None:
        far = min(far, mi - 1)
    return float(build_scale_speed(model, far).c[-1])


def _prepare(model: RateModel, mode: str, cfg: SimConfig, pi: ReturnDistribution | None = None,
             triple: BoundaryTriple | None = None) -> _Dynamics:
    kind = boundary_class(model)
    if mode in ("minimal", "doob"):
        cap = cfg.n_cap
        a, b = model.rates(cap)
        residual = 0.0
        if cfg.residual == "mean_tail" and kind.explosive:
            far = max(4 * cap, cap + 200)
            mi = model.max_index
            if mi is not None:
                far = min(far, mi - 1)
            ss = build_scale_speed(model, far)
            residual = float(2.0 * np.sum(ss.sigma_terms[cap:]))
        if mode == "minimal" or pi is None:
            st, cdf = np.array([DEAD], dtype=np.int64), np.array([1.0])
        else:
            if any(k >= cap for k, _ in pi.weights):
                raise ValueError(f"pi charges states at or above the cap {cap}")
            st, cdf = _pi_arrays(pi.weights, pi.dead)
        return _Dynamics(mode, a, b, cap, False, residual, 0.0, st, cdf, kind.explosive,
                         {"residual": residual, "class": kind.value})
    # feller
    L = cfg.agg_level
    a, b = model.rates(L)
    ss = build_scale_speed(model, L + 1)
    cinf = _c_inf(model, L)
    gap = cinf - float(ss.c[L - 1])
    h = float(ss.dc[L - 1]) / gap
    kappa = triple.kappa
    rho = 1.0 / (1.0 + 2.0 * kappa * gap)
    p_return = (1.0 - h) + h * rho
    far = max(4 * L, L + 200)
    mi = model.max_index
    if mi is not None:
        far = min(far, mi - 1)
    ssf = build_scale_speed(model, far)
    duration = float(2.0 * ss.dc[L - 1] * np.sum(ssf.mu[L:]))
    nu = triple.nu_weights(L - 1)
    weights = [(k, float(v)) for k, v in enumerate(nu) if v > 0]
    st, cdf = _pi_arrays(weights, triple.gamma)
    info = {"kappa": kappa, "rho": rho, "h": h, "p_return": p_return,
            "excursion_mean": duration, "nu_dropped": triple.tail_mass(L - 1), "class": kind.value}
    return _Dynamics("feller", a, b, L, True, duration, p_return, st, cdf, True, info)


def _check_feller(model: RateModel, triple: BoundaryTriple) -> None:
    if math.isinf(triple.total_mass):
        raise UnsupportedConstruction(
            "no pathwise construction is known for |nu| = infinity; "
            "use the approximation experiment (converge) instead")
    if triple.beta <= 0:
        raise AdmissibilityError("beta>0", "Feller simulation needs beta > 0; use Doob mode for beta = 0")
    if triple.total_mass + triple.gamma <= 0:
        raise AdmissibilityError("|nu|+gamma>0", "the restart law pi is undefined when |nu| + gamma = 0")
    kind = check_admissible(model, triple)
    if kind is not Boundary.REGULAR:
        raise AdmissibilityError("boundary", f"Feller simulation needs a regular boundary, got {kind.value}")


# --------------------------------------------------------------------------
# single paths
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PathRecord:
    """One trajectory.

    ``times``/``states``/``kinds`` list the events.  Kinds: 0 jump, 1 flying
    time followed by a restart at ``state``, 2 aggregated excursion ending at
    ``state``, 3 kill (state -1), 4 start.  A jump to ``cap`` precedes every
    flying time; the state is ``cap`` while the flight lasts.
    """

    start: int
    times: np.ndarray
    states: np.ndarray
    kinds: np.ndarray
    status: int
    seed: int
    stream: int
    cap: int
    horizon: float
    flights: int
    restarts: int

    @property
    def status_name(self) -> str:
        return STATUS_NAMES[self.status]

    def state_at(self, t: float) -> int:
        """Right-continuous state at time t (-1 once killed)."""
        if t > self.horizon:
            raise ValueError("time beyond the simulated horizon")
        idx = int(np.searchsorted(self.times, t, side="right")) - 1
        return int(self.states[idx])

    def check_invariants(self) -> None:
        if np.any(np.diff(self.times) < 0):
            raise AssertionError("event times decrease")
        for m in range(1, len(self.times)):
            if self.kinds[m] == JUMP and abs(int(self.states[m]) - int(self.states[m - 1])) != 1:
                raise AssertionError(f"non-nearest-neighbour jump at event {m}")
            if self.kinds[m] in (FLY_RESTART, KILL, EXCURSION) and self.states[m - 1] < self.cap:
                raise AssertionError(f"boundary event at {m} without reaching the cap")

    def dump_lines(self) -> list[str]:
        out = []
        for t, s, k in zip(self.times, self.states, self.kinds):
            if k == FLY_RESTART:
                out.append(f"{float(t)!r},FLY→{int(s)}")
            elif k == KILL:
                out.append(f"{float(t)!r},KILL")
            else:
                out.append(f"{float(t)!r},{int(s)}")
        return out


def _uniforms(seed: int, stream: int, n: int) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(key=np.array([seed, stream], dtype=np.uint64)))
    return gen.random(n)


def _stream(cfg: SimConfig, path: int) -> tuple[int, bool]:
    return (path // 2, bool(path % 2)) if cfg.antithetic else (path, False)


def _single(dyn: _Dynamics, start: int, cfg: SimConfig, path: int) -> PathRecord:
    if not 0 <= start < dyn.cap:
        raise ValueError(f"start must lie in 0..{dyn.cap - 1}")
    stream, flip = _stream(cfg, path)
    block = cfg.block
    cap_rec = 4096
    while True:
        u = _uniforms(cfg.seed, stream, block)
        rt = np.empty(cap_rec)
        rs = np.empty(cap_rec, dtype=np.int64)
        rk = np.empty(cap_rec, dtype=np.int64)
        obs = np.empty(0)
        st, ev, fl, res, used, nrec, tend = _run(
            start, dyn.a, dyn.b, dyn.cap, dyn.agg, dyn.residual, dyn.p_return, dyn.pi_state,
            dyn.pi_cdf, dyn.explosive, cfg.horizon, obs, u, flip, cfg.max_events,
            np.empty(0, dtype=np.int64), rt, rs, rk, True)
        if st == _OUT_OF_RANDOMNESS:
            block *= 4
            continue
        if st == BAILOUT and nrec >= cap_rec and ev < cfg.max_events:
            cap_rec *= 4
            continue
        return PathRecord(start, rt[:nrec].copy(), rs[:nrec].copy(), rk[:nrec].copy(), int(st),
                          cfg.seed, path, dyn.cap, cfg.horizon, int(fl), int(res))


def simulate_minimal(model: RateModel, start: int, cfg: SimConfig, path: int = 0) -> PathRecord:
    return _single(_prepare(model, "minimal", cfg), start, cfg, path)


def simulate_doob(model: RateModel, pi: ReturnDistribution, start: int, cfg: SimConfig,
                  path: int = 0) -> PathRecord:
    return _single(_prepare(model, "doob", cfg, pi=pi), start, cfg, path)


def simulate_feller(model: RateModel, ss: ScaleSpeed | None, triple: BoundaryTriple, start: int,
                    cfg: SimConfig, path: int = 0) -> PathRecord:
    _check_feller(model, triple)
    return _single(_prepare(model, "feller", cfg, triple=triple), start, cfg, path)


# --------------------------------------------------------------------------
# batches
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PathBatch:
    """States of many paths at fixed observation times.

    ``states[p, m]`` is the state of path p at ``obs[m]``: a grid state,
    ``cap`` while in flight, -1 once killed, -2 after a bailout.
    """

    start: int
    obs: np.ndarray
    states: np.ndarray
    status: np.ndarray
    events: np.ndarray
    flights: np.ndarray
    restarts: np.ndarray
    cap: int
    info: dict

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]


def _chunk_worker(args):
    dyn, start, obs, cfg, p0, p1, block = args
    n = p1 - p0
    out = np.full((n, len(obs)), -2, dtype=np.int64)
    status = np.empty(n, dtype=np.int64)
    events = np.empty(n, dtype=np.int64)
    flights = np.empty(n, dtype=np.int64)
    restarts = np.empty(n, dtype=np.int64)
    used = np.empty(n, dtype=np.int64)
    U = np.empty((n, block))
    flips = np.zeros(n, dtype=np.bool_)
    for r in range(n):
        stream, flips[r] = _stream(cfg, p0 + r)
        U[r] = _uniforms(cfg.seed, stream, block)
    starts = np.full(n, start, dtype=np.int64)
    _run_batch(starts, dyn.a, dyn.b, dyn.cap, dyn.agg, dyn.residual, dyn.p_return, dyn.pi_state,
               dyn.pi_cdf, dyn.explosive, cfg.horizon, obs, U, flips, cfg.max_events,
               out, status, events, flights, restarts, used)
    for r in np.nonzero(status == _OUT_OF_RANDOMNESS)[0]:
        blk = block
        while True:
            blk *= 4
            stream, flip = _stream(cfg, p0 + int(r))
            u = _uniforms(cfg.seed, stream, blk)
            row = np.full(len(obs), -2, dtype=np.int64)
            st, ev, fl, res, us, nrec, tend = _run(
                start, dyn.a, dyn.b, dyn.cap, dyn.agg, dyn.residual, dyn.p_return, dyn.pi_state,
                dyn.pi_cdf, dyn.explosive, cfg.horizon, obs, u, flip, cfg.max_events, row,
                np.empty(1), np.empty(1, dtype=np.int64), np.empty(1, dtype=np.int64), False)
            if st != _OUT_OF_RANDOMNESS:
                out[r], status[r], events[r], flights[r], restarts[r], used[r] = row, st, ev, fl, res, us
                break
    return p0, out, status, events, flights, restarts, used


def _pilot_block(dyn: _Dynamics, start: int, obs: np.ndarray, cfg: SimConfig) -> int:
    """Block length covering about 95% of paths, from a pilot of 64 paths.

    Only affects speed: a path that runs out is re-run with a longer prefix
    of its own stream.
    """
    n = min(64, cfg.paths)
    *_, used = _chunk_worker((dyn, start, obs, cfg, 0, n, 256))
    need = float(np.quantile(used, 0.95)) * 1.25 + 16
    return int(2 ** math.ceil(math.log2(max(need, 64))))


def resolve_jobs(jobs: int | None = None) -> int:
    if jobs is None or jobs <= 0:
        env = os.environ.get("BD_RAY_JOBS")
        jobs = int(env) if env else 1
    return max(1, int(jobs))


def sample_paths(model: RateModel, mode: str, start: int, obs_times: Sequence[float], cfg: SimConfig,
                 *, pi: ReturnDistribution | None = None,
                 triple: BoundaryTriple | None = None) -> PathBatch:
    """Run ``cfg.paths`` paths from ``start`` and record states at ``obs_times``."""
    if mode == "feller":
        if triple is None:
            raise ValueError("feller mode needs a triple")
        _check_feller(model, triple)
    elif mode == "doob":
        if pi is None:
            raise ValueError("doob mode needs pi")
    elif mode != "minimal":
        raise ValueError(f"unknown mode {mode!r}")
    obs = np.sort(np.asarray(obs_times, dtype=float))
    if obs.size and (obs[0] < 0 or obs[-1] > cfg.horizon):
        raise ValueError("observation times must lie in [0, horizon]")
    dyn = _prepare(model, mode, cfg, pi=pi, triple=triple)
    if not 0 <= start < dyn.cap:
        raise ValueError(f"start must lie in 0..{dyn.cap - 1}")
    block = _pilot_block(dyn, start, obs, cfg)
    tasks = [(dyn, start, obs, cfg, p0, min(p0 + cfg.chunk, cfg.paths), block)
             for p0 in range(0, cfg.paths, cfg.chunk)]
    jobs = resolve_jobs(cfg.jobs)
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_chunk_worker, tasks))
    else:
        results = [_chunk_worker(t) for t in tasks]
    results.sort(key=lambda r: r[0])
    cat = lambda i: np.concatenate([r[i] for r in results])  # noqa: E731
    info = dict(dyn.info, block=block)
    return PathBatch(start, obs, cat(1), cat(2), cat(3), cat(4), cat(5), dyn.cap, info)


# --------------------------------------------------------------------------
# estimators
# --------------------------------------------------------------------------

def estimate_transition(paths, i: int, j: int, t: float) -> tuple[float, float]:
    """Fraction of paths in state j at time t and its binomial standard error.

    ``paths`` is a :class:`PathBatch` observed at t or a sequence of
    :class:`PathRecord`; every path must start at i.
    """
    if isinstance(paths, PathBatch):
        if paths.start != i:
            raise ValueError("paths were not started at i")
        hit = np.nonzero(np.isclose(paths.obs, t, rtol=0, atol=1e-15))[0]
        if hit.size == 0:
            raise ValueError(f"time {t} was not observed")
        col = paths.states[:, hit[0]]
        n = col.shape[0]
        count = int(np.count_nonzero(col == j))
    else:
        recs = list(paths)
        n = len(recs)
        if n == 0:
            raise ValueError("no paths")
        if any(r.start != i for r in recs):
            raise ValueError("paths were not started at i")
        count = sum(1 for r in recs if r.state_at(t) == j)
    if n == 0:
        raise ValueError("no paths")
    p = count / n
    return p, math.sqrt(p * (1.0 - p) / n)
