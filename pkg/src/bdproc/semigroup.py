"""Finite generators with a boundary state, uniformization, Laplace and convergence checks.

State layout: ``0..N`` are the interior states and index ``N+1`` is the
boundary surrogate ``b`` for infinity, placed at scale position ``c_{N+1}``.
Row ``N`` sends ``b_N`` to ``b``.  Row ``b`` carries

* ``M (beta/2) / dc_N`` back to ``N`` (reflection),
* ``M nu_k`` to each ``k <= N`` (non-local jumps),
* ``M gamma`` of killing.

``M`` is a speed factor.  It leaves the triple's process unchanged (triples
are defined up to a positive multiple) but controls how long the chain
lingers in ``b``; as ``M`` grows the chain's resolvent restricted to
``0..N`` tends to the truncated ``Psi`` exactly.  ``"auto"`` makes the
expected time in ``b`` negligible (about 1e-12 per unit of boundary
activity).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import Boundary, RateModel, ScaleSpeed, build_scale_speed
from .resolvent import (
    BoundaryClassError,
    BoundaryTriple,
    ReturnDistribution,
    boundary_class,
    check_admissible,
    doob_resolvent,
    wang_yang_resolvent,
)

__all__ = [
    "ConvergenceRow",
    "LaplaceCheck",
    "SplittingError",
    "TransitionEvaluation",
    "TruncatedGenerator",
    "build_generator",
    "convergence_experiment",
    "dump_transition_csv",
    "laplace_crosscheck",
    "transition_path",
    "uniformized_transition",
]

BOUNDARY_SPEED = 1e12


class SplittingError(RuntimeError):
    """Uniformization would need more halvings than allowed."""


@dataclass(frozen=True, eq=False)
class TruncatedGenerator:
    """Dense rate matrix with closure metadata.

    ``mode`` is ``"absorbing"`` (states ``0..N``) or ``"boundary"``
    (states ``0..N, b``).  ``killing[i]`` is the row deficit.
    """

    matrix: np.ndarray
    mode: str
    N: int
    boundary_scale: float
    killing: np.ndarray
    model: RateModel
    triple: BoundaryTriple | None
    pi: ReturnDistribution | None = None

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def b(self) -> int | None:
        return self.N + 1 if self.mode == "boundary" else None

    def resolvent(self, alpha: float):
        """The matching truncated resolvent from the resolvent module."""
        ss = build_scale_speed(self.model, self.N)
        if self.pi is not None:
            return doob_resolvent(self.model, self.pi, alpha, self.N, ss)
        return wang_yang_resolvent(self.model, ss, self.triple or BoundaryTriple.minimal(),
                                   alpha, self.N)


def build_generator(model: RateModel, ss: ScaleSpeed | None, N: int, *,
                    triple: BoundaryTriple | None = None, pi: ReturnDistribution | None = None,
                    boundary_scale: float | str = "auto") -> TruncatedGenerator:
    """Generator on ``0..N`` (absorbing) or ``0..N, b`` (boundary).

    Minimal inputs (no triple, ``pi = delta_dead``, or ``nu = 0, beta = 0``)
    give the absorbing closure.  A Doob ``pi`` is turned into the triple
    ``(pi, pi_dead, 0)``.
    """
    if triple is not None and pi is not None:
        raise ValueError("give either a triple or pi, not both")
    ss = ss if ss is not None and ss.N >= N else build_scale_speed(model, N)
    eff = pi.as_triple() if pi is not None else triple
    a, b = model.rates(N)
    q = a + b
    minimal = eff is None or (eff.total_mass == 0 and eff.beta == 0)
    if not minimal:
        kind = check_admissible(model, eff)
        if math.isinf(eff.total_mass):
            raise ValueError("a generator needs a finite nu; truncate it first")
    if minimal:
        G = np.zeros((N + 1, N + 1))
        idx = np.arange(N + 1)
        G[idx, idx] = -q
        G[idx[:-1], idx[:-1] + 1] = b[:-1]
        G[idx[1:], idx[1:] - 1] = a[1:]
        kill = np.zeros(N + 1)
        kill[N] = b[N]
        return TruncatedGenerator(G, "absorbing", N, 1.0, kill, model, triple, pi)
    beta = 0.0 if kind is Boundary.EXIT else eff.beta
    nu = eff.nu_weights(N)
    nu_mass = float(nu.sum())
    refl = 0.5 * beta / ss.dc[N]
    if boundary_scale == "auto":
        base = beta if beta > 0 else nu_mass + eff.gamma
        M = BOUNDARY_SPEED / base
    else:
        M = float(boundary_scale)
        if not M > 0:
            raise ValueError("boundary_scale must be positive")
    G = np.zeros((N + 2, N + 2))
    idx = np.arange(N + 1)
    G[idx, idx] = -q
    G[idx[:-1], idx[:-1] + 1] = b[:-1]
    G[idx[1:], idx[1:] - 1] = a[1:]
    G[N, N + 1] = b[N]
    G[N + 1, : N + 1] = M * nu
    G[N + 1, N] += M * refl
    G[N + 1, N + 1] = -M * (nu_mass + refl + eff.gamma)
    kill = np.zeros(N + 2)
    kill[N + 1] = M * eff.gamma
    return TruncatedGenerator(G, "boundary", N, M, kill, model, triple, pi)


# --------------------------------------------------------------------------
# uniformization
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TransitionEvaluation:
    t: float
    p: np.ndarray
    rate: float            # uniformization rate Lambda
    terms: int             # Poisson terms per split step
    splits: int            # number of squarings
    error_bound: float     # truncation error bound (rounding not included)

    def interior(self, N: int) -> np.ndarray:
        return self.p[: N + 1, : N + 1]


def _poisson_weights(x: float, tol: float) -> tuple[np.ndarray, float]:
    """``exp(-x) x^m / m!`` up to the first m whose tail bound is below tol.

    For ``x <= 1`` the tail after term m is at most ``2 x w_m / (m+1)``.
    Returns the weights and that bound.
    """
    if x > 1:
        raise SplittingError("step too long for the Poisson series")
    w = [math.exp(-x)]
    m = 0
    while True:
        bound = 2.0 * x * w[-1] / (m + 1)
        if bound < tol or w[-1] == 0.0:
            return np.asarray(w), bound
        m += 1
        w.append(w[-1] * x / m)


def _diag_from(O: np.ndarray, k: np.ndarray) -> np.ndarray:
    return np.clip((1.0 - k) - O.sum(axis=1), 0.0, 1.0)


def uniformized_transition(gen: TruncatedGenerator, t: float, tol: float = 1e-13,
                           max_splits: int = 1100, step_rate: float = 0.5) -> TransitionEvaluation:
    """``p(t) = exp(t G)`` by uniformization with repeated squaring.

    The step is halved until ``Lambda h <= step_rate``, the Poisson series is
    summed there and the result is squared back up to ``t``.  Rates in the
    reference families reach 3^N, so hundreds of squarings are normal.

    Squaring is done on the pair (off-diagonal part ``O``, killing vector
    ``k``) with the diagonal rebuilt as ``1 - k - sum_j O_ij``:

        O' = offdiag(P P),   k' = k + P k.

    Every sum then has non-negative terms.  Storing ``P`` or ``P - I`` instead
    lets rounding in the row sums of fast rows masquerade as killing or
    creation of mass, and that error doubles at each squaring; a killing
    probability of 2^-N per boundary visit is invisible at that precision.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    n = gen.size
    if t == 0:
        return TransitionEvaluation(0.0, np.eye(n), 0.0, 0, 0, 0.0)
    G = gen.matrix
    lam = float(np.max(-np.diag(G)))
    if lam == 0:
        return TransitionEvaluation(float(t), np.eye(n), 0.0, 0, 0, 0.0)
    x = lam * t
    if not math.isfinite(x):
        raise SplittingError("Lambda t is not finite")
    d = max(0, math.ceil(math.log2(x / step_rate))) if x > step_rate else 0
    if d > max_splits:
        raise SplittingError(f"needs {d} halvings (> {max_splits})")
    xh = math.ldexp(x, -d)
    w, tail = _poisson_weights(xh, max(tol * 2.0 ** (-d), 1e-300))
    # one uniformized step: off-diagonal jump probabilities and killing
    Ou = G / lam
    np.fill_diagonal(Ou, 0.0)
    ku = np.asarray(gen.killing, dtype=float) / lam
    Pu = Ou + np.diag(_diag_from(Ou, ku))
    # Poisson mixture of Pu^m, tracking Pu^m and its killed mass
    Pm = np.eye(n)
    km = np.zeros(n)
    O = np.zeros((n, n))
    k = np.zeros(n)
    for m in range(1, len(w)):
        Pm = Pu @ Pm
        km = ku + Pu @ km
        O += w[m] * Pm
        k += w[m] * km
    np.fill_diagonal(O, 0.0)
    for _ in range(d):
        P = O + np.diag(_diag_from(O, k))
        k = k + P @ k
        O = P @ P
        np.fill_diagonal(O, 0.0)
    P = O + np.diag(_diag_from(O, k))
    return TransitionEvaluation(float(t), P, lam, len(w) - 1, d, tail * 2.0 ** d)


def transition_path(gen: TruncatedGenerator, h: float, steps: int, start: int | np.ndarray,
                    **kw) -> np.ndarray:
    """Rows ``p_start(m h)`` for m = 0..steps, shape ``(steps+1, size)``."""
    P = uniformized_transition(gen, h, **kw).p
    if np.ndim(start) == 0:
        v = np.zeros(gen.size)
        v[int(start)] = 1.0
    else:
        v = np.asarray(start, dtype=float)
    out = np.empty((steps + 1, gen.size))
    out[0] = v
    for m in range(1, steps + 1):
        v = v @ P
        out[m] = v
    return out


# --------------------------------------------------------------------------
# Laplace cross-check
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LaplaceCheck:
    integral: float
    psi: float
    rel_gap: float
    quad_error: float      # Richardson estimate of the Simpson error
    tail_bound: float      # exp(-alpha T)/alpha


def laplace_crosscheck(gen: TruncatedGenerator, alpha: float, i: int, j: int,
                       T: float = 20.0, step: float = 1.0 / 128) -> LaplaceCheck:
    """Compare ``int_0^T e^{-alpha t} p_ij(t) dt`` with ``Psi_ij(alpha)``.

    Composite Simpson on ``t = m step``; the same sum with doubled step gives
    the Richardson error estimate.
    """
    if alpha * T < 20:
        raise ValueError("need alpha T >= 20 so the neglected tail is below e^-20")
    steps = int(round(T / step))
    steps += steps % 4          # divisible by 4 so the doubled step also works
    h = T / steps
    path = transition_path(gen, h, steps, i)[:, j]
    tgrid = h * np.arange(steps + 1)
    y = np.exp(-alpha * tgrid) * path

    def simpson(vals, hh):
        return hh / 3.0 * (vals[0] + vals[-1] + 4 * vals[1:-1:2].sum() + 2 * vals[2:-1:2].sum())

    fine = simpson(y, h)
    coarse = simpson(y[::2], 2 * h)
    integral = fine + (fine - coarse) / 15.0
    psi = float(gen.resolvent(alpha).psi[i, j])
    return LaplaceCheck(float(integral), psi, abs(integral - psi) / abs(psi),
                        abs(fine - coarse) / 15.0, math.exp(-alpha * T) / alpha)


# --------------------------------------------------------------------------
# approximation experiment
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvergenceRow:
    n: int
    alpha: float
    j: int
    sup_gap_resolvent: float
    sup_gap_transition: float


def convergence_experiment(model: RateModel, target: BoundaryTriple, ns: Sequence[int],
                           alphas: Sequence[float], N: int, *, js: Sequence[int] = (0,),
                           window: int = 20, beta_schedule=None, t_step: float = 0.1,
                           t_max: float = 2.0, transition_N: int | None = None) -> list[ConvergenceRow]:
    """Gaps between ``Psi`` for ``(nu^n, gamma, beta_n)`` and for the target.

    ``nu^n`` is ``nu`` restricted to ``{0..n}``; ``beta_n = beta`` when the
    target has ``beta > 0`` and ``beta_schedule(n)`` (default ``1/n``)
    otherwise.  The transition-level gap is taken over ``t in {t_step m}``
    up to ``t_max`` and states ``i <= N' - window`` with ``N' = transition_N``
    (default ``min(N, 100)``).  The target needs a finite truncated ``nu``.
    """
    kind = boundary_class(model)
    if kind is not Boundary.REGULAR:
        raise BoundaryClassError(
            f"approximation by Feller triples needs a regular boundary, got {kind.value}")
    beta_schedule = beta_schedule or (lambda n: 1.0 / n)
    ss = build_scale_speed(model, N)
    Nt = transition_N if transition_N is not None else min(N, 100)
    lo = N - window + 1
    lo_t = Nt - window + 1
    steps = int(round(t_max / t_step))

    def approx(n: int) -> BoundaryTriple:
        tr = target.truncated(min(n, N))
        beta = target.beta if target.beta > 0 else beta_schedule(n)
        return tr.with_beta(beta)

    def trajectories(tr: BoundaryTriple) -> np.ndarray:
        gen = build_generator(model, None, Nt, triple=tr.truncated(Nt))
        P = uniformized_transition(gen, t_step).p
        rows = np.eye(gen.size)[:lo_t]
        out = [rows]
        for _ in range(steps):
            rows = rows @ P
            out.append(rows)
        return np.stack(out)[:, :, : Nt + 1]

    full = target.truncated(N)
    ref_ev = {a: wang_yang_resolvent(model, ss, full, a, N) for a in alphas}
    ref_traj = trajectories(full)
    rows: list[ConvergenceRow] = []
    for n in ns:
        tr = approx(n)
        traj = trajectories(tr)
        tgap = float(np.max(np.abs(traj - ref_traj)))
        for a in alphas:
            ev = wang_yang_resolvent(model, ss, tr, a, N)
            for j in js:
                gap = float(np.max(np.abs(ev.psi[:lo, j] - ref_ev[a].psi[:lo, j])))
                rows.append(ConvergenceRow(int(n), float(a), int(j), gap, tgap))
    return rows


def dump_transition_csv(path: str | Path, evaluations: Iterable[TransitionEvaluation],
                        states: Sequence[int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "i", "j", "p"])
        for ev in evaluations:
            for i in states:
                for j in states:
                    w.writerow([repr(float(ev.t)), i, j, repr(float(ev.p[i, j]))])
