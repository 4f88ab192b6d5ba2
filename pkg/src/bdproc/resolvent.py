"""Minimal resolvent, the explosion transform u_alpha and the (Q, nu, gamma, beta)-resolvent.

Truncation convention: the minimal resolvent on ``{0..N}`` is the exact
resolvent of the chain killed on reaching ``N+1``.  The internal harmonic
function is normalised at ``N+1`` to match, which makes the truncated
``Psi`` the exact resolvent of a finite chain whose point at infinity sits at
scale position ``c_{N+1}``.  Identities that hold for every resolvent (the
resolvent equation, honesty, the boundary condition) therefore hold to
rounding at every N; only the distance to the infinite-state answer depends
on N, and that is reported as ``tail_error``.

Everything is computed from ``mu`` and the conductances ``s_k = 1/(2 dc_k)``
rather than from the rates, so no subtraction of large rates ever happens.
"""
from __future__ import annotations

import csv
import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .model import (
    Boundary,
    GridFunction,
    ModelError,
    RateModel,
    ScaleSpeed,
    build_scale_speed,
    classify_boundary,
)

__all__ = [
    "AdmissibilityError",
    "BoundaryClassError",
    "BoundaryTriple",
    "BoundaryCheck",
    "DensityRecovery",
    "InconclusiveClass",
    "NumericalFailure",
    "ReturnDistribution",
    "ResolventEvaluation",
    "boundary_class",
    "check_admissible",
    "doob_resolvent",
    "dump_resolvent_csv",
    "load_pi",
    "load_triple",
    "minimal_resolvent_apply",
    "minimal_resolvent_entry",
    "minimal_resolvent_matrix",
    "recover_density_matrix",
    "set_cache_enabled",
    "u_alpha",
    "verify_generator_boundary",
    "verify_resolvent_equation",
    "wang_yang_resolvent",
]


class AdmissibilityError(ValueError):
    """A boundary triple violates a hypothesis of the representation."""

    def __init__(self, condition: str, message: str):
        super().__init__(f"{condition}: {message}")
        self.condition = condition


class BoundaryClassError(ValueError):
    """Operation needs a different boundary class."""


class InconclusiveClass(ValueError):
    """The partial sums could not decide the boundary class."""


class NumericalFailure(ArithmeticError):
    pass


# --------------------------------------------------------------------------
# memo cache
# --------------------------------------------------------------------------

class _Memo:
    """Dict cache guarded by a lock; stored arrays are read-only."""

    def __init__(self, maxsize: int = 64):
        self._data: dict = {}
        self._lock = threading.Lock()
        self.enabled = True
        self.maxsize = maxsize

    def get(self, key, build):
        if not self.enabled:
            return build()
        with self._lock:
            hit = self._data.get(key)
        if hit is not None:
            return hit
        value = build()
        with self._lock:
            if len(self._data) >= self.maxsize:
                self._data.pop(next(iter(self._data)))
            self._data.setdefault(key, value)
            return self._data[key]

    def clear(self) -> None:
        with self._lock:
            self._data.clear()


_CACHE = _Memo()


def set_cache_enabled(flag: bool) -> None:
    _CACHE.enabled = bool(flag)
    if not flag:
        _CACHE.clear()


def _freeze(*arrays):
    for a in arrays:
        if isinstance(a, np.ndarray):
            a.setflags(write=False)
    return arrays if len(arrays) > 1 else arrays[0]


def boundary_class(model: RateModel, N: int = 60) -> Boundary:
    """Analytic class when known, numerical otherwise."""
    kind = model.analytic_boundary()
    if kind is not None:
        return kind
    return classify_boundary(model, N=max(N, 20), window=min(10, max(N, 20))).kind


def _scale(model: RateModel, ss: ScaleSpeed | None, N: int) -> ScaleSpeed:
    if ss is not None and ss.N >= N:
        return ss
    return build_scale_speed(model, N)


# --------------------------------------------------------------------------
# harmonic function
# --------------------------------------------------------------------------

class _Harmonic(NamedTuple):
    u: np.ndarray          # u(k) = v(k)/v(N+1), k = 0..N
    one_minus_u: np.ndarray
    uplus: np.ndarray      # (u(k+1)-u(k))/dc_k, k = 0..N, with u(N+1) = 1


def _harmonic(ss: ScaleSpeed, alpha: float, N: int) -> _Harmonic:
    """Positive recursion in scale form.

    ``v(0) = 1``, ``v+(k) = v+(k-1) + 2 alpha mu_k v(k)``, ``v(k+1) = v(k) + dc_k v+(k)``.
    Every quantity is a sum of positive terms, and ``1 - u(k)`` is formed as
    a tail sum of increments, so small values keep full relative accuracy.
    """
    mu, dc = ss.mu, ss.dc
    v = np.empty(N + 2)
    vp = np.empty(N + 1)
    logscale = np.zeros(N + 2)    # v[k] and vp[k] are stored divided by exp(logscale[k])
    cur_v, cur_p, cur_log = 1.0, 0.0, 0.0
    for k in range(N + 1):
        v[k] = cur_v
        logscale[k] = cur_log
        cur_p = cur_p + 2.0 * alpha * mu[k] * cur_v
        vp[k] = cur_p
        cur_v = cur_v + dc[k] * cur_p
        if cur_v > 1e100:
            cur_v *= 1e-100
            cur_p *= 1e-100
            cur_log += 100.0 * math.log(10.0)
    v[N + 1] = cur_v
    logscale[N + 1] = cur_log
    if not (np.all(np.isfinite(v)) and np.all(v > 0) and np.all(vp > 0)):
        raise NumericalFailure("harmonic recursion produced a non-positive or non-finite value")
    rel = np.exp(logscale - cur_log)                 # underflows harmlessly to 0
    u = v[: N + 1] * rel[: N + 1] / cur_v
    inc = dc[: N + 1] * vp * rel[: N + 1] / cur_v    # u(k+1) - u(k)
    one_minus = np.cumsum(inc[::-1])[::-1]
    uplus = vp * rel[: N + 1] / cur_v
    return _Harmonic(*_freeze(u, one_minus, uplus))


def _harmonic_cached(model: RateModel, ss: ScaleSpeed, alpha: float, N: int) -> _Harmonic:
    return _CACHE.get(("u", model, float(alpha), N, ss.N), lambda: _harmonic(ss, alpha, N))


def u_alpha(model: RateModel, ss: ScaleSpeed | None, alpha: float, N: int,
            *, check_class: bool = True) -> GridFunction:
    """``u_alpha(k) = E_k exp(-alpha eta)`` on ``0..N``, normalised so ``u(N) = 1``.

    With this normalisation ``u_alpha = 1 - alpha Phi 1`` holds exactly for the
    minimal resolvent closed at N (``minimal_resolvent_apply(..., N-1)``).
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if check_class:
        kind = boundary_class(model)
        if not kind.explosive:
            raise BoundaryClassError(
                f"u_alpha vanishes identically for a {kind.value} boundary (no explosion)")
    ss = _scale(model, ss, N)
    h = _harmonic_cached(model, ss, alpha, N - 1)
    # h.u is normalised at N: u(0..N-1), and u(N) = 1
    return GridFunction(np.concatenate((h.u, [1.0])), boundary=1.0)


# --------------------------------------------------------------------------
# minimal resolvent
# --------------------------------------------------------------------------

def _thomas(ss: ScaleSpeed, alpha: float, N: int, rhs: np.ndarray) -> np.ndarray:
    """Solve ``(alpha - Q) F = f`` on ``0..N`` with ``F(N+1) = 0``.

    Works on the mu-symmetrised system
    ``alpha mu_k F_k + s_{k-1}(F_k - F_{k-1}) + s_k(F_k - F_{k+1}) = mu_k f_k``
    with ``s_k = mu_k b_k = 1/(2 dc_k)``.  The pivots ``d_k = s_k + e_k`` use the
    positive recurrence ``e_k = alpha mu_k + s_{k-1} e_{k-1}/(s_{k-1} + e_{k-1})``,
    so elimination involves no subtraction.
    """
    mu = ss.mu[: N + 1]
    s = 0.5 / ss.dc[: N + 1]
    e = np.empty(N + 1)
    e[0] = alpha * mu[0]
    for k in range(1, N + 1):
        e[k] = alpha * mu[k] + s[k - 1] * e[k - 1] / (s[k - 1] + e[k - 1])
    d = s + e
    if not (np.all(np.isfinite(d)) and np.all(d > 0)):
        raise NumericalFailure("tridiagonal pivots are not positive and finite")
    f = np.asarray(rhs, dtype=float)
    y = np.empty_like(f)
    scaled = f * (mu if f.ndim == 1 else mu[:, None])
    y[0] = scaled[0]
    w = s[:-1] / d[:-1]
    for k in range(1, N + 1):
        y[k] = scaled[k] + w[k - 1] * y[k - 1]
    F = np.empty_like(f)
    F[N] = y[N] / d[N]
    for k in range(N - 1, -1, -1):
        F[k] = (y[k] + s[k] * F[k + 1]) / d[k]
    return F


def minimal_resolvent_apply(model: RateModel, alpha: float, f, N: int,
                            ss: ScaleSpeed | None = None) -> GridFunction:
    """``F = Phi(alpha) f`` on ``0..N`` with Dirichlet closure at N+1.

    ``boundary`` is 0 since the minimal process dies at infinity.
    ``cauchy_gap`` holds the truncation bound ``sup|f|`` times the expected
    time spent above N before explosion.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    fv = f.values if isinstance(f, GridFunction) else np.asarray(f, dtype=float)
    if fv.shape[0] != N + 1:
        raise ValueError(f"f must have N+1 = {N + 1} rows")
    ss = _scale(model, ss, N)
    F = _thomas(ss, alpha, N, fv)
    tail = float(np.max(np.abs(fv))) * _occupation_tail(model, N) if fv.size else 0.0
    return GridFunction(F, boundary=0.0, cauchy_gap=tail)


def _occupation_tail(model: RateModel, N: int) -> float:
    """Bound on expected time spent above N before explosion, from any start.

    ``2 sum_{j>N} mu_j (c_inf - c_j)`` evaluated on a doubled grid; this is the
    Green-function mass of the states that the truncation discards.
    """
    def build():
        M = 2 * N + 2
        mi = model.max_index
        if mi is not None:
            M = min(M, mi - 1)
        if M <= N + 1:
            return float("nan")
        ss = build_scale_speed(model, M)
        cinf = ss.c[-1]
        j = np.arange(N + 1, M + 1)
        return float(2.0 * np.sum(ss.mu[j] * (cinf - ss.c[j])))
    return _CACHE.get(("tail", model, N), build)


def minimal_resolvent_matrix(model: RateModel, alpha: float, N: int,
                             ss: ScaleSpeed | None = None) -> np.ndarray:
    """Dense ``Phi(alpha)`` on ``0..N`` (read-only, cached)."""
    ss = _scale(model, ss, N)

    def build():
        return _freeze(_thomas(ss, alpha, N, np.eye(N + 1)))
    return _CACHE.get(("phi", model, float(alpha), N, ss.N), build)


def minimal_resolvent_entry(model: RateModel, alpha: float, i: int, j: int, N: int,
                            ss: ScaleSpeed | None = None) -> float:
    e = np.zeros(N + 1)
    e[j] = 1.0
    return float(minimal_resolvent_apply(model, alpha, e, N, ss).values[i])


# --------------------------------------------------------------------------
# boundary triples
# --------------------------------------------------------------------------

_NU_FAMILIES = ("geometric", "power")


@dataclass(frozen=True)
class BoundaryTriple:
    """``(nu, gamma, beta)``.

    ``nu`` is a finite list of ``(k, mass)`` pairs, optionally plus a closed
    form family ``nu_family = (name, scale, param)``:

    * ``("geometric", s, r)``: ``nu_k = s r^k``
    * ``("power", s, p)``: ``nu_k = s / (k+1)^p``
    """

    nu: tuple[tuple[int, float], ...] = ()
    gamma: float = 0.0
    beta: float = 0.0
    nu_family: tuple[str, float, float] | None = None

    def __post_init__(self) -> None:
        merged: dict[int, float] = {}
        for k, v in self.nu:
            k, v = int(k), float(v)
            if k < 0 or not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"invalid nu entry ({k}, {v})")
            if v > 0:
                merged[k] = merged.get(k, 0.0) + v
        object.__setattr__(self, "nu", tuple(sorted(merged.items())))
        if not (self.gamma >= 0 and math.isfinite(self.gamma)):
            raise ValueError("gamma must be non-negative and finite")
        if not (self.beta >= 0 and math.isfinite(self.beta)):
            raise ValueError("beta must be non-negative and finite")
        if self.nu_family is not None:
            name, sc, par = self.nu_family
            if name not in _NU_FAMILIES or not sc > 0:
                raise ValueError(f"invalid nu family {self.nu_family!r}")
            if name == "geometric" and not par > 0:
                raise ValueError("geometric nu needs a positive ratio")
            object.__setattr__(self, "nu_family", (str(name), float(sc), float(par)))

    # constructors
    @classmethod
    def minimal(cls, gamma: float = 0.0) -> "BoundaryTriple":
        return cls((), gamma, 0.0)

    @classmethod
    def from_dict(cls, nu: Mapping[int, float], gamma: float = 0.0, beta: float = 0.0) -> "BoundaryTriple":
        return cls(tuple(nu.items()), gamma, beta)

    @classmethod
    def geometric_nu(cls, scale: float, ratio: float, gamma: float = 0.0, beta: float = 0.0) -> "BoundaryTriple":
        return cls((), gamma, beta, ("geometric", scale, ratio))

    def nu_weights(self, n: int) -> np.ndarray:
        """``nu_0..nu_n`` as a dense array."""
        w = np.zeros(n + 1)
        for k, v in self.nu:
            if k <= n:
                w[k] += v
        if self.nu_family is not None:
            name, sc, par = self.nu_family
            k = np.arange(n + 1, dtype=float)
            if name == "geometric":
                with np.errstate(under="ignore", over="ignore"):
                    w += sc * np.exp(k * math.log(par))
            else:
                w += sc / (k + 1.0) ** par
        return w

    @property
    def total_mass(self) -> float:
        """``|nu|`` (may be infinite)."""
        m = sum(v for _, v in self.nu)
        if self.nu_family is not None:
            name, sc, par = self.nu_family
            if name == "geometric":
                m += sc / (1.0 - par) if par < 1 else math.inf
            else:
                m += sc * _zeta(par) if par > 1 else math.inf
        return m

    def tail_mass(self, n: int) -> float:
        """``sum_{k>n} nu_k``."""
        m = sum(v for k, v in self.nu if k > n)
        if self.nu_family is not None:
            name, sc, par = self.nu_family
            if name == "geometric":
                m += sc * par ** (n + 1) / (1.0 - par) if par < 1 else math.inf
            else:
                m += sc * _zeta(par, n + 2) if par > 1 else math.inf
        return m

    def truncated(self, n: int) -> "BoundaryTriple":
        """``nu`` restricted to ``{0..n}`` as an explicit list."""
        w = self.nu_weights(n)
        return BoundaryTriple(tuple((k, float(x)) for k, x in enumerate(w) if x > 0), self.gamma, self.beta)

    def with_beta(self, beta: float) -> "BoundaryTriple":
        return BoundaryTriple(self.nu, self.gamma, beta, self.nu_family)

    def scaled(self, M: float) -> "BoundaryTriple":
        if not M > 0:
            raise ValueError("scale must be positive")
        fam = None
        if self.nu_family is not None:
            fam = (self.nu_family[0], self.nu_family[1] * M, self.nu_family[2])
        return BoundaryTriple(tuple((k, v * M) for k, v in self.nu), self.gamma * M, self.beta * M, fam)

    def normalized(self) -> "BoundaryTriple":
        """Scale so that ``max(min(|nu|, 1), gamma, beta) = 1``."""
        m = max(min(self.total_mass, 1.0), self.gamma, self.beta)
        return self if m == 0 else self.scaled(1.0 / m)

    @property
    def is_minimal(self) -> bool:
        return self.total_mass == 0 and self.beta == 0

    @property
    def feller(self) -> bool:
        return math.isinf(self.total_mass) or self.beta > 0

    @property
    def kappa(self) -> float:
        """``(|nu| + gamma) / beta``; infinite when beta = 0."""
        return (self.total_mass + self.gamma) / self.beta if self.beta > 0 else math.inf

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"nu": [[k, v] for k, v in self.nu], "gamma": self.gamma, "beta": self.beta}
        if self.nu_family is not None:
            name, sc, par = self.nu_family
            doc["nu_family"] = {"name": name, "scale": sc, ("ratio" if name == "geometric" else "p"): par}
        return doc


def _zeta(p: float, start: int = 1) -> float:
    """``sum_{m>=start} m^{-p}`` by direct summation plus an Euler-Maclaurin tail."""
    M = start + 2000
    m = np.arange(start, M, dtype=float)
    head = float(np.sum(m ** -p))
    tail = M ** (1 - p) / (p - 1) + 0.5 * M ** -p + p * M ** (-p - 1) / 12
    return head + tail


@dataclass(frozen=True)
class ReturnDistribution:
    """Probability ``pi`` on states plus the cemetery mass ``pi_dead``."""

    weights: tuple[tuple[int, float], ...]
    dead: float = 0.0

    def __post_init__(self) -> None:
        merged: dict[int, float] = {}
        for k, v in self.weights:
            if int(k) < 0 or not (float(v) >= 0):
                raise ValueError(f"invalid pi entry ({k}, {v})")
            if v > 0:
                merged[int(k)] = merged.get(int(k), 0.0) + float(v)
        object.__setattr__(self, "weights", tuple(sorted(merged.items())))
        total = sum(merged.values()) + self.dead
        if not (self.dead >= 0) or abs(total - 1.0) > 1e-9:
            raise ValueError(f"pi must be a probability (total mass {total:.12g})")

    @classmethod
    def delta(cls, k: int) -> "ReturnDistribution":
        return cls(((k, 1.0),), 0.0)

    @classmethod
    def cemetery(cls) -> "ReturnDistribution":
        return cls((), 1.0)

    def as_triple(self, M: float = 1.0) -> BoundaryTriple:
        """Doob triple ``nu = M pi, gamma = M pi_dead, beta = 0``."""
        return BoundaryTriple(tuple((k, M * v) for k, v in self.weights), M * self.dead, 0.0)

    def dense(self, n: int) -> np.ndarray:
        w = np.zeros(n + 1)
        for k, v in self.weights:
            if k > n:
                raise ValueError(f"pi charges state {k} beyond truncation {n}")
            w[k] = v
        return w

    def to_json(self) -> dict[str, Any]:
        return {"pi": [[k, v] for k, v in self.weights], "dead": self.dead}


def load_triple(source: str | Path | Mapping[str, Any]) -> BoundaryTriple:
    doc = _load_json(source, "triple")
    extra = set(doc) - {"nu", "gamma", "beta", "nu_family", "comment"}
    if extra:
        raise ModelError(f"unexpected keys {sorted(extra)} in triple file")
    try:
        nu = [(int(k), float(v)) for k, v in doc.get("nu", [])]
        fam = None
        if "nu_family" in doc:
            f = doc["nu_family"]
            name = f["name"]
            par = f["ratio"] if name == "geometric" else f["p"]
            fam = (name, float(f.get("scale", 1.0)), float(par))
        return BoundaryTriple(tuple(nu), float(doc.get("gamma", 0.0)), float(doc.get("beta", 0.0)), fam)
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"malformed triple: {exc}") from exc


def load_pi(source: str | Path | Mapping[str, Any]) -> ReturnDistribution:
    doc = _load_json(source, "pi")
    extra = set(doc) - {"pi", "dead", "comment"}
    if extra:
        raise ModelError(f"unexpected keys {sorted(extra)} in pi file")
    try:
        return ReturnDistribution(tuple((int(k), float(v)) for k, v in doc.get("pi", [])),
                                  float(doc.get("dead", 0.0)))
    except (TypeError, ValueError) as exc:
        raise ModelError(f"malformed pi: {exc}") from exc


def _load_json(source, what: str) -> Mapping[str, Any]:
    if isinstance(source, Mapping):
        return source
    try:
        doc = json.loads(Path(source).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelError(f"cannot read {what} file {source}: {exc}") from exc
    if not isinstance(doc, Mapping):
        raise ModelError(f"{what} document must be a JSON object")
    return doc


def check_admissible(model: RateModel, triple: BoundaryTriple, *, strict: bool = False,
                     N: int = 200) -> Boundary:
    """Raise :class:`AdmissibilityError` naming the violated condition.

    ``strict`` additionally demands ``|nu| + beta > 0``; without it the triples
    ``(0, gamma, 0)`` are accepted as names of the minimal process.
    """
    kind = boundary_class(model)
    if kind is Boundary.INCONCLUSIVE:
        raise InconclusiveClass("boundary class is inconclusive at the classification depth")
    if triple.total_mass == 0 and triple.beta == 0 and not strict:
        return kind
    if not kind.explosive:
        raise AdmissibilityError("boundary", f"a {kind.value} boundary admits only the minimal process")
    if kind is Boundary.EXIT and triple.beta > 0:
        raise AdmissibilityError("exit-no-reflection", "beta must be 0 when infinity is an exit")
    if strict and triple.total_mass == 0 and triple.beta == 0:
        raise AdmissibilityError("|nu|+beta>0", "triple (0, gamma, 0) gives the minimal process")
    if triple.total_mass > 0:
        series = _b1_series(model, triple, N)
        if not series[0]:
            raise AdmissibilityError("finite-mean-return", f"sum_k nu_k E_k[eta] appears divergent ({series[1]:.3g})")
    return kind


def _b1_series(model: RateModel, triple: BoundaryTriple, N: int) -> tuple[bool, float]:
    """Partial sums of ``sum_k nu_k T_k`` with ``T_k`` the sigma tail from k."""
    ss = build_scale_speed(model, N)
    T = ss.sigma_tail()
    terms = triple.nu_weights(N) * T
    part = np.cumsum(terms)
    total = float(part[-1])
    half = float(part[N // 2])
    ok = math.isfinite(total) and (total - half) <= 1e-3 * max(total, 1e-300) + 1e-12
    return ok, total


# --------------------------------------------------------------------------
# Psi
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ResolventEvaluation:
    """``Psi(alpha)`` on ``0..N`` plus the pieces it was assembled from.

    ``psi_inf[j]`` is ``Psi_{inf, j}`` (the value at infinity of ``Psi 1_{j}``),
    ``numer`` and ``D`` the numerator row and denominator of the correction.
    """

    alpha: float
    psi: np.ndarray
    row_sums: np.ndarray
    N: int
    tail_error: float
    nu_tail_mass: float
    triple: BoundaryTriple | None
    u: np.ndarray
    one_minus_u: np.ndarray
    uplus: np.ndarray
    phi: np.ndarray
    numer: np.ndarray
    D: float
    psi_inf: np.ndarray
    model: RateModel | None = None

    @property
    def entries(self) -> np.ndarray:
        return self.psi

    def apply(self, f) -> GridFunction:
        """``F = Psi f`` with ``F(inf) = M(f)`` in the boundary slot."""
        fv = f.values if isinstance(f, GridFunction) else np.asarray(f, dtype=float)
        Mf = float(self.numer @ fv) / self.D if self.D > 0 else 0.0
        return GridFunction(self.phi @ fv + Mf * self.u, boundary=Mf)


def wang_yang_resolvent(model: RateModel, ss: ScaleSpeed | None, triple: BoundaryTriple,
                        alpha: float, N: int, *, check: bool = True) -> ResolventEvaluation:
    """Assemble ``Psi = Phi + u (nu Phi + beta mu u) / D`` on ``0..N``.

    ``D = gamma + sum_k nu_k (1 - u_k) + beta alpha sum_k mu_k u_k``.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    kind = check_admissible(model, triple) if check else boundary_class(model)
    ss = _scale(model, ss, N)
    phi = minimal_resolvent_matrix(model, alpha, N, ss)
    h = _harmonic_cached(model, ss, alpha, N)
    mu = ss.mu[: N + 1]
    beta = 0.0 if kind is Boundary.EXIT else triple.beta
    nu = triple.nu_weights(N)
    tail_nu = triple.tail_mass(N)
    base_tail = alpha * _occupation_tail(model, N)
    if not np.any(nu > 0) and beta == 0:
        psi = phi.copy()
        numer = np.zeros(N + 1)
        D = float(triple.gamma)
    else:
        numer = nu @ phi + beta * mu * h.u
        D = triple.gamma + float(nu @ h.one_minus_u) + beta * alpha * float(mu @ h.u)
        if not D > 0:
            raise NumericalFailure(f"denominator D(alpha) = {D!r} is not positive")
        psi = phi + np.outer(h.u, numer / D)
    psi_inf = numer / D if D > 0 else np.zeros(N + 1)
    tail = base_tail + (tail_nu / (D * alpha) if D > 0 and math.isfinite(tail_nu) else (0.0 if tail_nu == 0 else math.inf))
    return ResolventEvaluation(
        alpha=float(alpha), psi=psi, row_sums=psi.sum(axis=1), N=N, tail_error=tail,
        nu_tail_mass=tail_nu, triple=triple, u=h.u, one_minus_u=h.one_minus_u, uplus=h.uplus,
        phi=phi, numer=numer, D=D, psi_inf=psi_inf, model=model)


def doob_resolvent(model: RateModel, pi: ReturnDistribution, alpha: float, N: int,
                   ss: ScaleSpeed | None = None) -> ResolventEvaluation:
    """``R = Phi + u (pi Phi) / (1 - pi(u))`` with ``pi`` on states and cemetery."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    ss = _scale(model, ss, N)
    phi = minimal_resolvent_matrix(model, alpha, N, ss)
    h = _harmonic_cached(model, ss, alpha, N)
    w = pi.dense(N)
    D = pi.dead + float(w @ h.one_minus_u)      # 1 - pi(u) without cancellation
    if not np.any(w > 0):
        psi, numer = phi.copy(), np.zeros(N + 1)
    else:
        if not D > 0:
            raise NumericalFailure("1 - pi(u_alpha) is not positive")
        numer = w @ phi
        psi = phi + np.outer(h.u, numer / D)
    return ResolventEvaluation(
        alpha=float(alpha), psi=psi, row_sums=psi.sum(axis=1), N=N,
        tail_error=alpha * _occupation_tail(model, N) * (1.0 + 1.0 / max(D, 1e-300) * float(w.sum())),
        nu_tail_mass=0.0, triple=pi.as_triple(), u=h.u, one_minus_u=h.one_minus_u, uplus=h.uplus,
        phi=phi, numer=numer, D=D, psi_inf=numer / D if D > 0 else np.zeros(N + 1), model=model)


def verify_resolvent_equation(ev_a: ResolventEvaluation, ev_b: ResolventEvaluation,
                              window: int = 20) -> float:
    """``max |Psi(a) - Psi(b) + (a-b) Psi(a) Psi(b)|`` over ``i, j <= N - window``."""
    if ev_a.N != ev_b.N:
        raise ValueError("evaluations must share the truncation level")
    if ev_a.alpha == ev_b.alpha:
        return 0.0
    n = ev_a.N - window + 1
    if n <= 0:
        raise ValueError("window larger than the grid")
    prod = ev_a.psi[:n] @ ev_b.psi[:, :n]
    r = ev_a.psi[:n, :n] - ev_b.psi[:n, :n] + (ev_a.alpha - ev_b.alpha) * prod
    return float(np.max(np.abs(r)))


# --------------------------------------------------------------------------
# generator boundary condition
# --------------------------------------------------------------------------

class BoundaryCheck(NamedTuple):
    interior_abs: float        # max_k |alpha F - QF - f|
    interior_backward: float   # componentwise backward error of the same rows
    interior_resolved: float   # max |alpha F - QF - f| over rows whose rounding floor is <= 1e-12
    resolved_rows: int
    boundary: float            # |(beta/2) F+(inf) + sum (F(inf)-F(k)) nu_k + gamma F(inf)|
    cauchy_gap: float          # (beta/2) |F+(N) - F+(N-1)|
    F_inf: float
    F_plus_inf: float


def verify_generator_boundary(model: RateModel, ss: ScaleSpeed | None, triple: BoundaryTriple,
                              alpha: float, f, N: int) -> BoundaryCheck:
    """Interior equation and the boundary condition for ``F = Psi f``.

    ``F(inf)`` is ``M(f)``; ``F^+(inf)`` is the slope of the last link
    ``N -> inf``.  Slopes are formed from the decomposition
    ``F = Phi f + M(f) u``: the harmonic slope comes from the recursion and the
    minimal part vanishes at ``N+1``, so no difference of nearly equal values
    is divided by a tiny ``dc``.
    """
    ss = _scale(model, ss, N)
    ev = wang_yang_resolvent(model, ss, triple, alpha, N)
    fv = f.values if isinstance(f, GridFunction) else np.asarray(f, dtype=float)
    fv = fv[: N + 1]
    g = ev.phi @ fv
    Mf = float(ev.numer @ fv) / ev.D if ev.D > 0 else 0.0
    F = g + Mf * ev.u
    Finf = Mf
    # interior rows 0..N, using F(N+1) := F(inf)
    a, b = model.rates(N)
    Fl = np.concatenate(([0.0], F[:-1]))
    Fr = np.concatenate((F[1:], [Finf]))
    q = a + b
    r = alpha * F - (a * Fl - q * F + b * Fr) - fv
    scale = a * np.abs(Fl) + (alpha + q) * np.abs(F) + b * np.abs(Fr) + np.abs(fv)
    backward = np.where(scale > 0, np.abs(r) / np.where(scale > 0, scale, 1.0), 0.0)
    # rows where one rounding of F already costs more than 1e-12 cannot meet an absolute bound
    resolved = scale * np.finfo(float).eps <= 1e-12
    # slopes of the last two links
    dc = ss.dc
    slope_N = Mf * ev.uplus[N] - g[N] / dc[N]
    slope_Nm1 = Mf * ev.uplus[N - 1] + (g[N] - g[N - 1]) / dc[N - 1]
    kind = boundary_class(model)
    beta = 0.0 if kind is Boundary.EXIT else triple.beta
    nu = triple.nu_weights(N)
    gaps = Mf * ev.one_minus_u - g            # F(inf) - F(k)
    B = 0.5 * beta * slope_N + float(nu @ gaps) + triple.gamma * Finf
    return BoundaryCheck(float(np.max(np.abs(r))), float(np.max(backward)),
                         float(np.max(np.abs(r[resolved]), initial=0.0)), int(resolved.sum()), float(abs(B)),
                         float(0.5 * beta * abs(slope_N - slope_Nm1)), Finf, float(slope_N))


# --------------------------------------------------------------------------
# density matrix
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DensityRecovery:
    estimate: float
    reference: float
    alphas: tuple[float, ...]
    raw: tuple[float, ...]
    tableau_spread: float
    converged: bool


def recover_density_matrix(model: RateModel, triple: BoundaryTriple | None, alphas: Sequence[float],
                           i: int, j: int, N: int, *, rtol: float = 1e-3,
                           ss: ScaleSpeed | None = None) -> DensityRecovery:
    """Extrapolate ``alpha (alpha Psi_ij - delta_ij)`` to ``alpha = inf``.

    Neville extrapolation in ``h = 1/alpha`` to ``h = 0``; ``converged`` asks
    the last two diagonal entries of the tableau to agree to ``rtol`` relative
    to the largest rate among rows i, j (or absolutely to 1e-9 of it).
    """
    al = np.sort(np.asarray(alphas, dtype=float))
    if len(al) < 3 or al[-1] / al[0] < 100:
        raise ValueError("need at least three alphas spanning two decades")
    triple = triple or BoundaryTriple.minimal()
    ss = _scale(model, ss, N)
    raw = []
    for a in al:
        ev = wang_yang_resolvent(model, ss, triple, float(a), N)
        raw.append(a * (a * ev.psi[i, j] - (1.0 if i == j else 0.0)))
    h = 1.0 / al
    T = [list(raw)]
    for m in range(1, len(al)):
        prev = T[-1]
        T.append([(h[k] * prev[k + 1] - h[k + m] * prev[k]) / (h[k] - h[k + m])
                  for k in range(len(prev) - 1)])
    est = T[-1][0]
    second = T[-2][-1]
    a_, b_ = model.rates(max(i, j) + 1)
    qscale = max(a_[i] + b_[i], a_[j] + b_[j])
    spread = abs(est - second)
    ref = (b_[i] if j == i + 1 else a_[i] if j == i - 1 else -(a_[i] + b_[i]) if i == j else 0.0)
    return DensityRecovery(float(est), float(ref), tuple(al), tuple(float(x) for x in raw),
                           float(spread), bool(spread <= rtol * qscale))


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------

def dump_resolvent_csv(path: str | Path, evaluations: Iterable[ResolventEvaluation],
                       rows: Sequence[int] | None = None, cols: Sequence[int] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "alpha", "psi"])
        for ev in evaluations:
            ri = range(ev.N + 1) if rows is None else rows
            cj = range(ev.N + 1) if cols is None else cols
            for i in ri:
                for j in cj:
                    w.writerow([i, j, repr(float(ev.alpha)), repr(float(ev.psi[i, j]))])
