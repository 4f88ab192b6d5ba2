"""Rate data, scale and speed, boundary classification and the discrete calculus.

Conventions
-----------
Birth rates ``b_k`` (k >= 0) and death rates ``a_k`` (k >= 1, ``a_0 = 0``).
The speed measure is ``mu_0 = 1, mu_{k+1} = mu_k b_k / a_{k+1}`` and the scale
increments are ``dc_k = c_{k+1} - c_k = 1 / (2 b_k mu_k)``.  Increments are
stored directly because differences of ``c`` lose all precision once ``c``
has converged.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Mapping, NamedTuple

import numpy as np

__all__ = [
    "Boundary",
    "BoundaryClass",
    "GridFunction",
    "IdentityResidual",
    "ModelError",
    "RateModel",
    "ScaleSpeed",
    "SeriesVerdict",
    "apply_Q",
    "build_scale_speed",
    "classify_boundary",
    "dirichlet_energy",
    "energy_tail",
    "forward_derivative",
    "load_model",
    "mean_explosion_time",
    "second_order_identity_check",
]

_LOG_MAX = math.log(np.finfo(float).max) - 1.0


class ModelError(ValueError):
    """Invalid rate data or model file."""


# --------------------------------------------------------------------------
# RateModel
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RateModel:
    """Birth-death rates, either a closed-form family or explicit arrays.

    Families (all rates at index k):

    * ``constant(a, b)``: ``a_k = a`` (k >= 1), ``b_k = b``.
    * ``geometric(r, ratio, scale)``: ``a_k = scale r^k``, ``b_k = ratio scale r^k``.
    * ``power(p, ratio, scale)``: ``a_k = scale k^p``, ``b_k = ratio scale (k+1)^p``.
    """

    family: str | None = None
    params: tuple[tuple[str, float], ...] = ()
    a_explicit: tuple[float, ...] | None = None
    b_explicit: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.family is None:
            if self.a_explicit is None or self.b_explicit is None:
                raise ModelError("explicit model needs both a and b")
            if len(self.a_explicit) != len(self.b_explicit):
                raise ModelError("a and b must have equal length")
            if len(self.b_explicit) < 3:
                raise ModelError("explicit arrays need at least 3 entries")
            a = np.asarray(self.a_explicit, dtype=float)
            b = np.asarray(self.b_explicit, dtype=float)
            if a[0] != 0.0:
                raise ModelError("a[0] must be 0 (no death from state 0)")
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
                raise ModelError("rates must be finite")
            if np.any(a[1:] <= 0) or np.any(b <= 0):
                raise ModelError("rates must be positive (a_k for k>=1, b_k for k>=0)")
            return
        p = self.param_dict
        if self.family == "constant":
            _require(p, ("a", "b"), self.family)
            _positive(p, ("a", "b"))
        elif self.family == "geometric":
            _require(p, ("r", "ratio", "scale"), self.family)
            _positive(p, ("r", "ratio", "scale"))
        elif self.family == "power":
            _require(p, ("p", "ratio", "scale"), self.family)
            _positive(p, ("ratio", "scale"))
            if not math.isfinite(p["p"]):
                raise ModelError("power exponent must be finite")
        else:
            raise ModelError(f"unknown family {self.family!r}")

    # constructors -----------------------------------------------------------
    @classmethod
    def constant(cls, a: float = 1.0, b: float = 1.0) -> "RateModel":
        return cls("constant", (("a", float(a)), ("b", float(b))))

    @classmethod
    def geometric(cls, r: float, ratio: float, scale: float = 1.0) -> "RateModel":
        return cls("geometric", (("r", float(r)), ("ratio", float(ratio)), ("scale", float(scale))))

    @classmethod
    def power(cls, p: float, ratio: float = 1.0, scale: float = 1.0) -> "RateModel":
        return cls("power", (("p", float(p)), ("ratio", float(ratio)), ("scale", float(scale))))

    @classmethod
    def explicit(cls, a, b) -> "RateModel":
        return cls(None, (), tuple(float(x) for x in a), tuple(float(x) for x in b))

    # reference families
    @classmethod
    def regular_reference(cls) -> "RateModel":
        """a_k = 3^k, b_k = 2 3^k."""
        return cls.geometric(3.0, 2.0)

    @classmethod
    def exit_reference(cls) -> "RateModel":
        """b_k = 2^k, a_k = 2^(k-1)."""
        return cls.geometric(2.0, 2.0, 0.5)

    @classmethod
    def natural_reference(cls) -> "RateModel":
        return cls.constant(1.0, 1.0)

    @classmethod
    def entrance_reference(cls) -> "RateModel":
        """a_k = 2 3^k, b_k = 3^k."""
        return cls.geometric(3.0, 0.5, 2.0)

    # evaluation --------------------------------------------------------------
    @property
    def param_dict(self) -> dict[str, float]:
        return dict(self.params)

    @property
    def max_index(self) -> int | None:
        """Largest index with defined rates (None for lazy families)."""
        return None if self.family is not None else len(self.b_explicit) - 1

    def log_rates(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Natural logs of ``a_0..a_n`` and ``b_0..b_n`` (``log a_0 = -inf``)."""
        k = np.arange(n + 1, dtype=float)
        if self.family is None:
            a, b = self._explicit_slice(n)
            with np.errstate(divide="ignore"):
                return np.log(a), np.log(b)
        p = self.param_dict
        if self.family == "constant":
            la = np.full(n + 1, math.log(p["a"]))
            lb = np.full(n + 1, math.log(p["b"]))
        elif self.family == "geometric":
            base = math.log(p["scale"]) + k * math.log(p["r"])
            la, lb = base, base + math.log(p["ratio"])
        else:
            ls = math.log(p["scale"])
            with np.errstate(divide="ignore"):
                la = ls + p["p"] * np.log(k)
            lb = ls + math.log(p["ratio"]) + p["p"] * np.log(k + 1.0)
        la = np.array(la, dtype=float)
        la[0] = -np.inf
        return la, np.array(lb, dtype=float)

    def rates(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Arrays ``a_0..a_n`` and ``b_0..b_n``.  Overflowing entries raise."""
        if self.family is None:
            return self._explicit_slice(n)
        p = self.param_dict
        k = np.arange(n + 1, dtype=float)
        with np.errstate(over="ignore"):
            if self.family == "constant":
                a, b = np.full(n + 1, p["a"]), np.full(n + 1, p["b"])
            elif self.family == "geometric":
                a = p["scale"] * p["r"] ** k
                b = p["ratio"] * a
            else:
                a = p["scale"] * k ** p["p"]
                b = p["ratio"] * p["scale"] * (k + 1.0) ** p["p"]
        a[0] = 0.0
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ModelError(f"rates overflow double precision below index {n}")
        return a, b

    def _explicit_slice(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        if n + 1 > len(self.b_explicit):
            raise ModelError(
                f"explicit rates have {len(self.b_explicit)} entries; index {n} requested")
        return (np.asarray(self.a_explicit[: n + 1], dtype=float),
                np.asarray(self.b_explicit[: n + 1], dtype=float))

    def analytic_boundary(self) -> "Boundary | None":
        """Closed-form class for the built-in families; None for explicit arrays."""
        if self.family is None:
            return None
        p = self.param_dict
        if self.family == "constant":
            return Boundary.NATURAL
        if self.family == "geometric":
            # mu_k = x^k and dc_k proportional to y^k
            x, y = p["ratio"] / p["r"], 1.0 / p["ratio"]
            sigma = (x * y < 1.0) if x > 1.0 else (y < 1.0)
            lam = (x * y < 1.0) if y > 1.0 else (x < 1.0)
            return Boundary.from_flags(sigma, lam)
        ratio, q = p["ratio"], p["p"]
        if ratio == 1.0:
            return Boundary.from_flags(q > 2.0, False)
        if ratio > 1.0:
            return Boundary.from_flags(q > 1.0, False)
        return Boundary.from_flags(False, q > 1.0)

    def to_json(self) -> dict[str, Any]:
        if self.family is None:
            return {"a": list(self.a_explicit), "b": list(self.b_explicit)}
        return {"family": self.family, "params": self.param_dict}


def _require(p: Mapping[str, float], names, fam) -> None:
    missing = [n for n in names if n not in p]
    if missing:
        raise ModelError(f"family {fam!r} missing parameters {missing}")


def _positive(p: Mapping[str, float], names) -> None:
    for n in names:
        if not (p[n] > 0 and math.isfinite(p[n])):
            raise ModelError(f"parameter {n} must be positive and finite, got {p[n]!r}")


_FAMILY_DEFAULTS = {
    "constant": {"a": 1.0, "b": 1.0},
    "geometric": {"scale": 1.0},
    "power": {"ratio": 1.0, "scale": 1.0},
}


def load_model(source: str | Path | Mapping[str, Any]) -> RateModel:
    """Read a model from a JSON file path or an already-parsed mapping."""
    if isinstance(source, Mapping):
        doc = source
    else:
        try:
            doc = json.loads(Path(source).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ModelError(f"cannot read model file {source}: {exc}") from exc
    if not isinstance(doc, Mapping):
        raise ModelError("model document must be a JSON object")
    if "family" in doc:
        extra = set(doc) - {"family", "params", "comment"}
        if extra:
            raise ModelError(f"unexpected keys {sorted(extra)}")
        fam = doc["family"]
        params = doc.get("params", {})
        if fam not in _FAMILY_DEFAULTS or not isinstance(params, Mapping):
            raise ModelError(f"unknown family {fam!r} or malformed params")
        merged = dict(_FAMILY_DEFAULTS[fam])
        for key, val in params.items():
            if not isinstance(val, (int, float)) or isinstance(val, bool):
                raise ModelError(f"parameter {key} must be a number")
            merged[key] = float(val)
        allowed = {"constant": {"a", "b"}, "geometric": {"r", "ratio", "scale"},
                   "power": {"p", "ratio", "scale"}}[fam]
        if set(merged) - allowed:
            raise ModelError(f"unknown parameters {sorted(set(merged) - allowed)} for {fam}")
        return RateModel(fam, tuple(sorted(merged.items())))
    if "a" in doc and "b" in doc:
        extra = set(doc) - {"a", "b", "comment"}
        if extra:
            raise ModelError(f"unexpected keys {sorted(extra)}")
        a, b = doc["a"], doc["b"]
        if not (isinstance(a, list) and isinstance(b, list)):
            raise ModelError("a and b must be arrays")
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in a + b):
            raise ModelError("rate arrays must contain numbers")
        return RateModel.explicit(a, b)
    raise ModelError('model needs either "family" or both "a" and "b"')


# --------------------------------------------------------------------------
# Scale and speed
# --------------------------------------------------------------------------

def _readonly(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    x.setflags(write=False)
    return x


@dataclass(frozen=True, eq=False)
class ScaleSpeed:
    """Scale and speed quantities on ``0..N+1``.

    ``c`` and ``mu`` have length N+2; ``dc`` has length N+1 (``dc_k`` for
    k = 0..N).  ``sigma_partial[k]`` and ``lambda_partial[k]`` are the sums
    over terms 0..k.  ``certificate`` is set when speed or scale leave the
    double range, in which case every later term is infinite and the
    affected series is certified divergent.
    """

    N: int
    c: np.ndarray
    dc: np.ndarray
    mu: np.ndarray
    log_mu: np.ndarray
    sigma_terms: np.ndarray
    lambda_terms: np.ndarray
    sigma_partial: np.ndarray
    lambda_partial: np.ndarray
    certificate: str | None = None

    @property
    def c_edge(self) -> float:
        return float(self.c[-1])

    def sigma_tail(self) -> np.ndarray:
        """``T_k = sum_{j>=k, j<=N} dc_j M_j`` with ``M_j = sum_{i<=j} mu_i``."""
        return np.cumsum(self.sigma_terms[::-1])[::-1]


def _cumsum_quiet(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return np.cumsum(x)


@lru_cache(maxsize=256)
def build_scale_speed(model: RateModel, N: int) -> ScaleSpeed:
    if N < 1:
        raise ModelError("N must be at least 1")
    la, lb = model.log_rates(N + 1)
    log_ratio = lb[:-1] - la[1:]                      # log(mu_{k+1}/mu_k), k = 0..N
    log_mu = np.concatenate(([0.0], np.cumsum(log_ratio)))
    log_dc = -(math.log(2.0) + lb[: N + 1] + log_mu[: N + 1])
    certificate = None
    # direct products where they fit in double range; logs otherwise
    mu = dc = None
    try:
        a, b = model.rates(N + 1)
    except ModelError:
        a = None
    if a is not None:
        with np.errstate(over="ignore", under="ignore", divide="ignore"):
            mu = np.concatenate(([1.0], np.cumprod(b[:-1] / a[1:])))
            dc = 0.5 / (b[: N + 1] * mu[: N + 1])
        if not (np.all(np.isfinite(mu)) and np.all(mu > 0) and np.all(np.isfinite(dc)) and np.all(dc > 0)):
            mu = dc = None
    if mu is None:
        with np.errstate(over="ignore", under="ignore"):
            mu, dc = np.exp(log_mu), np.exp(log_dc)
    bad_mu = np.nonzero(log_mu > _LOG_MAX)[0]
    bad_dc = np.nonzero(log_dc > _LOG_MAX)[0]
    if bad_mu.size or bad_dc.size:
        parts = []
        if bad_mu.size:
            parts.append(f"speed exceeds double range from k={bad_mu[0]}")
            mu = np.where(log_mu > _LOG_MAX, np.inf, mu)
        if bad_dc.size:
            parts.append(f"scale increment exceeds double range from k={bad_dc[0]}")
            dc = np.where(log_dc > _LOG_MAX, np.inf, dc)
        certificate = "; ".join(parts)
    with np.errstate(over="ignore", invalid="ignore"):
        c = np.concatenate(([0.0], np.cumsum(dc)))
        M = np.cumsum(mu[: N + 1])
        sig_terms = dc * M
        lam_terms = c[: N + 1] * mu[: N + 1]
    sig_terms = np.nan_to_num(sig_terms, nan=np.inf)
    lam_terms = np.nan_to_num(lam_terms, nan=np.inf)
    return ScaleSpeed(
        N=N,
        c=_readonly(c),
        dc=_readonly(dc),
        mu=_readonly(mu),
        log_mu=_readonly(log_mu),
        sigma_terms=_readonly(sig_terms),
        lambda_terms=_readonly(lam_terms),
        sigma_partial=_readonly(_cumsum_quiet(sig_terms)),
        lambda_partial=_readonly(_cumsum_quiet(lam_terms)),
        certificate=certificate,
    )


def mean_explosion_time(ss: ScaleSpeed) -> np.ndarray:
    """``E_k[eta]`` for k = 0..N from the truncated series.

    ``E_k eta = 2 sum_{j>=k} dc_j sum_{i<=j} mu_i``: twice the sigma tail.
    The factor 2 comes from ``QF = (1/2) D_mu F^+`` applied to ``Qh = -1``.
    """
    return 2.0 * ss.sigma_tail()


# --------------------------------------------------------------------------
# Classification
# --------------------------------------------------------------------------

class Boundary(str, enum.Enum):
    REGULAR = "Regular"
    EXIT = "Exit"
    ENTRANCE = "Entrance"
    NATURAL = "Natural"
    INCONCLUSIVE = "Inconclusive"

    @classmethod
    def from_flags(cls, sigma_finite: bool, lambda_finite: bool) -> "Boundary":
        return {
            (True, True): cls.REGULAR,
            (True, False): cls.EXIT,
            (False, True): cls.ENTRANCE,
            (False, False): cls.NATURAL,
        }[(bool(sigma_finite), bool(lambda_finite))]

    @property
    def explosive(self) -> bool:
        return self in (Boundary.REGULAR, Boundary.EXIT)


@dataclass(frozen=True)
class SeriesVerdict:
    status: str            # "finite" | "divergent" | "inconclusive"
    value: float           # last partial sum
    diverged_at: int | None
    reason: str

    def describe(self) -> str:
        if self.status == "finite":
            return f"{self.value:.15g}"
        if self.status == "divergent":
            return f"diverged at N={self.diverged_at}"
        return f"inconclusive (partial sum {self.value:.6g})"


@dataclass(frozen=True)
class BoundaryClass:
    kind: Boundary
    sigma: SeriesVerdict
    lam: SeriesVerdict
    N: int

    def to_json(self) -> dict[str, Any]:
        def sv(v: SeriesVerdict):
            return {"status": v.status, "partial_sum": v.value,
                    "diverged_at": v.diverged_at, "reason": v.reason}
        return {"class": self.kind.value, "N": self.N, "sigma": sv(self.sigma), "lambda": sv(self.lam)}


def _judge(terms: np.ndarray, partial: np.ndarray, threshold: float, window: int,
           rtol: float, certificate: bool) -> SeriesVerdict:
    total = float(partial[-1])
    if not math.isfinite(total) or total > threshold:
        idx = int(np.argmax(~np.isfinite(partial) | (partial > threshold)))
        why = "double-range certificate" if certificate and not math.isfinite(total) else "partial sum exceeds threshold"
        return SeriesVerdict("divergent", total, idx, why)
    tail = terms[-window:]
    if np.all(np.diff(tail) >= 0) and tail[-1] > 0:
        return SeriesVerdict("divergent", total, len(terms) - 1, "tail terms non-decreasing over window")
    growth = float(partial[-1] - partial[-window - 1]) if len(partial) > window else total
    if total > 0 and growth <= rtol * total:
        return SeriesVerdict("finite", total, None, "Cauchy window below tolerance")
    if total == 0.0:
        return SeriesVerdict("finite", 0.0, None, "all terms vanish")
    return SeriesVerdict("inconclusive", total, None,
                         f"relative growth {growth / total:.3g} over last {window} terms")


def classify_boundary(model: RateModel, N: int = 60, threshold: float = 1e12,
                      window: int = 10, rtol: float = 1e-6) -> BoundaryClass:
    """Judge sigma and lambda finite or divergent from partial sums up to N."""
    if not N >= window >= 2:
        raise ModelError("need N >= window >= 2")
    ss = build_scale_speed(model, N)
    cert = ss.certificate is not None
    s = _judge(ss.sigma_terms, ss.sigma_partial, threshold, window, rtol, cert)
    l = _judge(ss.lambda_terms, ss.lambda_partial, threshold, window, rtol, cert)
    if "inconclusive" in (s.status, l.status):
        kind = Boundary.INCONCLUSIVE
    else:
        kind = Boundary.from_flags(s.status == "finite", l.status == "finite")
    return BoundaryClass(kind, s, l, N)


# --------------------------------------------------------------------------
# Grid functions and discrete calculus
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GridFunction:
    """Values on ``0..N`` with an optional value at infinity.

    ``cauchy_gap`` is filled in by operations that estimate a limit at the
    truncation edge.
    """

    values: np.ndarray
    boundary: float | None = None
    cauchy_gap: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))

    @property
    def N(self) -> int:
        return len(self.values) - 1

    def __len__(self) -> int:
        return len(self.values)


def _values(F) -> np.ndarray:
    return F.values if isinstance(F, GridFunction) else np.asarray(F, dtype=float)


def apply_Q(model: RateModel, F) -> GridFunction:
    """``(QF)(k) = a_k F(k-1) - q_k F(k) + b_k F(k+1)`` on ``0..N-1``."""
    v = _values(F)
    N = len(v) - 1
    a, b = model.rates(N)
    a, b = a[:N], b[:N]
    left = np.concatenate(([0.0], v[: N - 1]))
    return GridFunction(a * left - (a + b) * v[:N] + b * v[1:])


def forward_derivative(F, ss: ScaleSpeed) -> GridFunction:
    """``F^+(k) = (F(k+1) - F(k)) / dc_k`` on ``0..N-1``.

    The boundary slot carries ``F^+(N-1)`` as the estimate of ``F^+(inf)``
    and ``cauchy_gap`` is ``|F^+(N-1) - F^+(N-2)|``.
    """
    v = _values(F)
    N = len(v) - 1
    if N > ss.N + 1:
        raise ModelError("scale data shorter than grid function")
    d = np.diff(v) / ss.dc[:N]
    gap = float(abs(d[-1] - d[-2])) if N >= 2 else None
    return GridFunction(d, boundary=float(d[-1]), cauchy_gap=gap)


class IdentityResidual(NamedTuple):
    absolute: float
    relative: float


def second_order_identity_check(model: RateModel, F, ss: ScaleSpeed) -> IdentityResidual:
    """Residual of ``QF = (1/2) D_mu F^+`` on ``0..N-1``.

    The relative value divides each row by ``a_k|F(k-1)| + q_k|F(k)| + b_k|F(k+1)|``,
    the natural rounding scale of ``QF``.
    """
    v = _values(F)
    N = len(v) - 1
    lhs = apply_Q(model, v).values
    dplus = forward_derivative(v, ss).values
    prev = np.concatenate(([0.0], dplus[: N - 1]))
    rhs = 0.5 * (dplus - prev) / ss.mu[:N]
    a, b = model.rates(N)
    left = np.concatenate(([0.0], np.abs(v[: N - 1])))
    scale = a[:N] * left + (a[:N] + b[:N]) * np.abs(v[:N]) + b[:N] * np.abs(v[1:])
    err = np.abs(lhs - rhs)
    rel = np.where(scale > 0, err / np.where(scale > 0, scale, 1.0), err)
    return IdentityResidual(float(err.max(initial=0.0)), float(rel.max(initial=0.0)))


def dirichlet_energy(F, G, ss: ScaleSpeed, kappa: float = 0.0) -> float:
    """``(1/2) sum_{k<N} dF dG / dc_k + kappa F(inf) G(inf)``."""
    if kappa < 0:
        raise ModelError("kappa must be non-negative")
    f, g = _values(F), _values(G)
    if len(f) != len(g):
        raise ModelError("grid functions differ in length")
    N = len(f) - 1
    e = 0.5 * float(np.sum(np.diff(f) * np.diff(g) / ss.dc[:N]))
    if kappa > 0:
        fb = F.boundary if isinstance(F, GridFunction) else None
        gb = G.boundary if isinstance(G, GridFunction) else None
        if fb is None or gb is None:
            raise ModelError("kappa > 0 needs boundary values F(inf), G(inf)")
        e += kappa * fb * gb
    return e


def energy_tail(F: GridFunction, G: GridFunction, ss: ScaleSpeed) -> float:
    """Energy of the last link ``N -> inf`` with infinity placed at ``c_{N+1}``.

    Reported separately from :func:`dirichlet_energy`.
    """
    if F.boundary is None or G.boundary is None:
        raise ModelError("tail energy needs boundary values")
    N = F.N
    return 0.5 * (F.boundary - F.values[-1]) * (G.boundary - G.values[-1]) / ss.dc[N]
