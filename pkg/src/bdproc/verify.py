"""The acceptance suite: eight numbered checks with their tolerances.

Each ``criterion_k`` returns a :class:`CriterionResult`; :func:`run_all`
runs the selection in order.  Tolerances live in the function bodies next to
the quantity they bound.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import (
    Boundary,
    RateModel,
    build_scale_speed,
    classify_boundary,
    second_order_identity_check,
)
from .resolvent import (
    BoundaryTriple,
    ReturnDistribution,
    doob_resolvent,
    recover_density_matrix,
    verify_generator_boundary,
    verify_resolvent_equation,
    wang_yang_resolvent,
)
from .semigroup import build_generator, convergence_experiment, laplace_crosscheck, uniformized_transition
from .simulate import SimConfig, estimate_transition, sample_paths

__all__ = ["CriterionResult", "CRITERIA", "run_all"]

SEED = 20231015


@dataclass
class CriterionResult:
    number: int
    title: str
    passed: bool
    elapsed: float
    budget: float
    lines: list[str] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def summary(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        budget = f", budget {self.budget:g}s" if self.budget > 0 else ""
        return f"[{tag}] criterion {self.number}: {self.title} ({self.elapsed:.2f}s{budget})"


def _families() -> dict[str, RateModel]:
    return {"Regular": RateModel.regular_reference(), "Exit": RateModel.exit_reference(),
            "Natural": RateModel.natural_reference(), "Entrance": RateModel.entrance_reference()}


def _resolvent_triples() -> dict[str, BoundaryTriple]:
    return {
        "minimal": BoundaryTriple.minimal(),
        "doob(delta_0)": BoundaryTriple.from_dict({0: 1.0}, 0.0, 0.0),
        "elastic(0,1,1)": BoundaryTriple.from_dict({}, 1.0, 1.0),
        "geometric(nu,0.5,1)": BoundaryTriple.geometric_nu(1.0, 0.5, 0.5, 1.0),
    }


# --------------------------------------------------------------------------

def criterion_1() -> CriterionResult:
    res = CriterionResult(1, "boundary classification", True, 0.0, 0.0)
    expected = {"Regular": Boundary.REGULAR, "Exit": Boundary.EXIT, "Natural": Boundary.NATURAL}
    fam = _families()
    for name, want in expected.items():
        times = []
        for _ in range(7):
            build_scale_speed.cache_clear()
            t0 = time.perf_counter()
            bc = classify_boundary(fam[name], N=60)
            times.append(time.perf_counter() - t0)
        ms = 1e3 * float(np.median(times))
        ok = bc.kind is want and ms < 1.0
        res.passed &= ok
        res.lines.append(f"{name}: {bc.kind.value} (want {want.value}), median {ms:.3f} ms")
        res.metrics[name] = {"class": bc.kind.value, "ms": ms}
    sigma = classify_boundary(fam["Exit"], N=60).sigma.value
    ok = abs(sigma - 2.0) <= 1e-10
    res.passed &= ok
    res.lines.append(f"Exit sigma = {sigma:.16g}, |sigma - 2| = {abs(sigma - 2.0):.2e}")
    res.metrics["sigma_exit"] = sigma
    return res


def criterion_2() -> CriterionResult:
    res = CriterionResult(2, "algebraic identities", True, 0.0, 1.0)
    rng = np.random.default_rng(SEED)
    N = 60
    for name, model in _families().items():
        ss = build_scale_speed(model, N + 1)
        worst = max(second_order_identity_check(model, rng.standard_normal(N + 1), ss).relative
                    for _ in range(100))
        ss2 = build_scale_speed(model, 200)
        a, b = model.rates(200)
        speed = float(np.max(np.abs(ss2.dc * 2.0 * b * ss2.mu[:201] - 1.0)))
        ok = worst <= 1e-12 and speed <= 1e-14
        res.passed &= ok
        res.lines.append(f"{name}: QF identity rel {worst:.2e}; dc*2b*mu - 1 {speed:.2e}")
        res.metrics[name] = {"identity": worst, "scale_speed": speed}
    return res


def _sym_defect(psi: np.ndarray, mu: np.ndarray) -> float:
    m = mu[: psi.shape[0], None] * psi
    return float(np.max(np.abs(m - m.T)))


def criterion_3() -> CriterionResult:
    res = CriterionResult(3, "resolvent consistency", True, 0.0, 10.0)
    model, N = RateModel.regular_reference(), 200
    ss = build_scale_speed(model, N)
    for name, tr in _resolvent_triples().items():
        e1 = wang_yang_resolvent(model, ss, tr, 1.0, N)
        e2 = wang_yang_resolvent(model, ss, tr, 2.0, N)
        req = verify_resolvent_equation(e1, e2)
        ok = req <= 1e-5
        msg = f"{name}: resolvent eq {req:.2e}"
        sym = _sym_defect(e1.psi, ss.mu)
        if tr.total_mass == 0:
            ok &= sym <= 1e-8
            msg += f"; mu-symmetry defect {sym:.2e} (<= 1e-8)"
        else:
            ok &= sym > 1e-4
            msg += f"; mu-symmetry defect {sym:.2e} (> 1e-4)"
        # the minimal process loses mass at explosion, so only gamma = 0 non-minimal triples are honest
        if tr.gamma == 0 and not tr.is_minimal:
            hon = float(np.max(np.abs(e1.alpha * e1.row_sums - 1.0)))
            ok &= hon <= 1e-6
            msg += f"; honesty {hon:.2e}"
        res.passed &= ok
        res.lines.append(msg)
        res.metrics[name] = {"resolvent_eq": req, "symmetry": sym}
    pis = {"delta_0": ReturnDistribution.delta(0),
           "geometric+cemetery": ReturnDistribution(tuple((k, 0.5 ** (k + 1) / 1.5) for k in range(N + 1)),
                                                    1.0 - sum(0.5 ** (k + 1) / 1.5 for k in range(N + 1)))}
    for name, pi in pis.items():
        d = doob_resolvent(model, pi, 1.0, N, ss)
        w = wang_yang_resolvent(model, ss, pi.as_triple(), 1.0, N)
        gap = float(np.max(np.abs(d.psi - w.psi)))
        res.passed &= gap <= 1e-12
        res.lines.append(f"Doob {name} vs triple: max entry gap {gap:.2e}")
        res.metrics[f"doob_{name}"] = gap
    return res


def criterion_4() -> CriterionResult:
    res = CriterionResult(4, "generator boundary condition", True, 0.0, 5.0)
    model, N, alpha = RateModel.regular_reference(), 200, 1.0
    ss = build_scale_speed(model, N)
    k = np.arange(N + 1)
    rng = np.random.default_rng(SEED)
    fs = {"1": np.ones(N + 1), "1_{0}": (k == 0).astype(float), "1_{5}": (k == 5).astype(float),
          "(2/3)^k": (2.0 / 3.0) ** k, "uniform": rng.uniform(-1, 1, N + 1)}
    triples = {"(0,1,1)": BoundaryTriple.from_dict({}, 1.0, 1.0),
               "(delta_0,0,1)": BoundaryTriple.from_dict({0: 1.0}, 0.0, 1.0),
               "(geometric nu,0.5,1)": BoundaryTriple.geometric_nu(1.0, 0.5, 0.5, 1.0)}
    worst = {"backward": 0.0, "resolved": 0.0, "absolute": 0.0, "boundary_excess": -np.inf}
    for tname, tr in triples.items():
        for fname, f in fs.items():
            c = verify_generator_boundary(model, ss, tr, alpha, f, N)
            ok = (c.interior_backward <= 1e-10 and c.interior_resolved <= 1e-10
                  and c.boundary <= 1e-6 + c.cauchy_gap)
            res.passed &= ok
            worst["backward"] = max(worst["backward"], c.interior_backward)
            worst["resolved"] = max(worst["resolved"], c.interior_resolved)
            worst["absolute"] = max(worst["absolute"], c.interior_abs)
            worst["boundary_excess"] = max(worst["boundary_excess"], c.boundary - c.cauchy_gap)
            if not ok:
                res.lines.append(f"{tname} f={fname}: {c}")
    res.lines.append(f"interior backward error max {worst['backward']:.2e} (<= 1e-10)")
    res.lines.append(f"interior absolute residual on resolvable rows max {worst['resolved']:.2e} (<= 1e-10)")
    res.lines.append(f"boundary residual minus Cauchy gap max {worst['boundary_excess']:.2e} (<= 1e-6)")
    res.lines.append(f"absolute residual over all rows {worst['absolute']:.2e} "
                     "(rounding floor eps*q_N*|F| at N=200; informational)")
    res.metrics.update(worst)
    return res


def criterion_5() -> CriterionResult:
    res = CriterionResult(5, "semigroup and Laplace agreement", True, 0.0, 30.0)
    model, N = RateModel.regular_reference(), 200
    for name, kw in {"minimal": {}, "doob(delta_0)": {"pi": ReturnDistribution.delta(0)}}.items():
        gen = build_generator(model, None, N, **kw)
        lc = laplace_crosscheck(gen, 1.0, 0, 0, T=20.0)
        res.passed &= lc.rel_gap <= 1e-3
        res.lines.append(f"{name}: integral {lc.integral:.12f} psi {lc.psi:.12f} rel gap {lc.rel_gap:.2e} "
                         f"(quadrature {lc.quad_error:.1e}, tail {lc.tail_bound:.1e})")
        res.metrics[name] = lc.rel_gap
    return res


def _mc_processes():
    return {
        "minimal": ("minimal", {}, {}),
        "doob(delta_0)": ("doob", {"pi": ReturnDistribution.delta(0)}, {"pi": ReturnDistribution.delta(0)}),
        "elastic(0,1,1)": ("feller", {"triple": BoundaryTriple.from_dict({}, 1.0, 1.0)},
                           {"triple": BoundaryTriple.from_dict({}, 1.0, 1.0)}),
        "feller({0:1,2:0.5},0.5,1)": ("feller", {"triple": BoundaryTriple.from_dict({0: 1.0, 2: 0.5}, 0.5, 1.0)},
                                      {"triple": BoundaryTriple.from_dict({0: 1.0, 2: 0.5}, 0.5, 1.0)}),
    }


def criterion_6(paths: int = 100_000, jobs: int | None = None) -> CriterionResult:
    res = CriterionResult(6, "Monte Carlo master check", True, 0.0, 120.0)
    model = RateModel.regular_reference()
    cfg = SimConfig(paths=paths, seed=SEED, horizon=1.0, jobs=jobs or 0)
    states, times = (0, 1, 2), (0.5, 1.0)
    Nref = cfg.n_cap - 1
    worst_z, n_cells = 0.0, 0
    for name, (mode, sim_kw, gen_kw) in _mc_processes().items():
        gen = build_generator(model, None, Nref, **gen_kw)
        ref = {t: uniformized_transition(gen, t).p for t in times}
        fails = 0
        for i in states:
            batch = sample_paths(model, mode, i, times, cfg, **sim_kw)
            for j in states:
                for t in times:
                    p_ref = float(ref[t][i, j])
                    est, _ = estimate_transition(batch, i, j, t)
                    se = np.sqrt(p_ref * (1.0 - p_ref) / batch.n_paths)
                    z = (est - p_ref) / se if se > 0 else 0.0
                    worst_z = max(worst_z, abs(z))
                    n_cells += 1
                    if abs(z) > 3.0:
                        fails += 1
                        res.lines.append(f"{name} i={i} j={j} t={t}: est {est:.5f} ref {p_ref:.5f} z {z:+.2f}")
        res.passed &= fails == 0
        res.lines.append(f"{name}: {18 - fails}/18 cells within 3 standard errors")
    # determinism and independence from chunking
    small = SimConfig(paths=3000, seed=SEED, chunk=1000)
    mode, kw, _ = _mc_processes()["feller({0:1,2:0.5},0.5,1)"]
    b1 = sample_paths(model, mode, 0, times, small, **kw)
    b2 = sample_paths(model, mode, 0, times, SimConfig(paths=3000, seed=SEED, chunk=777), **kw)
    same = bool(np.array_equal(b1.states, b2.states) and np.array_equal(b1.events, b2.events))
    res.passed &= same
    res.lines.append(f"fixed seed reruns identical: {same}; worst |z| over {n_cells} cells {worst_z:.2f}")
    res.metrics.update(worst_z=worst_z, deterministic=same)
    return res


def criterion_7() -> CriterionResult:
    res = CriterionResult(7, "approximation by Feller triples", True, 0.0, 60.0)
    model = RateModel.regular_reference()
    target = BoundaryTriple.geometric_nu(1.0, 0.5, 0.0, 1.0)
    ns = (5, 10, 20, 40)
    rows = convergence_experiment(model, target, ns, (1.0,), 100, js=(0, 1, 2))
    gaps = [max(r.sup_gap_resolvent for r in rows if r.n == n) for n in ns]
    tgaps = [next(r.sup_gap_transition for r in rows if r.n == n) for n in ns]
    dec = all(x > y for x, y in zip(gaps, gaps[1:]))
    tdec = all(x > y for x, y in zip(tgaps, tgaps[1:]))
    res.passed = dec and gaps[-1] <= 1e-4 and tdec
    for n, g, tg in zip(ns, gaps, tgaps):
        res.lines.append(f"n={n:>2}: resolvent sup gap {g:.3e}; transition sup gap {tg:.3e}")
    res.lines.append(f"strictly decreasing: resolvent {dec}, transition {tdec}")
    res.metrics.update(gaps=gaps, transition_gaps=tgaps)
    return res


def criterion_8() -> CriterionResult:
    res = CriterionResult(8, "density matrix recovery", True, 0.0, 0.0)
    model, N = RateModel.regular_reference(), 200
    alphas = (1e2, 1e3, 1e4, 1e5)
    for name, tr in _resolvent_triples().items():
        worst_rel, worst_off = 0.0, 0.0
        for i, j in ((0, 0), (1, 0), (0, 1)):
            d = recover_density_matrix(model, tr, alphas, i, j, N)
            worst_rel = max(worst_rel, abs(d.estimate - d.reference) / abs(d.reference))
        for i, j in ((0, 2), (2, 0), (0, 3), (3, 1)):
            d = recover_density_matrix(model, tr, alphas, i, j, N)
            a, b = model.rates(max(i, j))
            qmax = float(np.max(a + b))
            worst_off = max(worst_off, abs(d.estimate) / qmax)
        ok = worst_rel <= 1e-2 and worst_off <= 1e-3
        res.passed &= ok
        res.lines.append(f"{name}: neighbour entries rel err {worst_rel:.2e}; "
                         f"far entries |est|/q_max {worst_off:.2e}")
        res.metrics[name] = {"rel": worst_rel, "far": worst_off}
    return res


CRITERIA: dict[int, Callable[..., CriterionResult]] = {
    1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4,
    5: criterion_5, 6: criterion_6, 7: criterion_7, 8: criterion_8,
}


def run_all(selected=None, *, mc_paths: int = 100_000, jobs: int | None = None,
            echo: Callable[[str], None] | None = None) -> list[CriterionResult]:
    out = []
    for k in selected or sorted(CRITERIA):
        t0 = time.perf_counter()
        r = CRITERIA[k](paths=mc_paths, jobs=jobs) if k == 6 else CRITERIA[k]()
        r.elapsed = time.perf_counter() - t0
        if r.budget > 0 and r.elapsed > r.budget:
            r.passed = False
            r.lines.append(f"runtime {r.elapsed:.1f}s exceeds budget {r.budget:g}s")
        out.append(r)
        if echo:
            echo(r.summary())
            for line in r.lines:
                echo("    " + line)
    return out
