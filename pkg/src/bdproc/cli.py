"""Command-line front end.

Exit codes: 0 ok, 1 a verification failed, 2 input error, 3 inconclusive,
4 inadmissible triple, 5 unsupported construction, 6 wrong boundary class.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import time
from importlib import metadata
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .model import Boundary, ModelError, RateModel, build_scale_speed, classify_boundary, load_model
from .resolvent import (
    AdmissibilityError,
    BoundaryClassError,
    BoundaryTriple,
    InconclusiveClass,
    boundary_class,
    ReturnDistribution,
    check_admissible,
    dump_resolvent_csv,
    load_pi,
    load_triple,
    verify_resolvent_equation,
    wang_yang_resolvent,
)
from .semigroup import (
    build_generator,
    convergence_experiment,
    dump_transition_csv,
    uniformized_transition,
)
from .simulate import SimConfig, UnsupportedConstruction, estimate_transition, resolve_jobs, sample_paths

EXIT_OK, EXIT_FAILED, EXIT_INPUT, EXIT_INCONCLUSIVE = 0, 1, 2, 3
EXIT_INADMISSIBLE, EXIT_UNSUPPORTED, EXIT_WRONG_CLASS = 4, 5, 6


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------

def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _version() -> str:
    try:
        return metadata.version("bdproc")
    except metadata.PackageNotFoundError:
        return "unknown"


def manifest_path(out: str | Path) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def write_manifest(command: str, inputs: Sequence[str | Path], config: dict[str, Any],
                   outputs: Sequence[str | Path], wall_clock: float) -> Path:
    """Write ``<first output>.manifest.json`` describing the run."""
    doc = {
        "command": command,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "config": config,
        "version": _version(),
        "wall_clock_seconds": round(wall_clock, 3),
        "outputs": {str(p): sha256_file(p) for p in outputs},
    }
    path = manifest_path(outputs[0])
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path: str | Path) -> dict[str, Any]:
    """Load a manifest and recompute every digest; raise ValueError on mismatch."""
    doc = json.loads(Path(path).read_text())
    for group in ("inputs", "outputs"):
        for p, digest in doc[group].items():
            if not Path(p).exists():
                raise ValueError(f"{group[:-1]} {p} listed in manifest is missing")
            if sha256_file(p) != digest:
                raise ValueError(f"digest mismatch for {p}")
    return doc


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _emit(args, report: dict[str, Any], text: list[str]) -> None:
    if args.json:
        print(json.dumps(report, indent=2, default=float))
    else:
        print("\n".join(text))


def _model(path: str) -> RateModel:
    return load_model(path)


def _explosive_class(model: RateModel, N: int = 60) -> Boundary:
    kind = boundary_class(model, N)
    if kind is Boundary.INCONCLUSIVE:
        raise CliError(EXIT_INCONCLUSIVE, "boundary class is inconclusive; raise --N or check the rates")
    return kind


def _fmt(x: float) -> str:
    return repr(float(x))


# --------------------------------------------------------------------------
# classify
# --------------------------------------------------------------------------

def cmd_classify(args) -> int:
    model = _model(args.model)
    window = max(2, min(args.window, args.N))
    bc = classify_boundary(model, N=args.N, threshold=args.threshold, window=window)
    report = dict(bc.to_json(), model=args.model, window=window)
    text = [f"model: {args.model}",
            f"sigma partial sum (N={args.N}): {bc.sigma.value:.15g} [{bc.sigma.status}: {bc.sigma.reason}]",
            f"lambda partial sum (N={args.N}): {bc.lam.value:.15g} [{bc.lam.status}: {bc.lam.reason}]",
            f"class: {bc.kind.value}"]
    _emit(args, report, text)
    return EXIT_INCONCLUSIVE if bc.kind is Boundary.INCONCLUSIVE else EXIT_OK


# --------------------------------------------------------------------------
# resolvent
# --------------------------------------------------------------------------

def cmd_resolvent(args) -> int:
    t0 = time.perf_counter()
    model = _model(args.model)
    triple = load_triple(args.triple)
    kind = _explosive_class(model)
    check_admissible(model, triple)
    N = args.N
    evs = [wang_yang_resolvent(model, None, triple, a, N) for a in args.alpha]
    checks = []
    for ea, eb in zip(evs, evs[1:]):
        r = verify_resolvent_equation(ea, eb, window=args.window)
        checks.append(("resolvent equation", f"alpha={ea.alpha:g},{eb.alpha:g}", r, r <= args.tol_resolvent))
    honest = triple.gamma == 0 and not triple.is_minimal and kind.explosive
    lo = N - args.window + 1
    mu = build_scale_speed(model, N).mu[: lo]
    for ev in evs:
        hon = float(np.max(np.abs(ev.alpha * ev.row_sums[:lo] - 1.0)))
        if honest:
            checks.append(("honesty", f"alpha={ev.alpha:g}", hon, hon <= 1e-6))
        elif not kind.explosive:
            # honest in the limit; the Dirichlet cut at N+1 leaks mass
            checks.append(("truncation leakage", f"alpha={ev.alpha:g}", hon, True))
        sym_m = mu[:, None] * ev.psi[:lo, :lo]
        sym = float(np.max(np.abs(sym_m - sym_m.T)))
        if triple.total_mass == 0:
            checks.append(("mu-symmetry", f"alpha={ev.alpha:g}", sym, sym <= 1e-8))
        else:
            checks.append(("mu-asymmetry (nu > 0)", f"alpha={ev.alpha:g}", sym, sym > 1e-4))
        checks.append(("truncation tail bound", f"alpha={ev.alpha:g}", ev.tail_error, True))
    all_ok = all(c[3] for c in checks)
    text = [f"class: {kind.value}; N={N}; triple={json.dumps(triple.to_json())}"]
    text += [f"[{'PASS' if ok else 'FAIL'}] {name} ({where}): {val:.3e}" for name, where, val, ok in checks]
    outputs = []
    if args.out:
        states = range(args.states) if args.states else None
        dump_resolvent_csv(args.out, evs, rows=states, cols=states)
        outputs.append(args.out)
        write_manifest("resolvent", [args.model, args.triple],
                       {"alpha": args.alpha, "N": N, "window": args.window, "states": args.states},
                       outputs, time.perf_counter() - t0)
        text.append(f"wrote {args.out}")
    report = {"class": kind.value, "N": N, "triple": triple.to_json(),
              "checks": [{"name": n, "where": w, "value": v, "pass": ok} for n, w, v, ok in checks],
              "outputs": outputs}
    _emit(args, report, text)
    return EXIT_OK if all_ok else EXIT_FAILED


# --------------------------------------------------------------------------
# transition
# --------------------------------------------------------------------------

def _process_inputs(args, model: RateModel):
    triple = load_triple(args.triple) if getattr(args, "triple", None) else None
    pi = load_pi(args.pi) if getattr(args, "pi", None) else None
    if triple is not None and pi is not None:
        raise CliError(EXIT_INPUT, "give either --triple or --pi")
    return triple, pi


def cmd_transition(args) -> int:
    t0 = time.perf_counter()
    model = _model(args.model)
    triple, pi = _process_inputs(args, model)
    _explosive_class(model)
    N = args.N
    tr = triple.truncated(N) if triple is not None else None
    gen = build_generator(model, None, N, triple=tr, pi=pi)
    evs = [uniformized_transition(gen, t) for t in args.t]
    states = list(range(args.states))
    text = [f"generator: {gen.mode} closure, N={N}, boundary speed {gen.boundary_scale:.3g}"]
    for ev in evs:
        text.append(f"t={ev.t:g}: rate {ev.rate:.3g}, splits {ev.splits}, terms {ev.terms}, "
                    f"error bound {ev.error_bound:.1e}")
    outputs = []
    if args.out:
        dump_transition_csv(args.out, evs, states)
        outputs.append(args.out)
        inputs = [args.model] + [p for p in (args.triple, args.pi) if p]
        write_manifest("transition", inputs, {"t": args.t, "N": N, "states": args.states},
                       outputs, time.perf_counter() - t0)
        text.append(f"wrote {args.out}")
    report = {"N": N, "mode": gen.mode, "outputs": outputs,
              "p": {repr(ev.t): ev.p[np.ix_(states, states)].tolist() for ev in evs}}
    _emit(args, report, text)
    return EXIT_OK


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    model = _model(args.model)
    triple, pi = _process_inputs(args, model)
    kind = _explosive_class(model)
    mode = args.mode
    if mode == "doob" and pi is None:
        if triple is None:
            raise CliError(EXIT_INPUT, "doob mode needs --pi or a beta = 0 --triple")
        if triple.beta != 0 or math.isinf(triple.total_mass):
            raise CliError(EXIT_INPUT, "doob mode needs beta = 0 and a finite nu")
        pi = ReturnDistribution(tuple((k, v / (triple.total_mass + triple.gamma))
                                      for k, v in enumerate(triple.nu_weights(args.n_cap - 1)) if v > 0),
                                triple.gamma / (triple.total_mass + triple.gamma))
    if mode == "feller" and triple is None:
        raise CliError(EXIT_INPUT, "feller mode needs --triple")
    horizon = max(args.t)
    cfg = SimConfig(n_cap=args.n_cap, horizon=horizon, paths=args.paths, seed=args.seed,
                    antithetic=args.antithetic, agg_level=args.agg_level, jobs=args.jobs or 0)
    Nref = args.n_cap - 1
    if mode == "minimal":
        gen = build_generator(model, None, Nref)
    elif mode == "doob":
        gen = build_generator(model, None, Nref, pi=pi)
    else:
        if math.isinf(triple.total_mass):
            raise UnsupportedConstruction(
                "no pathwise construction is known for |nu| = infinity; use the converge subcommand")
        gen = build_generator(model, None, Nref, triple=triple.truncated(Nref))
    ref = {t: uniformized_transition(gen, t).p for t in args.t}
    rows, n_fail = [], 0
    for i in args.starts:
        batch = sample_paths(model, mode, i, args.t, cfg, pi=pi if mode == "doob" else None,
                             triple=triple if mode == "feller" else None)
        for j in args.states:
            for t in args.t:
                est, se = estimate_transition(batch, i, j, t)
                p_ref = float(ref[t][i, j])
                se_ref = math.sqrt(p_ref * (1.0 - p_ref) / batch.n_paths)
                z = (est - p_ref) / se_ref if se_ref > 0 else (0.0 if est == p_ref else math.inf)
                verdict = "PASS" if abs(z) <= 3.0 else "FAIL"
                n_fail += verdict == "FAIL"
                rows.append([i, j, _fmt(t), _fmt(est), _fmt(se), batch.n_paths, _fmt(p_ref), _fmt(z), verdict])
    header = ["i", "j", "t", "estimate", "stderr", "n_paths", "reference", "z", "verdict"]
    text = [f"mode {mode}, class {kind.value}, {args.paths} paths per start, seed {args.seed}"]
    text += [",".join(map(str, header))] + [",".join(map(str, r)) for r in rows]
    text.append(f"{len(rows) - n_fail}/{len(rows)} cells within 3 standard errors of the reference")
    outputs = []
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        outputs.append(args.out)
        inputs = [args.model] + [p for p in (args.triple, args.pi) if p]
        write_manifest("simulate", inputs,
                       {"mode": mode, "paths": args.paths, "seed": args.seed, "t": args.t,
                        "starts": args.starts, "states": args.states, "n_cap": args.n_cap,
                        "agg_level": args.agg_level, "antithetic": args.antithetic,
                        "reference_N": Nref, "jobs": resolve_jobs(cfg.jobs)},
                       outputs, time.perf_counter() - t0)
    report = {"mode": mode, "rows": [dict(zip(header, r)) for r in rows], "failures": n_fail,
              "outputs": outputs}
    _emit(args, report, text)
    return EXIT_OK if n_fail == 0 else EXIT_FAILED


# --------------------------------------------------------------------------
# converge
# --------------------------------------------------------------------------

def cmd_converge(args) -> int:
    t0 = time.perf_counter()
    model = _model(args.model)
    target = load_triple(args.triple)
    _explosive_class(model)
    rows = convergence_experiment(model, target, args.schedule, args.alphas, args.N, js=args.js)
    header = ["n", "alpha", "j", "sup_gap_resolvent", "sup_gap_transition"]
    table = [[r.n, _fmt(r.alpha), r.j, _fmt(r.sup_gap_resolvent), _fmt(r.sup_gap_transition)] for r in rows]
    text = [",".join(header)] + [",".join(map(str, r)) for r in table]
    outputs = []
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(table)
        outputs.append(args.out)
        write_manifest("converge", [args.model, args.triple],
                       {"schedule": args.schedule, "alphas": args.alphas, "N": args.N, "js": args.js},
                       outputs, time.perf_counter() - t0)
    _emit(args, {"rows": [dict(zip(header, r)) for r in table], "outputs": outputs}, text)
    return EXIT_OK


# --------------------------------------------------------------------------
# verify
# --------------------------------------------------------------------------

def cmd_verify(args) -> int:
    from .verify import run_all
    results = run_all(args.criteria or None, mc_paths=args.mc_paths, jobs=args.jobs,
                      echo=None if args.json else print)
    if args.json:
        print(json.dumps([{"criterion": r.number, "title": r.title, "pass": r.passed,
                           "elapsed": r.elapsed, "lines": r.lines} for r in results], indent=2, default=str))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bdproc", description=__doc__.splitlines()[0])
    p.add_argument("--json", action="store_true", help="print a JSON report instead of text")
    p.add_argument("--jobs", type=int, default=None,
                   help="worker processes for simulation (default: BD_RAY_JOBS or 1)")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("classify", help="classify the boundary at infinity")
    c.add_argument("model")
    c.add_argument("--N", type=int, default=60)
    c.add_argument("--threshold", type=float, default=1e12)
    c.add_argument("--window", type=int, default=10)
    c.set_defaults(func=cmd_classify)

    r = sub.add_parser("resolvent", help="assemble Psi for a boundary triple and check it")
    r.add_argument("model")
    r.add_argument("triple")
    r.add_argument("--alpha", type=float, nargs="+", default=[1.0, 2.0])
    r.add_argument("--N", type=int, default=200)
    r.add_argument("--window", type=int, default=20)
    r.add_argument("--states", type=int, default=None, help="dump only states 0..K-1")
    r.add_argument("--tol-resolvent", type=float, default=1e-5)
    r.add_argument("--out")
    r.set_defaults(func=cmd_resolvent)

    t = sub.add_parser("transition", help="transition matrix by uniformization")
    t.add_argument("model")
    g = t.add_mutually_exclusive_group()
    g.add_argument("--triple")
    g.add_argument("--pi")
    t.add_argument("--t", type=float, nargs="+", default=[0.5, 1.0])
    t.add_argument("--N", type=int, default=47)
    t.add_argument("--states", type=int, default=3)
    t.add_argument("--out")
    t.set_defaults(func=cmd_transition)

    s = sub.add_parser("simulate", help="Monte Carlo paths with reference values")
    s.add_argument("model")
    s.add_argument("--mode", choices=("minimal", "doob", "feller"), required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--triple")
    g.add_argument("--pi")
    s.add_argument("--paths", type=int, default=10_000)
    s.add_argument("--seed", type=int, default=20231015)
    s.add_argument("--t", type=float, nargs="+", default=[0.5, 1.0])
    s.add_argument("--starts", type=int, nargs="+", default=[0, 1, 2])
    s.add_argument("--states", type=int, nargs="+", default=[0, 1, 2])
    s.add_argument("--n-cap", type=int, default=48)
    s.add_argument("--agg-level", type=int, default=10)
    s.add_argument("--antithetic", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("converge", help="approximation by Feller triples")
    v.add_argument("model")
    v.add_argument("triple")
    v.add_argument("--schedule", type=int, nargs="+", default=[5, 10, 20, 40])
    v.add_argument("--alphas", type=float, nargs="+", default=[1.0])
    v.add_argument("--N", type=int, default=100)
    v.add_argument("--js", type=int, nargs="+", default=[0])
    v.add_argument("--out")
    v.set_defaults(func=cmd_converge)

    a = sub.add_parser("verify", help="run the acceptance suite")
    a.add_argument("--criteria", type=int, nargs="+", choices=range(1, 9))
    a.add_argument("--mc-paths", type=int, default=100_000)
    a.set_defaults(func=cmd_verify)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:          # argparse usage errors are input errors
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return args.func(args)
    except CliError as exc:
        msg, code = str(exc), exc.code
    except InconclusiveClass as exc:
        msg, code = str(exc), EXIT_INCONCLUSIVE
    except AdmissibilityError as exc:
        code = EXIT_WRONG_CLASS if exc.condition == "boundary" else EXIT_INADMISSIBLE
        msg = f"inadmissible triple, condition {exc}"
    except UnsupportedConstruction as exc:
        msg, code = str(exc), EXIT_UNSUPPORTED
    except BoundaryClassError as exc:
        msg, code = f"wrong boundary class: {exc}", EXIT_WRONG_CLASS
    except (ModelError, ValueError, OSError) as exc:
        msg, code = f"input error: {exc}", EXIT_INPUT
    print(f"bdproc: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
