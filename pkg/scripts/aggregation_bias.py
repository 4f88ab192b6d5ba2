"""Bias of Feller simulation against the aggregation level L.

Compares P_t(i, j) estimated by simulation with the uniformized transition
matrix of the truncated generator and prints z-scores per (L, i, j).

    python scripts/aggregation_bias.py --paths 200000 --levels 5 7 9 10
"""
import argparse
import math

from bdproc.model import RateModel
from bdproc.resolvent import BoundaryTriple
from bdproc.semigroup import build_generator, uniformized_transition
from bdproc.simulate import SimConfig, estimate_transition, sample_paths


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=100_000)
    ap.add_argument("--levels", type=int, nargs="+", default=[5, 7, 9, 10])
    ap.add_argument("--t", type=float, default=1.0)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    model = RateModel.regular_reference()
    triple = BoundaryTriple.from_dict({0: 1.0, 2: 0.5}, 0.5, 1.0)
    P = uniformized_transition(build_generator(model, None, 47, triple=triple), args.t).p
    print("L,i,j,estimate,reference,z")
    for L in args.levels:
        cfg = SimConfig(paths=args.paths, horizon=args.t, agg_level=L, jobs=args.jobs)
        worst = 0.0
        for i in (0, 1, 2):
            batch = sample_paths(model, "feller", i, (args.t,), cfg, triple=triple)
            for j in (0, 1, 2):
                est, _ = estimate_transition(batch, i, j, args.t)
                se = math.sqrt(P[i, j] * (1 - P[i, j]) / args.paths)
                z = (est - P[i, j]) / se
                worst = max(worst, abs(z))
                print(f"{L},{i},{j},{est:.6f},{P[i, j]:.6f},{z:+.2f}")
        print(f"# L={L}: worst |z| = {worst:.2f}")


if __name__ == "__main__":
    main()
