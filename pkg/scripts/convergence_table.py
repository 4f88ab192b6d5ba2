"""Resolvent and transition gaps for Feller approximations of a target triple."""
import argparse

from bdproc.model import RateModel
from bdproc.resolvent import BoundaryTriple
from bdproc.semigroup import convergence_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--schedule", type=int, nargs="+", default=[5, 10, 20, 40])
    ap.add_argument("--N", type=int, default=100)
    args = ap.parse_args()

    target = BoundaryTriple.geometric_nu(1.0, 0.5, 0.0, 1.0)
    rows = convergence_experiment(RateModel.regular_reference(), target, args.schedule, (1.0, 2.0),
                                  args.N, js=(0, 1, 2))
    print(f"{'n':>4} {'alpha':>6} {'j':>2} {'resolvent gap':>14} {'transition gap':>15}")
    for r in rows:
        print(f"{r.n:>4} {r.alpha:>6g} {r.j:>2} {r.sup_gap_resolvent:>14.3e} {r.sup_gap_transition:>15.3e}")


if __name__ == "__main__":
    main()
