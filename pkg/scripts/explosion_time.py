"""Simulated explosion time from state 0 against the series formula."""
import argparse
import math

import numpy as np

from bdproc.model import RateModel, build_scale_speed, mean_explosion_time
from bdproc.simulate import KILL, SimConfig, simulate_minimal


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--paths", type=int, default=20_000)
    args = ap.parse_args()

    for name, model in (("regular", RateModel.regular_reference()), ("exit", RateModel.exit_reference())):
        want = mean_explosion_time(build_scale_speed(model, 200))[0]
        cfg = SimConfig(horizon=1e6, seed=11)
        eta = []
        for p in range(args.paths):
            rec = simulate_minimal(model, 0, cfg, path=p)
            assert rec.kinds[-1] == KILL
            eta.append(rec.times[-1])
        eta = np.asarray(eta)
        se = eta.std(ddof=1) / math.sqrt(eta.size)
        print(f"{name}: series {want:.6f}  simulated {eta.mean():.6f} +- {se:.6f}  "
              f"z = {(eta.mean() - want) / se:+.2f}")


if __name__ == "__main__":
    main()
