"""The eight acceptance criteria at their stated tolerances.

Each test prints one PASS/FAIL line; the lines are repeated in the terminal
summary (see conftest.py).  Run standalone with ``python tests/test_acceptance.py``.
"""
import pytest

from bdproc.verify import CRITERIA, run_all

SUMMARY: list[str] = []


def _run(k):
    (res,) = run_all([k], echo=print)
    SUMMARY.append(res.summary())
    return res


def test_criterion_1_classification():
    assert _run(1).passed


def test_criterion_2_identities():
    assert _run(2).passed


def test_criterion_3_resolvent_consistency():
    assert _run(3).passed


def test_criterion_4_generator_boundary():
    assert _run(4).passed


def test_criterion_5_laplace():
    assert _run(5).passed


@pytest.mark.slow
def test_criterion_6_monte_carlo():
    assert _run(6).passed


def test_criterion_7_convergence():
    assert _run(7).passed


def test_criterion_8_density_matrix():
    assert _run(8).passed


@pytest.mark.xfail(strict=True, reason="absolute interior residual over all rows sits at the "
                                       "double-precision floor eps*q_N*|F|, about 1e79 at N=200")
def test_interior_residual_absolute_over_all_rows():
    """Literal absolute bound on every row, kept to document that it cannot hold in floating point."""
    import numpy as np
    from bdproc.model import RateModel
    from bdproc.resolvent import BoundaryTriple, verify_generator_boundary
    c = verify_generator_boundary(RateModel.regular_reference(), None, BoundaryTriple.from_dict({}, 1.0, 1.0),
                                  1.0, np.ones(201), 200)
    assert c.interior_abs <= 1e-10


if __name__ == "__main__":
    import sys
    results = [_run(k) for k in sorted(CRITERIA)]
    sys.exit(0 if all(r.passed for r in results) else 1)
