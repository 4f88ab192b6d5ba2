"""Birth-death processes: boundary classification, resolvents, semigroups and path simulation."""
from .model import Boundary, BoundaryClass, GridFunction, ModelError, RateModel, build_scale_speed, classify_boundary, load_model
from .resolvent import (
    AdmissibilityError,
    BoundaryTriple,
    ReturnDistribution,
    doob_resolvent,
    load_pi,
    load_triple,
    minimal_resolvent_matrix,
    wang_yang_resolvent,
)
from .semigroup import build_generator, uniformized_transition
from .simulate import SimConfig, sample_paths

__all__ = [
    "AdmissibilityError",
    "Boundary",
    "BoundaryClass",
    "BoundaryTriple",
    "GridFunction",
    "ModelError",
    "RateModel",
    "ReturnDistribution",
    "SimConfig",
    "build_generator",
    "build_scale_speed",
    "classify_boundary",
    "doob_resolvent",
    "load_model",
    "load_pi",
    "load_triple",
    "minimal_resolvent_matrix",
    "sample_paths",
    "uniformized_transition",
    "wang_yang_resolvent",
]
