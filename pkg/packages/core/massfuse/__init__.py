"""massfuse: mass imputation of big-data outcomes into probability samples."""

from massfuse.errors import (
    BasisError,
    CollinearConstraintError,
    ConfigError,
    ConvergenceError,
    DesignError,
    DimensionError,
    DonorPoolError,
    EmptyFrameError,
    ExtremeWeightError,
    MassfuseError,
    ModelError,
    ParseError,
    RankError,
    RatioUndefinedError,
    SchemaError,
    VarianceUndefinedError,
)
from massfuse.frame import (
    BigSample,
    Frame,
    FrameSchema,
    Identity,
    Indicator,
    ProbabilitySample,
    Product,
    UnitRecord,
    apply_g,
    parse_g,
)
from massfuse.report import EstimateReport, Method

__version__ = "0.1.0"

__all__ = [
    "BasisError",
    "BigSample",
    "CollinearConstraintError",
    "ConfigError",
    "ConvergenceError",
    "DesignError",
    "DimensionError",
    "DonorPoolError",
    "EmptyFrameError",
    "EstimateReport",
    "EstimationInputs",
    "ExtremeWeightError",
    "Frame",
    "FrameSchema",
    "GamConfig",
    "Identity",
    "Indicator",
    "MassfuseError",
    "Method",
    "ModelError",
    "ParseError",
    "ProbabilitySample",
    "Product",
    "RankError",
    "RatioUndefinedError",
    "SchemaError",
    "SimulationConfig",
    "UnitRecord",
    "VarianceUndefinedError",
    "apply_g",
    "estimate",
    "fit_gam",
    "match_knn",
    "parse_g",
    "run_simulation",
]

# name -> module that defines it; imported on first access
_LAZY = {
    "EstimationInputs": "massfuse.estimators",
    "estimate": "massfuse.estimators",
    "GamConfig": "massfuse.gam",
    "fit_gam": "massfuse.gam",
    "match_knn": "massfuse.matching",
    "SimulationConfig": "massfuse.harness",
    "run_simulation": "massfuse.harness",
}


def __getattr__(name: str):
    # scipy-backed modules load on demand
    module = _LAZY.get(name)
    if module is None:
        raise AttributeError(f"module 'massfuse' has no attribute {name!r}")
    import importlib

    return getattr(importlib.import_module(module), name)
