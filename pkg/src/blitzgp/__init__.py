"""Kronecker-structured sparse variational GP regression on inducing grids."""

from .data import Dataset, EvalReport, Normalization, evaluate, gen_square_wave, gen_toy_gp, load_csv
from .errors import (
    BlitzError,
    ConfigError,
    DataError,
    DecompositionError,
    DegenerateGridError,
    DimensionError,
    GuardError,
    NonFiniteGradientError,
    NumericError,
    SchemaError,
)
from .exact_gp import ExactGP
from .kernels import EQParams, GPHyperparams, SMParams
from .kron import KhatriRaoCross, KroneckerPSD
from .svgp import BlitzModel, InducingGrid, VariationalState, elbo, kl_term, optimal_dense_q, predict
from .training import TrainConfig, build_grid, train

__version__ = "0.1.0"

__all__ = [
    "BlitzError",
    "BlitzModel",
    "ConfigError",
    "DataError",
    "Dataset",
    "DecompositionError",
    "DegenerateGridError",
    "DimensionError",
    "EQParams",
    "EvalReport",
    "ExactGP",
    "GPHyperparams",
    "GuardError",
    "InducingGrid",
    "KhatriRaoCross",
    "KroneckerPSD",
    "NonFiniteGradientError",
    "Normalization",
    "NumericError",
    "SMParams",
    "SchemaError",
    "TrainConfig",
    "VariationalState",
    "build_grid",
    "elbo",
    "evaluate",
    "gen_square_wave",
    "gen_toy_gp",
    "kl_term",
    "load_csv",
    "optimal_dense_q",
    "predict",
    "train",
]
