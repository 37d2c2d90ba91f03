"""Conformal error quantiles for MCMC posterior estimates in image denoising."""

from .conformal import (
    BinningScheme,
    PixelTables,
    QuantileTable,
    Records,
    build_pixel_tables,
    build_table,
    conformal_quantile,
    coverage,
    mutual_information,
    pool_records,
    predict_quantile,
)
from .core import (
    ConfigError,
    DivergenceError,
    DomainError,
    GaussianLikelihood,
    PosteriorModel,
    ShapeError,
    StatisticalError,
)
from .samplers import ChainStats, UlaConfig, UlpdaConfig, pula_run, ula_run, ulpda_run

__version__ = "0.1.0"

__all__ = [
    "BinningScheme",
    "ChainStats",
    "ConfigError",
    "DivergenceError",
    "DomainError",
    "GaussianLikelihood",
    "PixelTables",
    "PosteriorModel",
    "QuantileTable",
    "Records",
    "ShapeError",
    "StatisticalError",
    "UlaConfig",
    "UlpdaConfig",
    "build_pixel_tables",
    "build_table",
    "conformal_quantile",
    "coverage",
    "mutual_information",
    "pool_records",
    "predict_quantile",
    "pula_run",
    "ula_run",
    "ulpda_run",
]
