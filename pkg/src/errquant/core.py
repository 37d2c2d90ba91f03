"""Image grids, the Gaussian likelihood and the posterior energy.

Grids are plain 2D ``float64`` numpy arrays (row-major).  Operations never
mutate their inputs and always return fresh arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np


class ShapeError(ValueError):
    """Array dimensions do not match."""


class ConfigError(ValueError):
    """Invalid parameters or incompatible settings."""


class DivergenceError(RuntimeError):
    """A Markov chain produced non-finite values."""

    def __init__(self, iteration: int, message: str = ""):
        self.iteration = iteration
        super().__init__(message or f"chain diverged at iteration {iteration}")


class StatisticalError(ValueError):
    """Not enough data for a meaningful estimate."""


class DomainError(ValueError):
    """Argument outside the domain of a function."""


def as_grid(x: Any, name: str = "grid") -> np.ndarray:
    """Validate and convert ``x`` to a finite 2D float64 array (copy)."""
    arr = np.array(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "grids") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what} have mismatched shapes {a.shape} and {b.shape}")


@dataclass(frozen=True)
class GaussianLikelihood:
    """Additive white Gaussian noise model ``z = x + N(0, sigma^2)``."""

    sigma: float
    observation: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"noise sigma must be positive, got {self.sigma}")
        z = as_grid(self.observation, "observation")
        z.flags.writeable = False
        object.__setattr__(self, "observation", z)

    @property
    def shape(self) -> tuple[int, int]:
        return self.observation.shape


@dataclass(frozen=True)
class PosteriorModel:
    """Energy ``E(x) = |x - z|^2 / (2 sigma^2) + prior(x) / lam``.

    ``prior`` is any object from :mod:`errquant.priors` (or ``None`` for a
    pure Gaussian posterior).
    """

    likelihood: GaussianLikelihood
    prior: Optional[Any] = None
    lam: float = 1.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        if self.prior is not None and tuple(self.prior.shape) != self.likelihood.shape:
            raise ShapeError(
                f"prior shape {tuple(self.prior.shape)} does not match "
                f"observation shape {self.likelihood.shape}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.likelihood.shape

    @property
    def sigma(self) -> float:
        return self.likelihood.sigma

    @property
    def observation(self) -> np.ndarray:
        return self.likelihood.observation


def _checked(model: PosteriorModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    check_same_shape(x, model.observation, "x and observation")
    return x


def data_energy(model: PosteriorModel, x) -> float:
    x = _checked(model, x)
    r = x - model.observation
    return float(np.sum(r * r) / (2.0 * model.sigma**2))


def energy(model: PosteriorModel, x) -> float:
    """Posterior energy with additive constants dropped."""
    x = _checked(model, x)
    e = data_energy(model, x)
    if model.prior is not None:
        e += model.prior.energy(x) / model.lam
    return e


def data_gradient(model: PosteriorModel, x) -> np.ndarray:
    x = _checked(model, x)
    return (x - model.observation) / model.sigma**2


def data_prox(model: PosteriorModel, x, step: float) -> np.ndarray:
    """Proximal map of ``step`` times the data term.

    Closed form ``(x + (step/sigma^2) z) / (1 + step/sigma^2)``.
    """
    if not step > 0:
        raise ConfigError(f"prox step must be positive, got {step}")
    x = _checked(model, x)
    r = step / model.sigma**2
    return (x + r * model.observation) / (1.0 + r)


def gradient(model: PosteriorModel, x) -> np.ndarray:
    """Gradient of the full energy; the prior must be differentiable."""
    g = data_gradient(model, x)
    if model.prior is not None:
        g += model.prior.gradient(np.asarray(x, dtype=np.float64)) / model.lam
    return g


def lipschitz(model: PosteriorModel) -> float:
    """Upper bound on the Lipschitz constant of :func:`gradient`."""
    L = 1.0 / model.sigma**2
    if model.prior is not None:
        L += model.prior.lipschitz / model.lam
    return L
