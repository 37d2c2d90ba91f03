"""Prior energies: anisotropic TV, Huber TV and Fields of Experts.

Every prior object exposes ``shape``, ``energy(x)`` and ``lipschitz``;
differentiable priors additionally implement ``gradient(x)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import convolve2d, correlate2d

from .core import ConfigError, ShapeError


class DiffOperator:
    """Forward differences with zero rows/columns at the far boundary.

    ``apply`` maps an (M, N) grid to an (M, N, 2) field: channel 0 holds
    ``x[i+1, j] - x[i, j]`` (zero on the last row), channel 1 holds
    ``x[i, j+1] - x[i, j]`` (zero on the last column).
    """

    norm_bound = math.sqrt(8.0)

    def __init__(self, height: int, width: int):
        if height < 1 or width < 1:
            raise ConfigError("grid dimensions must be positive")
        self.shape = (int(height), int(width))

    def _check(self, x: np.ndarray) -> None:
        if x.shape != self.shape:
            raise ShapeError(f"expected grid of shape {self.shape}, got {x.shape}")

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._check(x)
        out = np.zeros(self.shape + (2,))
        out[:-1, :, 0] = x[1:, :] - x[:-1, :]
        out[:, :-1, 1] = x[:, 1:] - x[:, :-1]
        return out

    def adjoint(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        if p.shape != self.shape + (2,):
            raise ShapeError(f"expected field of shape {self.shape + (2,)}, got {p.shape}")
        out = np.zeros(self.shape)
        p0 = p[:-1, :, 0]
        out[:-1, :] -= p0
        out[1:, :] += p0
        p1 = p[:, :-1, 1]
        out[:, :-1] -= p1
        out[:, 1:] += p1
        return out


def tv_energy(op: DiffOperator, x) -> float:
    """Anisotropic total variation ``|Dx|_1``."""
    return float(np.abs(op.apply(x)).sum())


def l1_dual_prox(p, step: float, weight: float) -> np.ndarray:
    """Prox of ``step * f*`` for ``f = weight * |.|_1``.

    ``f*`` is the indicator of the box ``[-weight, weight]``, so the prox is
    a pointwise clamp and does not depend on ``step``.
    """
    if not step > 0 or not weight > 0:
        raise ConfigError("step and weight must be positive")
    return np.clip(np.asarray(p, dtype=np.float64), -weight, weight)


class TVPrior:
    """Anisotropic TV; not differentiable, used with the primal-dual sampler."""

    differentiable = False

    def __init__(self, shape: tuple[int, int]):
        self.op = DiffOperator(*shape)
        self.shape = self.op.shape

    @property
    def lipschitz(self) -> float:
        return math.inf

    def energy(self, x) -> float:
        return tv_energy(self.op, x)

    def gradient(self, x):
        raise ConfigError("TV prior is not differentiable; use the primal-dual sampler")


@dataclass(frozen=True)
class HuberParams:
    delta: float

    def __post_init__(self):
        if not self.delta > 0:
            raise ConfigError(f"Huber delta must be positive, got {self.delta}")


def huber(t: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(t)
    return np.where(a <= delta, t * t / (2.0 * delta), a - delta / 2.0)


def huber_tv_energy(op: DiffOperator, params: HuberParams, x) -> float:
    return float(huber(op.apply(x), params.delta).sum())


def huber_tv_gradient(op: DiffOperator, params: HuberParams, x) -> np.ndarray:
    return op.adjoint(np.clip(op.apply(x) / params.delta, -1.0, 1.0))


class HuberTVPrior:
    differentiable = True

    def __init__(self, shape: tuple[int, int], delta: float):
        self.op = DiffOperator(*shape)
        self.shape = self.op.shape
        self.params = HuberParams(delta)

    @property
    def lipschitz(self) -> float:
        return DiffOperator.norm_bound**2 / self.params.delta

    def energy(self, x) -> float:
        return huber_tv_energy(self.op, self.params, x)

    def gradient(self, x) -> np.ndarray:
        return huber_tv_gradient(self.op, self.params, x)


@dataclass(frozen=True)
class FoESpec:
    """Fixed Fields-of-Experts parameters: stencils and expert weights."""

    kernels: tuple
    alphas: tuple

    def __post_init__(self):
        kernels = tuple(np.array(k, dtype=np.float64) for k in self.kernels)
        alphas = tuple(float(a) for a in self.alphas)
        if len(kernels) < 1 or len(kernels) != len(alphas):
            raise ConfigError("FoE needs C >= 1 kernels and as many alphas")
        if any(k.ndim != 2 or k.size == 0 for k in kernels):
            raise ConfigError("FoE kernels must be non-empty 2D stencils")
        if not all(a > 0 for a in alphas):
            raise ConfigError("FoE alphas must be positive")
        for k in kernels:
            k.flags.writeable = False
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "alphas", alphas)


def dct_kernels(size: int = 3) -> list[np.ndarray]:
    """Orthonormal 2D DCT-II basis stencils without the constant (DC) one."""
    n = np.arange(size)
    basis = np.array(
        [np.cos(np.pi * (n + 0.5) * k / size) for k in range(size)]
    )
    basis /= np.linalg.norm(basis, axis=1, keepdims=True)
    return [np.outer(basis[a], basis[b]) for a in range(size) for b in range(size) if a or b]


def default_foe_spec() -> FoESpec:
    kernels = dct_kernels(3)
    return FoESpec(tuple(kernels), tuple(1.0 for _ in kernels))


def load_foe_csv(path) -> FoESpec:
    """One row per kernel: ``alpha`` then the row-major square stencil."""
    kernels, alphas = [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            row = [c for c in row if c.strip()]
            if not row or row[0].lstrip().startswith("#"):
                continue
            vals = [float(c) for c in row]
            size = math.isqrt(len(vals) - 1)
            if len(vals) < 2 or size * size != len(vals) - 1:
                raise ConfigError(f"{path}: kernel weight count {len(vals) - 1} is not a perfect square")
            alphas.append(vals[0])
            kernels.append(np.array(vals[1:]).reshape(size, size))
    return FoESpec(tuple(kernels), tuple(alphas))


def save_foe_csv(path, spec: FoESpec) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for a, k in zip(spec.alphas, spec.kernels):
            w.writerow([repr(a)] + [repr(float(v)) for v in k.ravel()])


class _ReflectPad:
    # Symmetric (half-sample) padding as an index map so its adjoint is a bincount.
    def __init__(self, shape: tuple[int, int], kshape: tuple[int, int]):
        kh, kw = kshape
        if kh > shape[0] or kw > shape[1]:
            raise ConfigError(f"kernel {kshape} larger than image {shape}")
        self.shape = shape
        self.pads = (((kh - 1) // 2, kh // 2), ((kw - 1) // 2, kw // 2))
        idx = np.arange(shape[0] * shape[1]).reshape(shape)
        self.index = np.pad(idx, self.pads, mode="symmetric")
        self.multiplicity = int(np.bincount(self.index.ravel()).max())

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.pad(x, self.pads, mode="symmetric")

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        n = self.shape[0] * self.shape[1]
        return np.bincount(self.index.ravel(), weights=y.ravel(), minlength=n).reshape(self.shape)


def _foe_pads(spec: FoESpec, shape) -> list[_ReflectPad]:
    return [_ReflectPad(tuple(shape), k.shape) for k in spec.kernels]


def foe_responses(spec: FoESpec, x, pads: Sequence[_ReflectPad] | None = None) -> list[np.ndarray]:
    """Filter responses ``k_c * x`` (same size as ``x``, reflect boundary)."""
    x = np.asarray(x, dtype=np.float64)
    pads = pads or _foe_pads(spec, x.shape)
    return [convolve2d(pad.apply(x), k, mode="valid") for k, pad in zip(spec.kernels, pads)]


def foe_energy(spec: FoESpec, x, pads=None) -> float:
    return float(
        sum(a * np.log1p(y * y).sum() for a, y in zip(spec.alphas, foe_responses(spec, x, pads)))
    )


def foe_gradient(spec: FoESpec, x, pads=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    pads = pads or _foe_pads(spec, x.shape)
    g = np.zeros(x.shape)
    for a, k, pad, y in zip(spec.alphas, spec.kernels, pads, foe_responses(spec, x, pads)):
        # adjoint of a valid convolution is a full correlation
        g += pad.adjoint(correlate2d(a * 2.0 * y / (1.0 + y * y), k, mode="full"))
    return g


class FoEPrior:
    differentiable = True

    def __init__(self, shape: tuple[int, int], spec: FoESpec | None = None):
        self.spec = spec or default_foe_spec()
        self.shape = (int(shape[0]), int(shape[1]))
        self._pads = _foe_pads(self.spec, self.shape)

    @property
    def lipschitz(self) -> float:
        # |phi''| <= 2 alpha; |K_c| <= |k_c|_1 * sqrt(padding multiplicity)
        return sum(
            2.0 * a * np.abs(k).sum() ** 2 * pad.multiplicity
            for a, k, pad in zip(self.spec.alphas, self.spec.kernels, self._pads)
        )

    def energy(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.shape:
            raise ShapeError(f"expected grid of shape {self.shape}, got {x.shape}")
        return foe_energy(self.spec, x, self._pads)

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.shape:
            raise ShapeError(f"expected grid of shape {self.shape}, got {x.shape}")
        return foe_gradient(self.spec, x, self._pads)


def make_prior(name: str, shape, *, huber_delta: float = 0.01, foe: FoESpec | None = None):
    if name == "tv":
        return TVPrior(shape)
    if name == "huber_tv":
        return HuberTVPrior(shape, huber_delta)
    if name == "foe":
        return FoEPrior(shape, foe)
    raise ConfigError(f"unknown prior {name!r}")
