"""Langevin posterior samplers and streaming chain statistics.

Three samplers share the same bookkeeping:

* :func:`ula_run`   - unadjusted Langevin on a differentiable energy,
* :func:`ulpda_run` - primal-dual Langevin for TV-type (non-smooth) priors,
* :func:`pula_run`  - Langevin with the Gaussian data term handled by its prox.

Gaussian noise comes from ``numpy.random.Generator(PCG64(seed))`` via
``standard_normal`` (ziggurat), so a given seed reproduces bit-exactly on
every platform numpy supports.  Noise is drawn in blocks of iterations;
numpy fills arrays sequentially, so blocking does not change the stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, TextIO

import numpy as np

from . import core
from .core import ConfigError, DivergenceError, PosteriorModel, ShapeError
from .priors import DiffOperator, TVPrior, l1_dual_prox


@dataclass(frozen=True)
class ChainStats:
    """Welford state: sample count, running mean and sum of squared deviations."""

    count: int
    mean: np.ndarray = field(repr=False)
    m2: np.ndarray = field(repr=False)

    @classmethod
    def empty(cls, shape) -> "ChainStats":
        return cls(0, np.zeros(shape), np.zeros(shape))

    @property
    def shape(self):
        return self.mean.shape

    @property
    def variance(self) -> np.ndarray:
        """Population variance ``m2 / count`` (1/K convention)."""
        if self.count == 0:
            return np.zeros(self.shape)
        return self.m2 / self.count


def welford_update(stats: ChainStats, x) -> ChainStats:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != stats.shape:
        raise ShapeError(f"sample shape {x.shape} does not match stats shape {stats.shape}")
    n = stats.count + 1
    delta = x - stats.mean
    mean = stats.mean + delta / n
    m2 = stats.m2 + delta * (x - mean)
    return ChainStats(n, mean, m2)


def welford_merge(a: ChainStats, b: ChainStats) -> ChainStats:
    """Combine two partial streams (Chan et al. parallel update)."""
    if a.shape != b.shape:
        raise ShapeError(f"cannot merge stats of shapes {a.shape} and {b.shape}")
    if a.count == 0:
        return ChainStats(b.count, b.mean.copy(), b.m2.copy())
    if b.count == 0:
        return ChainStats(a.count, a.mean.copy(), a.m2.copy())
    n = a.count + b.count
    delta = b.mean - a.mean
    mean = a.mean + delta * (b.count / n)
    m2 = a.m2 + b.m2 + delta * delta * (a.count * b.count / n)
    return ChainStats(n, mean, m2)


def stats_of(samples: Iterable) -> ChainStats:
    samples = [np.asarray(s, dtype=np.float64) for s in samples]
    stats = ChainStats.empty(samples[0].shape)
    for s in samples:
        stats = welford_update(stats, s)
    return stats


class _Accumulator:
    # Mutable Welford state private to one running chain.
    def __init__(self, shape):
        self.count = 0
        self.mean = np.zeros(shape)
        self.m2 = np.zeros(shape)
        self._delta = np.empty(shape)

    def push(self, x: np.ndarray) -> None:
        self.count += 1
        np.subtract(x, self.mean, out=self._delta)
        self.mean += self._delta / self.count
        self._delta *= x - self.mean
        self.m2 += self._delta

    def freeze(self) -> ChainStats:
        return ChainStats(self.count, self.mean.copy(), self.m2.copy())


@dataclass(frozen=True)
class UlaConfig:
    step: float
    iterations: int
    burn_in: int = 0
    thinning: int = 1
    seed: int = 0
    noise_scale: float = 1.0

    def __post_init__(self):
        if not self.step > 0:
            raise ConfigError(f"step must be positive, got {self.step}")
        _check_chain_lengths(self.iterations, self.burn_in, self.thinning)


@dataclass(frozen=True)
class UlpdaConfig:
    tau: float
    sigma: float
    theta: float = 1.0
    iterations: int = 50_000
    burn_in: int = 0
    thinning: int = 1
    seed: int = 0
    noise_scale: float = 1.0

    def __post_init__(self):
        if not self.tau > 0 or not self.sigma > 0:
            raise ConfigError("primal and dual step sizes must be positive")
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError(f"theta must lie in [0, 1], got {self.theta}")
        _check_chain_lengths(self.iterations, self.burn_in, self.thinning)

    def check_steps(self, op_norm: float) -> None:
        prod = self.sigma * self.tau * op_norm**2
        if prod > 1.0 + 1e-12:
            raise ConfigError(f"step sizes violate sigma*tau*L^2 <= 1 (got {prod:.6g})")

    @classmethod
    def balanced(cls, tau: float, op_norm: float = DiffOperator.norm_bound, **kw) -> "UlpdaConfig":
        """Dual step chosen so that ``sigma * tau * L^2 = 1``."""
        return cls(tau=tau, sigma=1.0 / (tau * op_norm**2), **kw)


def _check_chain_lengths(iterations: int, burn_in: int, thinning: int) -> None:
    if iterations < 1:
        raise ConfigError("iterations must be positive")
    if thinning < 1:
        raise ConfigError("thinning must be >= 1")
    if not 0 <= burn_in < iterations:
        raise ConfigError("burn_in must satisfy 0 <= burn_in < iterations")


def num_samples(iterations: int, burn_in: int, thinning: int) -> int:
    return (iterations - burn_in) // thinning


Checkpoint = Callable[[int, int, ChainStats], None]


class _Chain:
    """Shared chain bookkeeping: noise blocks, burn-in/thinning, checks, hooks."""

    def __init__(self, model, cfg, checkpoints, on_checkpoint, trace, trace_every):
        self.model = model
        self.cfg = cfg
        self.shape = model.shape
        self.rng = np.random.Generator(np.random.PCG64(cfg.seed))
        size = int(np.prod(self.shape))
        self.block = max(1, min(cfg.iterations, (1 << 16) // size))
        self._noise = None
        self._pos = self.block
        self.acc = _Accumulator(self.shape)
        self.checkpoints = set(checkpoints)
        self.on_checkpoint = on_checkpoint
        self.trace = trace
        self.trace_every = trace_every
        if trace is not None:
            trace.write("iteration,energy,mean_of_mean,mean_of_variance\n")

    def noise(self) -> np.ndarray:
        if self._pos == self.block:
            self._noise = self.rng.standard_normal((self.block,) + self.shape)
            self._pos = 0
        xi = self._noise[self._pos]
        self._pos += 1
        return xi

    def record(self, k: int, x: np.ndarray) -> None:
        """Bookkeeping after iterate ``x_k`` (k = 1..K) has been formed."""
        if not math.isfinite(float(x.sum())):
            raise DivergenceError(k, f"non-finite value in chain at iteration {k}")
        kept = k - self.cfg.burn_in
        if kept > 0 and kept % self.cfg.thinning == 0:
            self.acc.push(x)
            if self.acc.count in self.checkpoints and self.on_checkpoint is not None:
                self.on_checkpoint(self.acc.count, k, self.acc.freeze())
        if self.trace is not None and k % self.trace_every == 0:
            var = self.acc.m2 / self.acc.count if self.acc.count else self.acc.m2
            self.trace.write(
                f"{k},{core.energy(self.model, x)!r},{float(self.acc.mean.mean())!r},{float(var.mean())!r}\n"
            )


def _start(model: PosteriorModel, x0) -> np.ndarray:
    if x0 is None:
        return model.observation.copy()
    x = np.array(x0, dtype=np.float64)
    core.check_same_shape(x, model.observation, "x0 and observation")
    return x


def _require_differentiable(model: PosteriorModel) -> None:
    if model.prior is not None and not getattr(model.prior, "differentiable", False):
        raise ConfigError(f"{type(model.prior).__name__} is not differentiable")


def ula_run(
    model: PosteriorModel,
    cfg: UlaConfig,
    x0=None,
    *,
    checkpoints: Iterable[int] = (),
    on_checkpoint: Optional[Checkpoint] = None,
    trace: Optional[TextIO] = None,
    trace_every: int = 100,
) -> ChainStats:
    """Unadjusted Langevin: ``x <- x - step * grad E(x) + sqrt(2 step) xi``.

    Starts from the observation unless ``x0`` is given.  Iterates after the
    burn-in are thinned by ``cfg.thinning`` and folded into the returned
    :class:`ChainStats`.  ``on_checkpoint(n_samples, iteration, stats)`` is
    called whenever the kept-sample count hits one of ``checkpoints``.
    """
    _require_differentiable(model)
    L = core.lipschitz(model)
    if not cfg.step < 2.0 / L:
        raise ConfigError(f"step {cfg.step:g} must be below 2/L = {2.0 / L:.6g}")
    chain = _Chain(model, cfg, checkpoints, on_checkpoint, trace, trace_every)
    x = _start(model, x0)
    z = model.observation
    inv_s2 = 1.0 / model.sigma**2
    prior, inv_lam = model.prior, 1.0 / model.lam
    amp = math.sqrt(2.0 * cfg.step) * cfg.noise_scale
    for k in range(1, cfg.iterations + 1):
        g = (x - z) * inv_s2
        if prior is not None:
            g += prior.gradient(x) * inv_lam
        x = x - cfg.step * g + amp * chain.noise()
        chain.record(k, x)
    return chain.acc.freeze()


def pula_run(
    model: PosteriorModel,
    cfg: UlaConfig,
    x0=None,
    *,
    checkpoints: Iterable[int] = (),
    on_checkpoint: Optional[Checkpoint] = None,
    trace: Optional[TextIO] = None,
    trace_every: int = 100,
) -> ChainStats:
    """Proximal Langevin: gradient step on the prior, prox step on the data term.

    ``x <- prox_{step * data}(x - step/lam * grad prior(x)) + sqrt(2 step) xi``
    """
    _require_differentiable(model)
    if model.prior is not None:
        Lp = model.prior.lipschitz / model.lam
        if not cfg.step * Lp < 2.0:
            raise ConfigError(f"step {cfg.step:g} must be below 2/L_prior = {2.0 / Lp:.6g}")
    chain = _Chain(model, cfg, checkpoints, on_checkpoint, trace, trace_every)
    x = _start(model, x0)
    z = model.observation
    r = cfg.step / model.sigma**2
    shrink = 1.0 / (1.0 + r)
    prior, gstep = model.prior, cfg.step / model.lam
    amp = math.sqrt(2.0 * cfg.step) * cfg.noise_scale
    for k in range(1, cfg.iterations + 1):
        y = x - gstep * prior.gradient(x) if prior is not None else x
        x = (y + r * z) * shrink + amp * chain.noise()
        chain.record(k, x)
    return chain.acc.freeze()


def ulpda_run(
    model: PosteriorModel,
    cfg: UlpdaConfig,
    x0=None,
    *,
    checkpoints: Iterable[int] = (),
    on_checkpoint: Optional[Checkpoint] = None,
    trace: Optional[TextIO] = None,
    trace_every: int = 100,
) -> ChainStats:
    """Primal-dual Langevin for ``|x - z|^2/(2 sigma^2) + |Dx|_1 / lam``.

    Per iteration, with ``p_{-1} = p_0 = 0``::

        p_bar = p_k + theta (p_k - p_{k-1})
        x     = prox_{tau g}(x - tau D^T p_bar) + sqrt(2 tau) xi
        p     = clip(p_k + sigma D x, -1/lam, 1/lam)

    Noise enters the primal variable only.
    """
    if not isinstance(model.prior, TVPrior):
        raise ConfigError("the primal-dual sampler requires the TV prior")
    op = model.prior.op
    cfg.check_steps(op.norm_bound)
    chain = _Chain(model, cfg, checkpoints, on_checkpoint, trace, trace_every)
    x = _start(model, x0)
    z = model.observation
    r = cfg.tau / model.sigma**2
    shrink = 1.0 / (1.0 + r)
    bound = 1.0 / model.lam
    amp = math.sqrt(2.0 * cfg.tau) * cfg.noise_scale
    p = np.zeros(model.shape + (2,))
    p_prev = p
    for k in range(1, cfg.iterations + 1):
        p_bar = p + cfg.theta * (p - p_prev) if cfg.theta else p
        x = (x - cfg.tau * op.adjoint(p_bar) + r * z) * shrink + amp * chain.noise()
        p_prev, p = p, l1_dual_prox(p + cfg.sigma * op.apply(x), cfg.sigma, bound)
        chain.record(k, x)
    return chain.acc.freeze()


def run_sampler(name: str, model: PosteriorModel, cfg, x0=None, **kw) -> ChainStats:
    runners = {"ula": ula_run, "pula": pula_run, "ulpda": ulpda_run}
    if name not in runners:
        raise ConfigError(f"unknown sampler {name!r}")
    return runners[name](model, cfg, x0, **kw)
