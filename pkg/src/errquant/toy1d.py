"""Analytic 1D Gaussian-mixture denoising model.

``X ~ sum_k alpha_k N(c_k, var_k)`` and ``Z = X + N(0, noise_var)``.  The
posterior ``X | Z = z`` is again a Gaussian mixture, so posterior moments,
the law of the squared error ``S = (X - E[X|Z])^2`` given ``z`` and the
joint density of ``(S, T)`` with ``T = Var[X|Z]`` are all computable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Optional

import numpy as np
from scipy.optimize import brentq, minimize_scalar
from scipy.special import ndtr

from .conformal import BinningScheme, Records, build_table, predict_quantile
from .core import ConfigError, DomainError

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MixtureSpec:
    centers: tuple
    component_vars: tuple
    weights: tuple
    noise_var: float

    def __post_init__(self):
        c = tuple(float(v) for v in np.atleast_1d(self.centers))
        v = tuple(float(v) for v in np.atleast_1d(self.component_vars))
        w = tuple(float(v) for v in np.atleast_1d(self.weights))
        if not (len(c) == len(v) == len(w) >= 1):
            raise ConfigError("centers, component_vars and weights need equal nonzero length")
        if min(v) <= 0 or self.noise_var <= 0:
            raise ConfigError("variances must be positive")
        if min(w) <= 0 or abs(sum(w) - 1.0) > 1e-12:
            raise ConfigError("weights must be positive and sum to 1")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "component_vars", v)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "noise_var", float(self.noise_var))

    @classmethod
    def reference(cls) -> "MixtureSpec":
        return cls((-1.0, 0.0, 1.0), (0.05**2,) * 3, (1 / 3, 1 / 3, 1 / 3), 0.3**2)

    @property
    def _arrays(self):
        return np.array(self.centers), np.array(self.component_vars), np.array(self.weights)

    @property
    def z_mean(self) -> float:
        c, _, w = self._arrays
        return float(w @ c)

    @property
    def z_std(self) -> float:
        c, v, w = self._arrays
        m = w @ c
        return math.sqrt(float(w @ (v + c * c) - m * m) + self.noise_var)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        c, v, w = self._arrays
        k = rng.choice(len(c), size=n, p=w)
        x = c[k] + np.sqrt(v[k]) * rng.standard_normal(n)
        z = x + math.sqrt(self.noise_var) * rng.standard_normal(n)
        return x, z

    def z_pdf(self, z) -> np.ndarray:
        c, v, w = self._arrays
        z = np.asarray(z, dtype=np.float64)[..., None]
        tot = v + self.noise_var
        return np.sum(w * np.exp(-0.5 * (z - c) ** 2 / tot) / np.sqrt(2 * np.pi * tot), axis=-1)

    def joint_pdf(self, x, z) -> np.ndarray:
        """Density of ``(X, Z)``: prior component times Gaussian noise."""
        c, v, w = self._arrays
        x = np.asarray(x, dtype=np.float64)[..., None]
        z = np.asarray(z, dtype=np.float64)[..., None]
        px = w * np.exp(-0.5 * (x - c) ** 2 / v) / np.sqrt(2 * np.pi * v)
        pn = np.exp(-0.5 * (z - x) ** 2 / self.noise_var) / math.sqrt(2 * math.pi * self.noise_var)
        return np.sum(px * pn, axis=-1)


class PosteriorMoments(NamedTuple):
    mean: np.ndarray
    var: np.ndarray
    weights: np.ndarray
    comp_means: np.ndarray
    comp_vars: np.ndarray


def posterior_moments(spec: MixtureSpec, z) -> PosteriorMoments:
    """Posterior mixture of ``X | Z = z`` (vectorized over ``z``)."""
    c, v, w = spec._arrays
    z = np.asarray(z, dtype=np.float64)
    zz = z[..., None]
    cvar = 1.0 / (1.0 / v + 1.0 / spec.noise_var)
    cmean = cvar * (c / v + zz / spec.noise_var)
    tot = v + spec.noise_var
    logw = np.log(w) - 0.5 * (zz - c) ** 2 / tot - 0.5 * np.log(tot)
    logw -= logw.max(axis=-1, keepdims=True)
    pw = np.exp(logw)
    pw /= pw.sum(axis=-1, keepdims=True)
    mean = np.sum(pw * cmean, axis=-1)
    var = np.sum(pw * (cvar + cmean**2), axis=-1) - mean**2
    cvar = np.broadcast_to(cvar, cmean.shape)
    return PosteriorMoments(mean, np.maximum(var, 0.0), pw, cmean, cvar)


class ErrorDistribution:
    """Law of ``S = (X - E[X|Z=z])^2`` under the posterior at a fixed ``z``."""

    def __init__(self, spec: MixtureSpec, z: float):
        pm = posterior_moments(spec, float(z))
        self.z = float(z)
        self.center = float(pm.mean)
        self.posterior_var = float(pm.var)
        self._w = pm.weights
        self._m = pm.comp_means
        self._sd = np.sqrt(pm.comp_vars)

    def _x_cdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)[..., None]
        return np.sum(self._w * ndtr((x - self._m) / self._sd), axis=-1)

    def _x_pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)[..., None]
        u = (x - self._m) / self._sd
        return np.sum(self._w * np.exp(-0.5 * u * u) / (self._sd * math.sqrt(2 * math.pi)), axis=-1)

    def cdf(self, s):
        s = np.asarray(s, dtype=np.float64)
        r = np.sqrt(np.maximum(s, 0.0))
        out = np.where(s > 0, self._x_cdf(self.center + r) - self._x_cdf(self.center - r), 0.0)
        return float(out) if out.ndim == 0 else out

    def pdf(self, s):
        s = np.asarray(s, dtype=np.float64)
        r = np.sqrt(np.maximum(s, 1e-300))
        out = np.where(s > 0, (self._x_pdf(self.center + r) + self._x_pdf(self.center - r)) / (2 * r), 0.0)
        return float(out) if out.ndim == 0 else out

    def quantile(self, q: float) -> float:
        if not 0.0 < q < 1.0:
            raise ConfigError("quantile level must lie in (0, 1)")
        hi = self.posterior_var
        while self.cdf(hi) < q:
            hi *= 4.0
        return brentq(lambda s: self.cdf(s) - q, 0.0, hi, xtol=1e-300, rtol=1e-14, maxiter=500)


def error_given_z(spec: MixtureSpec, z: float) -> ErrorDistribution:
    return ErrorDistribution(spec, z)


class _LevelGrid:
    # Dense z-grid over +-6 total standard deviations for bracketing t(z) = t.
    def __init__(self, spec: MixtureSpec, n: int = 10_000):
        self.spec = spec
        m, sd = spec.z_mean, spec.z_std
        z = np.linspace(m - 6 * sd, m + 6 * sd, n)
        t = posterior_moments(spec, z).var
        # Turning points of t(z) fall between nodes; without them the levels between
        # the best node and the true extremum would have no bracket.
        extra = [self._refine(z[i - 1], z[i + 1], t[i + 1] < t[i]) for i in self._turns(t)]
        if extra:
            z = np.unique(np.concatenate([z, extra]))
            t = posterior_moments(spec, z).var
        self.z = z
        self.t = t
        self.t_min = float(t.min())
        self.t_max = float(t.max())

    @staticmethod
    def _turns(t: np.ndarray) -> np.ndarray:
        d = np.diff(t)
        moving = np.nonzero(d)[0]
        turns = moving[1:][np.sign(d[moving[1:]]) != np.sign(d[moving[:-1]])]
        # d[k] = t[k+1] - t[k], so node k is where the direction changes
        idx = turns
        # the tails of t(z) sit on their limit up to rounding noise
        span = t.max() - t.min()
        return idx[t[idx] - t.min() > 1e-9 * span]

    def _refine(self, a: float, b: float, is_max: bool) -> float:
        sign = -1.0 if is_max else 1.0
        res = minimize_scalar(
            lambda zz: sign * float(posterior_moments(self.spec, zz).var),
            bounds=(a, b),
            method="bounded",
            options={"xatol": 1e-12},
        )
        return float(res.x)

    def preimages(self, t: float) -> list[tuple[float, float]]:
        """Roots ``z'`` of ``t(z) = t`` with the local slope dz/dt of their bracket."""
        if not self.t_min <= t <= self.t_max:
            raise DomainError(f"t={t!r} outside the attainable range [{self.t_min!r}, {self.t_max!r}]")
        d = self.t - t
        hits = np.nonzero((d[:-1] <= 0) != (d[1:] <= 0))[0]
        hits = hits[self.t[hits + 1] != self.t[hits]]  # skip tangential intersections
        if hits.size == 0:
            return []
        out = []
        for i in hits:
            z0, z1 = self.z[i], self.z[i + 1]
            if d[i] == 0:
                root = z0
            elif d[i + 1] == 0:
                root = z1
            else:
                root = brentq(lambda zz: float(posterior_moments(self.spec, zz).var) - t, z0, z1, xtol=1e-14)
            out.append((float(root), float((z1 - z0) / (self.t[i + 1] - self.t[i]))))
        return out


class ToyModel:
    """Caches the level-set grid of one spec; evaluates the joint density of (S, T)."""

    def __init__(self, spec: MixtureSpec, grid_points: int = 10_000):
        self.spec = spec
        self.grid = _LevelGrid(spec, grid_points)
        self._cache: dict[float, list] = {}

    def _pre(self, t: float):
        pre = self._cache.get(t)
        if pre is None:
            roots = self.grid.preimages(t)
            pre = [(z, abs(slope), float(posterior_moments(self.spec, z).mean)) for z, slope in roots]
            if len(self._cache) > 4096:
                self._cache.clear()
            self._cache[t] = pre
        return pre

    def density(self, s, t: float):
        """Joint density ``p(s, t)``; vectorized over ``s`` for a scalar ``t``."""
        s = np.asarray(s, dtype=np.float64)
        if np.any(s <= 0):
            raise DomainError("s must be positive")
        r = np.sqrt(s)
        total = np.zeros_like(s)
        for z, slope, mean in self._pre(float(t)):
            pxz = self.spec.joint_pdf(mean + r, z) + self.spec.joint_pdf(mean - r, z)
            total = total + pxz * slope / (2.0 * r)
        return float(total) if total.ndim == 0 else total

    def t_density(self, t: float) -> float:
        """Marginal density of ``T``, i.e. the s-integral of :meth:`density`."""
        return float(sum(self.spec.z_pdf(z) * slope for z, slope, _ in self._pre(float(t))))

    @property
    def t_range(self) -> tuple[float, float]:
        return self.grid.t_min, self.grid.t_max

    def critical_t(self) -> np.ndarray:
        """Values of ``t`` at local extrema of ``t(z)`` (density singularities)."""
        ext = self.grid.t[self.grid._turns(self.grid.t)]
        crit = np.unique(np.concatenate([[self.grid.t_min, self.grid.t_max], ext]))
        # mirror-image extrema agree only up to rounding
        keep = np.concatenate([[True], np.diff(crit) > 1e-9 * (self.grid.t_max - self.grid.t_min)])
        crit = crit[keep]
        crit[0], crit[-1] = self.grid.t_min, self.grid.t_max
        return crit


_MODELS: dict[MixtureSpec, ToyModel] = {}


def toy_model(spec: MixtureSpec) -> ToyModel:
    model = _MODELS.get(spec)
    if model is None:
        model = _MODELS[spec] = ToyModel(spec)
    return model


def joint_st_density(spec: MixtureSpec, s, t: float):
    """Density of ``(S, T)`` at ``(s, t)`` by change of variables.

    Every preimage ``(x', z')`` with ``t(z') = t`` and ``(x' - E[X|z'])^2 = s``
    contributes ``p(x', z') |dz/dt| / (2 sqrt(s))``, where ``dz/dt`` is the
    slope of the bracketing grid segment.
    """
    return toy_model(spec).density(s, t)


def exact_bin_cdf(spec: MixtureSpec, t_lo: float, t_hi: float, n_grid: int = 200_000):
    """CDF of ``S`` given ``T`` in ``[t_lo, t_hi)`` by quadrature over z.

    Returns ``(cdf, t_max)`` with ``t_max`` the largest variance in the bin,
    or ``(None, nan)`` if the bin has no probability mass on the grid.
    """
    m, sd = spec.z_mean, spec.z_std
    z = np.linspace(m - 7 * sd, m + 7 * sd, n_grid)
    pm = posterior_moments(spec, z)
    sel = (pm.var >= t_lo) & (pm.var < t_hi)
    if not sel.any():
        return None, math.nan
    wz = spec.z_pdf(z[sel])
    wz = wz / wz.sum()
    w, cm, csd, centre = pm.weights[sel], pm.comp_means[sel], np.sqrt(pm.comp_vars[sel]), pm.mean[sel]

    def cdf(s):
        r = math.sqrt(s)
        inner = np.sum(w * (ndtr((centre[:, None] + r - cm) / csd) - ndtr((centre[:, None] - r - cm) / csd)), axis=1)
        return float(wz @ inner)

    return cdf, float(pm.var[sel].max())


def exact_bin_quantile(spec: MixtureSpec, t_lo: float, t_hi: float, q: float, n_grid: int = 200_000) -> float:
    """q-quantile of ``S`` given ``T`` in ``[t_lo, t_hi)``; nan for an empty bin."""
    cdf, hi = exact_bin_cdf(spec, t_lo, t_hi, n_grid)
    if cdf is None:
        return math.nan
    while cdf(hi) < q:
        hi *= 4.0
    return brentq(lambda s: cdf(s) - q, 0.0, hi, xtol=1e-300, rtol=1e-12)


@dataclass(frozen=True)
class BinRow:
    bin_lo: float
    bin_hi: float
    n_cal: int
    conformal_q: float
    exact_q: float
    n_test: int
    coverage: float


@dataclass(frozen=True)
class ToyResult:
    q: float
    coverage: float
    bins: tuple

    def to_csv(self, path, header: Optional[str] = None) -> None:
        with open(path, "w") as fh:
            if header:
                fh.write(header + "\n")
            fh.write("bin_lo,bin_hi,N,conformal_q,exact_q,n_test,per_bin_coverage\n")
            for b in self.bins:
                fh.write(
                    f"{b.bin_lo!r},{b.bin_hi!r},{b.n_cal},{b.conformal_q!r},{b.exact_q!r},{b.n_test},{b.coverage!r}\n"
                )


def toy_pipeline_check(
    spec: MixtureSpec,
    m: int,
    n: int,
    q: float,
    seed: int = 0,
    n_bins: int = 25,
    ess_sup: Optional[float] = None,
) -> ToyResult:
    """Calibrate on ``m`` draws and measure coverage on ``n`` fresh draws.

    Point estimate and variance are the exact posterior mean and variance.
    ``ess_sup`` defaults to a bound that no error in the sample reaches.
    """
    if m < 100 or n < 100:
        raise ConfigError("toy pipeline needs m, n >= 100")
    rng = np.random.Generator(np.random.PCG64(seed))
    x_cal, z_cal = spec.sample(m, rng)
    x_test, z_test = spec.sample(n, rng)
    pc = posterior_moments(spec, z_cal)
    pt = posterior_moments(spec, z_test)
    cal = Records((pc.mean - x_cal) ** 2, pc.var)
    s_test = (pt.mean - x_test) ** 2
    if ess_sup is None:
        ess_sup = float(max(cal.s.max(), s_test.max()) * 10.0)
    bins = BinningScheme.from_data(cal.t_hat, n_bins, "log")
    table = build_table(cal, bins, q, ess_sup)
    pred = predict_quantile(table, pt.var)
    hit = s_test <= pred
    test_idx = bins.index(pt.var)
    lo, hi = bins.bounds()
    rows = []
    for b in range(bins.n_bins):
        sel = test_idx == b
        rows.append(
            BinRow(
                float(lo[b]),
                float(hi[b]),
                int(table.counts[b]),
                float(table.quantiles[b]),
                exact_bin_quantile(spec, lo[b], hi[b], q),
                int(sel.sum()),
                float(hit[sel].mean()) if sel.any() else math.nan,
            )
        )
    return ToyResult(float(q), float(hit.mean()), tuple(rows))


def density_grid(spec: MixtureSpec, n_s: int = 60, n_t: int = 60) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Joint density on a (log-spaced s) x (linear t) grid for plotting."""
    model = toy_model(spec)
    t_lo, t_hi = model.t_range
    ts = np.linspace(t_lo, t_hi, n_t + 2)[1:-1]
    ss = np.geomspace(1e-6 * t_hi, 20.0 * t_hi, n_s)
    dens = np.array([model.density(ss, t) for t in ts])
    return ss, ts, dens


def cell_probabilities(spec: MixtureSpec, s_edges, t_edges, n_s: int = 16, n_t: int = 200) -> np.ndarray:
    """Integrate :func:`joint_st_density` over the cells of an (s, t) grid.

    ``s`` is integrated in ``r = sqrt(s)`` (Gauss-Legendre per cell), which
    removes the ``1/sqrt(s)`` factor.  Each t cell is split at the turning
    points of ``t(z)``, where the density has inverse square root
    singularities; pieces use a cosine map that cancels them.  A piece
    starting at the attainable minimum is integrated in ``log(t - t_min)``
    instead, since the tails of ``z`` pile up there.
    """
    s_edges = np.asarray(s_edges, dtype=np.float64)
    t_edges = np.asarray(t_edges, dtype=np.float64)
    if s_edges.ndim != 1 or t_edges.ndim != 1 or s_edges.size < 2 or t_edges.size < 2:
        raise ConfigError("need at least two s and two t edges")
    if np.any(np.diff(s_edges) <= 0) or np.any(np.diff(t_edges) <= 0) or s_edges[0] < 0:
        raise ConfigError("edges must be increasing and s edges nonnegative")
    model = toy_model(spec)
    t_lo, t_hi = model.t_range
    crit = model.critical_t()

    g, gw = np.polynomial.legendre.leggauss(n_s)
    ra, rb = np.sqrt(s_edges[:-1]), np.sqrt(s_edges[1:])
    half = (rb - ra)[:, None] / 2
    r = (ra + rb)[:, None] / 2 + half * g[None, :]
    wr = half * gw[None, :] * 2.0 * r  # ds = 2 r dr
    s_nodes = (r * r).ravel()

    def s_masses(t: float) -> np.ndarray:
        return (model.density(s_nodes, t).reshape(r.shape) * wr).sum(axis=1)

    G, GW = np.polynomial.legendre.leggauss(n_t)
    theta = np.pi / 2 * (G + 1.0)
    out = np.zeros((s_edges.size - 1, t_edges.size - 1))
    for j in range(t_edges.size - 1):
        a, b = max(t_edges[j], t_lo), min(t_edges[j + 1], t_hi)
        if a >= b:
            continue
        cuts = np.concatenate([[a], crit[(crit > a) & (crit < b)], [b]])
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            if lo <= t_lo:
                ua, ub = math.log(1e-14 * t_hi), math.log(hi - t_lo)
                u = (ua + ub) / 2 + (ub - ua) / 2 * G
                ts = t_lo + np.exp(u)
                w = (ub - ua) / 2 * GW * np.exp(u)
            else:
                ts = lo + (hi - lo) * (1.0 - np.cos(theta)) / 2
                w = np.pi / 2 * GW * (hi - lo) / 2 * np.sin(theta)
            for tt, ww in zip(ts, w):
                out[:, j] += ww * s_masses(float(min(tt, t_hi)))
    return out


def density_normalization(spec: MixtureSpec, n_s: int = 16, n_t: int = 200) -> float:
    """Total mass of the joint density over all attainable ``(s, t)``."""
    model = toy_model(spec)
    # |x - E[X|z]| beyond this many prior spreads carries negligible mass
    c, v, _ = spec._arrays
    r_max = (np.ptp(c) + 12.0 * math.sqrt(float(v.max()) + spec.noise_var))
    r_edges = np.concatenate([[0.0], np.geomspace(1e-5, r_max, 24)])
    t_lo, t_hi = model.t_range
    return float(cell_probabilities(spec, r_edges**2, [t_lo, t_hi], n_s, n_t).sum())
