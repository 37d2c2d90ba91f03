"""Sum-product belief propagation on a 4-connected grid MRF.

The MRF discretizes the TV-l2 posterior on labels ``k/L`` with unary
``(x - z)^2 / (2 sigma^2)`` and pairwise ``|x - x'| / lam`` terms.
Messages live in the log domain and are max-normalized after every update.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .core import ConfigError, ShapeError, check_same_shape
from .imageio import write_cif

# exp(-w * max|l - l'|) stays representable below this; otherwise use exact log-sum-exp
_MATMUL_LIMIT = 600.0


@dataclass(frozen=True)
class LabelSpace:
    """Labels ``l_k = k / L`` for ``k = 0..L`` (``L + 1`` values)."""

    L: int

    def __post_init__(self):
        if self.L < 1:
            raise ConfigError("need at least two labels (L >= 1)")

    @property
    def count(self) -> int:
        return self.L + 1

    @property
    def values(self) -> np.ndarray:
        return np.arange(self.L + 1) / self.L

    @property
    def spacing(self) -> float:
        return 1.0 / self.L


@dataclass(frozen=True)
class MrfModel:
    """Unary energies per pixel and label plus a pairwise ``w |l - l'|`` term."""

    unary: np.ndarray = field(repr=False)
    pairwise_weight: float
    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        unary = np.array(self.unary, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.float64)
        if unary.ndim != 3 or unary.shape[2] != labels.size:
            raise ShapeError("unary must have shape (M, N, number of labels)")
        if not np.all(np.isfinite(unary)):
            raise ConfigError("unary energies must be finite")
        if self.pairwise_weight < 0:
            raise ConfigError("pairwise weight must be nonnegative")
        object.__setattr__(self, "unary", unary)
        object.__setattr__(self, "labels", labels)

    @property
    def shape(self) -> tuple[int, int]:
        return self.unary.shape[:2]


def tv_mrf(z, sigma: float, lam: float, labels: LabelSpace) -> MrfModel:
    """Discretized TV-l2 denoising posterior for observation ``z``."""
    z = np.asarray(z, dtype=np.float64)
    l = labels.values
    unary = (l[None, None, :] - z[:, :, None]) ** 2 / (2.0 * sigma**2)
    return MrfModel(unary, 1.0 / lam, l)


class _MessageUpdate:
    """``m(l') = log sum_l exp(h(l) - w |l - l'|)`` for a batch of ``h`` rows."""

    def __init__(self, labels: np.ndarray, w: float):
        cost = w * np.abs(labels[:, None] - labels[None, :])
        self.exact = cost.max() > _MATMUL_LIMIT
        self.log_kernel = -cost
        self.kernel = np.exp(-cost)

    def __call__(self, h: np.ndarray) -> np.ndarray:
        hmax = h.max(axis=-1, keepdims=True)
        if self.exact:
            out = logsumexp(h[..., :, None] - hmax[..., None] + self.log_kernel, axis=-2)
        else:
            # kernel diagonal is 1, so each sum is >= exp(0) at the row maximum
            out = np.log((np.exp(h - hmax) @ self.kernel))
            if not np.all(np.isfinite(out)):
                out = logsumexp(h[..., :, None] - hmax[..., None] + self.log_kernel, axis=-2)
        return out - out.max(axis=-1, keepdims=True)


def bp_sweep(model: MrfModel, iterations: int = 10, damping: float = 0.0) -> np.ndarray:
    """Run sweep BP and return normalized marginals of shape (M, N, labels).

    One iteration is four raster sweeps (left to right, right to left, top to
    bottom, bottom to top); each sweep updates the messages travelling in
    its direction in place, all rows (or columns) at once.  Messages start
    uniform.  ``damping`` mixes the previous message into the new one in the
    log domain.
    """
    if iterations < 1:
        raise ConfigError("iterations must be >= 1")
    if not 0.0 <= damping < 1.0:
        raise ConfigError("damping must lie in [0, 1)")
    M, N, nl = model.unary.shape
    phi = -model.unary
    update = _MessageUpdate(model.labels, model.pairwise_weight)
    # incoming messages keyed by the side they arrive from
    from_left = np.zeros((M, N, nl))
    from_right = np.zeros((M, N, nl))
    from_up = np.zeros((M, N, nl))
    from_down = np.zeros((M, N, nl))

    def mix(new, old):
        return new if damping == 0.0 else (1.0 - damping) * new + damping * old

    for _ in range(iterations):
        for j in range(N - 1):
            h = phi[:, j] + from_left[:, j] + from_up[:, j] + from_down[:, j]
            from_left[:, j + 1] = mix(update(h), from_left[:, j + 1])
        for j in range(N - 1, 0, -1):
            h = phi[:, j] + from_right[:, j] + from_up[:, j] + from_down[:, j]
            from_right[:, j - 1] = mix(update(h), from_right[:, j - 1])
        for i in range(M - 1):
            h = phi[i] + from_up[i] + from_left[i] + from_right[i]
            from_up[i + 1] = mix(update(h), from_up[i + 1])
        for i in range(M - 1, 0, -1):
            h = phi[i] + from_down[i] + from_left[i] + from_right[i]
            from_down[i - 1] = mix(update(h), from_down[i - 1])

    belief = phi + from_left + from_right + from_up + from_down
    belief -= logsumexp(belief, axis=-1, keepdims=True)
    marg = np.exp(belief)
    return marg / marg.sum(axis=-1, keepdims=True)


def bp_moments(marginals: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel mean and variance under discrete marginals."""
    l = labels.values if isinstance(labels, LabelSpace) else np.asarray(labels, dtype=np.float64)
    marginals = np.asarray(marginals, dtype=np.float64)
    if marginals.shape[-1] != l.size:
        raise ShapeError("marginals and labels disagree on the label count")
    mean = marginals @ l
    var = np.einsum("...k,...k->...", marginals, (l - mean[..., None]) ** 2)
    return mean, var


def mean_abs_diff(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    check_same_shape(a, b, "maps")
    return float(np.mean(np.abs(a - b)))


def compare_to_chain(bp_mean, bp_var, chain) -> tuple[float, float]:
    """Mean absolute differences of (mean, variance) maps against chain stats."""
    return mean_abs_diff(bp_mean, chain.mean), mean_abs_diff(bp_var, chain.variance)


def export_marginals_raw(marginals: np.ndarray, out_dir, prefix: str = "marginal") -> list[Path]:
    """One CIF1 grid per label holding that label's probability at each pixel."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    width = len(str(marginals.shape[-1] - 1))
    paths = []
    for k in range(marginals.shape[-1]):
        path = out_dir / f"{prefix}_{k:0{width}d}.cif"
        write_cif(path, marginals[..., k])
        paths.append(path)
    return paths


def write_marginal_slice(path, marginals: np.ndarray, labels, row: int, header: str | None = None) -> None:
    """CSV of the marginals along image row ``row``: one line per label."""
    l = labels.values if isinstance(labels, LabelSpace) else np.asarray(labels)
    sl = marginals[row]
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"col{j}" for j in range(sl.shape[0])])
        for k, lv in enumerate(l):
            w.writerow([repr(float(lv))] + [repr(float(v)) for v in sl[:, k]])
