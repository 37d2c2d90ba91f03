"""Variance-binned conformal error quantiles, coverage and mutual information.

Calibration data are pairs ``(s, t_hat)``: the squared error of a point
estimate and the estimated posterior variance at the same pixel.  Records
are binned on ``t_hat`` and each bin gets the conformalized q-quantile of its
errors, i.e. the ``ceil((N + 1) q)``-th smallest value, or ``ess_sup`` when
that index exceeds ``N``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import ConfigError, ShapeError, StatisticalError, check_same_shape

DEFAULT_ESS_SUP = 1.0


def _check_level(q: float) -> float:
    q = float(q)
    if not 0.0 < q < 1.0:
        raise ConfigError(f"quantile level must lie in (0, 1), got {q}")
    return q


def conformal_rank(n: int, q: float) -> int:
    """``ceil((n + 1) q)``; the product is rounded to 1e-9 first so decimal
    levels such as 0.9 hit the intended order statistic despite binary
    floating point."""
    return math.ceil(round((n + 1) * q, 9))


def conformal_quantile(values, q: float, ess_sup: float = DEFAULT_ESS_SUP) -> float:
    q = _check_level(q)
    values = np.asarray(values, dtype=np.float64).ravel()
    if not np.all(np.isfinite(values)):
        raise ValueError("calibration values must be finite")
    n = values.size
    k = conformal_rank(n, q)
    if k > n:
        return float(ess_sup)
    return float(np.partition(values, k - 1)[k - 1])


@dataclass(frozen=True)
class Records:
    """Calibration records: squared errors ``s`` and estimated variances ``t_hat``."""

    s: np.ndarray = field(repr=False)
    t_hat: np.ndarray = field(repr=False)

    def __post_init__(self):
        s = np.asarray(self.s, dtype=np.float64).ravel()
        t = np.asarray(self.t_hat, dtype=np.float64).ravel()
        if s.shape != t.shape:
            raise ShapeError("s and t_hat must have the same length")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(t))):
            raise ValueError("records must be finite")
        if np.any(s < 0) or np.any(t < 0):
            raise ValueError("records must be nonnegative")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "t_hat", t)

    def __len__(self) -> int:
        return self.s.size

    @classmethod
    def concat(cls, parts: Iterable["Records"]) -> "Records":
        parts = list(parts)
        return cls(np.concatenate([p.s for p in parts]), np.concatenate([p.t_hat for p in parts]))

    def to_csv(self, path, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(header + "\n")
            fh.write("s,t_hat\n")
            fh.writelines(f"{a!r},{b!r}\n" for a, b in zip(self.s.tolist(), self.t_hat.tolist()))

    @classmethod
    def from_csv(cls, path) -> "Records":
        rows = [r for r in _csv_rows(path)]
        if not rows or rows[0] != ["s", "t_hat"]:
            raise ValueError(f"{path}: expected header 's,t_hat'")
        data = np.array([[float(a), float(b)] for a, b in rows[1:]]).reshape(-1, 2)
        return cls(data[:, 0], data[:, 1])


def _csv_rows(path) -> list[list[str]]:
    with open(path, newline="") as fh:
        return [row for row in csv.reader(fh) if row and not row[0].startswith("#")]


@dataclass(frozen=True)
class BinningScheme:
    """Bins ``[0, e_0), [e_0, e_1), ..., [e_last, inf)`` from interior edges."""

    edges: np.ndarray
    scale: str = "log"

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.float64).ravel()
        if edges.size and (np.any(np.diff(edges) <= 0) or edges[0] <= 0 or not np.all(np.isfinite(edges))):
            raise ConfigError("bin edges must be positive, finite and strictly increasing")
        if self.scale not in ("log", "linear"):
            raise ConfigError(f"unknown bin scale {self.scale!r}")
        object.__setattr__(self, "edges", edges)

    @property
    def n_bins(self) -> int:
        return self.edges.size + 1

    def index(self, t_hat) -> np.ndarray:
        return np.searchsorted(self.edges, np.asarray(t_hat, dtype=np.float64), side="right")

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.concatenate([[0.0], self.edges])
        hi = np.concatenate([self.edges, [np.inf]])
        return lo, hi

    @classmethod
    def from_data(cls, t_hat, n_bins: int = 25, scale: str = "log") -> "BinningScheme":
        """``n_bins`` bins spanning the data range; the outer two are open-ended."""
        if n_bins < 1:
            raise ConfigError("need at least one bin")
        t = np.asarray(t_hat, dtype=np.float64).ravel()
        if scale == "log":
            t = t[t > 0]
        if t.size == 0 or n_bins == 1 or t.min() == t.max():
            return cls(np.empty(0), scale)
        if scale == "log":
            full = np.geomspace(t.min(), t.max(), n_bins + 1)
        elif scale == "linear":
            full = np.linspace(t.min(), t.max(), n_bins + 1)
        else:
            raise ConfigError(f"unknown bin scale {scale!r}")
        edges = full[1:-1]
        return cls(edges[edges > 0], scale)


@dataclass(frozen=True)
class QuantileTable:
    bins: BinningScheme
    counts: np.ndarray
    quantiles: np.ndarray
    q: float
    ess_sup: float

    def to_csv(self, path=None, header: str | None = None) -> str:
        buf = io.StringIO()
        if header:
            buf.write(header + "\n")
        buf.write("q,ess_sup,scale\n")
        buf.write(f"{self.q!r},{self.ess_sup!r},{self.bins.scale}\n")
        buf.write("t_lo,t_hi,N,quantile\n")
        lo, hi = self.bins.bounds()
        for a, b, n, v in zip(lo.tolist(), hi.tolist(), self.counts.tolist(), self.quantiles.tolist()):
            buf.write(f"{a!r},{b!r},{n},{v!r}\n")
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "QuantileTable":
        rows = _csv_rows(path)
        if len(rows) < 4 or rows[0] != ["q", "ess_sup", "scale"] or rows[2] != ["t_lo", "t_hi", "N", "quantile"]:
            raise ValueError(f"{path}: not a quantile table")
        q, ess_sup, scale = float(rows[1][0]), float(rows[1][1]), rows[1][2]
        body = rows[3:]
        edges = np.array([float(r[0]) for r in body[1:]])
        counts = np.array([int(r[2]) for r in body])
        quantiles = np.array([float(r[3]) for r in body])
        return cls(BinningScheme(edges, scale), counts, quantiles, q, ess_sup)


def build_table(records: Records, bins: BinningScheme, q: float, ess_sup: float = DEFAULT_ESS_SUP) -> QuantileTable:
    q = _check_level(q)
    if len(records) == 0:
        raise StatisticalError("no calibration records")
    idx = bins.index(records.t_hat)
    # stable sort by (bin, s) so each bin's errors are contiguous and ordered
    order = np.lexsort((records.s, idx))
    counts = np.bincount(idx, minlength=bins.n_bins)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    s_sorted = records.s[order]
    quantiles = np.full(bins.n_bins, float(ess_sup))
    for b in range(bins.n_bins):
        k = conformal_rank(int(counts[b]), q)
        if k <= counts[b]:
            quantiles[b] = s_sorted[starts[b] + k - 1]
    return QuantileTable(bins, counts, quantiles, q, float(ess_sup))


def predict_quantile(table: QuantileTable, t_hat):
    """Look up the error quantile for each ``t_hat`` (scalar or array)."""
    t = np.asarray(t_hat, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("t_hat must be nonnegative")
    out = table.quantiles[table.bins.index(t)]
    return float(out) if out.ndim == 0 else out


def coverage(s_map, q_map) -> float:
    """Fraction of entries whose error does not exceed the predicted quantile."""
    s = np.asarray(s_map, dtype=np.float64)
    qm = np.asarray(q_map, dtype=np.float64)
    check_same_shape(s, qm, "error and quantile maps")
    return float(np.mean(s <= qm))


def dataset_coverage(s_maps: Sequence, q_maps: Sequence) -> float:
    """Mean of per-image coverage."""
    return float(np.mean([coverage(s, qm) for s, qm in zip(s_maps, q_maps)]))


def mutual_information(records: Records, grid: int = 64, min_records: int = 1000) -> float:
    """Plug-in mutual information (nats) of ``(s, t_hat)`` from a 2D histogram.

    Histogram cells are equally spaced in ``log s`` and ``log t_hat`` over the
    occupied range.  Nonpositive values are lifted to the smallest positive
    value of the same variable before taking logs.
    """
    if len(records) < min_records:
        raise StatisticalError(f"need at least {min_records} records, got {len(records)}")
    a = _safe_log(records.s)
    b = _safe_log(records.t_hat)
    counts, _, _ = np.histogram2d(a, b, bins=grid, range=[_span(a), _span(b)])
    p = counts / counts.sum()
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / (pa @ pb)[nz])))


def _safe_log(v: np.ndarray) -> np.ndarray:
    pos = v[v > 0]
    floor = pos.min() if pos.size else 1.0
    return np.log(np.maximum(v, floor))


def _span(v: np.ndarray) -> tuple[float, float]:
    lo, hi = float(v.min()), float(v.max())
    return (lo, hi) if hi > lo else (lo - 0.5, hi + 0.5)


def pool_records(mode: str, truths, estimates, variances):
    """Turn per-image (x, x_hat, t_hat) stacks into calibration records.

    ``mode="joint"`` returns one :class:`Records` with every pixel of every
    image; ``mode="separate"`` returns a list with one :class:`Records` per
    pixel position (row-major), each holding one record per image.
    """
    if mode not in ("joint", "separate"):
        raise ConfigError(f"unknown pooling mode {mode!r}")
    if mode == "separate":
        shapes = {np.shape(x) for x in truths} | {np.shape(x) for x in estimates} | {np.shape(x) for x in variances}
        if len(shapes) != 1:
            raise ShapeError(f"pixel-separate pooling needs identical image shapes, got {sorted(shapes)}")
        x = np.stack([np.asarray(a, dtype=np.float64) for a in truths])
        xh = np.stack([np.asarray(a, dtype=np.float64) for a in estimates])
        t = np.stack([np.asarray(a, dtype=np.float64) for a in variances])
        s = ((xh - x) ** 2).reshape(len(x), -1)
        t = t.reshape(len(x), -1)
        return [Records(s[:, p], t[:, p]) for p in range(s.shape[1])]
    parts = []
    for x, xh, t in zip(truths, estimates, variances):
        x, xh, t = (np.asarray(a, dtype=np.float64) for a in (x, xh, t))
        check_same_shape(x, xh, "truth and estimate")
        check_same_shape(x, t, "truth and variance")
        parts.append(Records((xh - x) ** 2, t))
    return Records.concat(parts)


@dataclass(frozen=True)
class PixelTables:
    """Per-pixel quantile tables (pixel-separate calibration) on shared bins."""

    shape: tuple
    tables: tuple

    @property
    def q(self) -> float:
        return self.tables[0].q

    def predict(self, t_map) -> np.ndarray:
        t = np.asarray(t_map, dtype=np.float64)
        if t.shape != tuple(self.shape):
            raise ShapeError(f"variance map shape {t.shape} does not match tables {self.shape}")
        flat = t.ravel()
        return np.array([predict_quantile(tab, v) for tab, v in zip(self.tables, flat)]).reshape(t.shape)

    def to_csv(self, path=None, header: str | None = None) -> str:
        first = self.tables[0]
        buf = io.StringIO()
        if header:
            buf.write(header + "\n")
        buf.write("q,ess_sup,scale,height,width\n")
        buf.write(f"{first.q!r},{first.ess_sup!r},{first.bins.scale},{self.shape[0]},{self.shape[1]}\n")
        buf.write("pixel,t_lo,t_hi,N,quantile\n")
        lo, hi = first.bins.bounds()
        for p, tab in enumerate(self.tables):
            for a, b, n, v in zip(lo.tolist(), hi.tolist(), tab.counts.tolist(), tab.quantiles.tolist()):
                buf.write(f"{p},{a!r},{b!r},{n},{v!r}\n")
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "PixelTables":
        rows = _csv_rows(path)
        if len(rows) < 4 or rows[0][:3] != ["q", "ess_sup", "scale"] or rows[2][0] != "pixel":
            raise ValueError(f"{path}: not a pixel-separate quantile table")
        q, ess_sup, scale = float(rows[1][0]), float(rows[1][1]), rows[1][2]
        shape = (int(rows[1][3]), int(rows[1][4]))
        body = rows[3:]
        n_pix = shape[0] * shape[1]
        per = len(body) // n_pix
        edges = np.array([float(r[1]) for r in body[1:per]])
        bins = BinningScheme(edges, scale)
        tables = []
        for p in range(n_pix):
            chunk = body[p * per : (p + 1) * per]
            tables.append(
                QuantileTable(
                    bins,
                    np.array([int(r[3]) for r in chunk]),
                    np.array([float(r[4]) for r in chunk]),
                    q,
                    ess_sup,
                )
            )
        return cls(shape, tuple(tables))


def build_pixel_tables(sets: Sequence[Records], shape, bins: BinningScheme, q: float, ess_sup: float = DEFAULT_ESS_SUP) -> PixelTables:
    if len(sets) != shape[0] * shape[1]:
        raise ShapeError("need one record set per pixel")
    return PixelTables(tuple(shape), tuple(build_table(r, bins, q, ess_sup) for r in sets))


def load_table(path):
    """Read either a joint :class:`QuantileTable` or :class:`PixelTables` file."""
    rows = _csv_rows(path)
    if len(rows) > 2 and rows[2] and rows[2][0] == "pixel":
        return PixelTables.from_csv(path)
    return QuantileTable.from_csv(path)
