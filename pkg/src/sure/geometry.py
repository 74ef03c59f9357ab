"""Planar geometry, robust estimation, and match-quality metrics.

Everything here is plain numpy on float64; these functions form the
ground-truth and evaluation side of the pipeline and are deliberately
independent of the differentiable engine.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


class DegenerateGeometryError(ValueError):
    """Point configuration does not determine the model."""


class UndefinedCorrelationError(ValueError):
    """Rank correlation is undefined (constant input sequence)."""


@dataclass
class Homography:
    """3x3 projective transform, normalized so h[2,2] == 1 when possible."""

    h: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.h, dtype=np.float64).reshape(3, 3)
        if abs(np.linalg.det(m)) < 1e-12:
            raise DegenerateGeometryError("homography is singular")
        if abs(m[2, 2]) > 1e-12:
            m = m / m[2, 2]
        self.h = m

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.h))

    def compose(self, other: "Homography") -> "Homography":
        return Homography(self.h @ other.h)


@dataclass
class Correspondence:
    """A single match: point in image A, point in image B, confidence."""

    pa: tuple[float, float]
    pb: tuple[float, float]
    confidence: float = 1.0


@dataclass
class MetricReport:
    auc: dict[float, float]
    mean_epe: float
    spearman_ua: float | None
    spearman_ue: float | None
    inlier_ratio: float


@dataclass
class GroundTruth:
    """Grid-cell correspondences and sub-cell offsets induced by a warp."""

    cells_a: np.ndarray          # (M,) flat indices into A's coarse grid
    cells_b: np.ndarray          # (M,) flat indices into B's coarse grid
    offsets: np.ndarray          # (M, 2) target offsets in [-0.5, 0.5], (x, y)
    points_a: np.ndarray         # (M, 2) cell centers in A, pixels
    points_b: np.ndarray         # (M, 2) warped points in B, pixels
    grid: tuple[int, int]        # (H_c, W_c)
    stride: float
    empty_overlap: bool = False

    @property
    def correspondences(self) -> list[Correspondence]:
        return [Correspondence(tuple(pa), tuple(pb)) for pa, pb in
                zip(self.points_a, self.points_b)]


@dataclass
class RansacResult:
    homography: Homography | None
    inlier_mask: np.ndarray
    success: bool
    iterations: int


def apply_homography(h: Homography, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project (N,2) points; returns (projected, valid_mask).

    Points whose projective depth falls below 1e-9 in magnitude map to
    infinity and are masked invalid (their output row is NaN).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    ones = np.ones((pts.shape[0], 1))
    q = np.hstack([pts, ones]) @ h.h.T
    depth = q[:, 2]
    valid = np.abs(depth) > 1e-9
    out = np.full_like(pts, np.nan)
    out[valid] = q[valid, :2] / depth[valid, None]
    return out, valid


def cell_centers(grid: tuple[int, int], stride: float) -> np.ndarray:
    """Pixel coordinates (x, y) of coarse-cell centers, row-major flat order."""
    hc, wc = grid
    half = (stride - 1) / 2.0
    cols, rows = np.meshgrid(np.arange(wc), np.arange(hc))
    x = cols.ravel() * stride + half
    y = rows.ravel() * stride + half
    return np.stack([x, y], axis=1)


def make_ground_truth(h: Homography, grid: tuple[int, int], stride: float,
                      image_size_b: tuple[int, int]) -> GroundTruth:
    """Warp A's cell centers into B and snap each to its nearest cell.

    Nearest-cell assignment keeps every offset inside [-0.5, 0.5] per axis;
    centers landing outside B's valid pixel range produce no correspondence.
    image_size_b is (H, W).
    """
    hc, wc = grid
    hb, wb = image_size_b
    centers_a = cell_centers(grid, stride)
    warped, valid = apply_homography(h, centers_a)
    inb = valid.copy()
    inb[valid] &= ((warped[valid, 0] >= 0) & (warped[valid, 0] <= wb - 1) &
                   (warped[valid, 1] >= 0) & (warped[valid, 1] <= hb - 1))

    pa = centers_a[inb]
    w = warped[inb]
    half = (stride - 1) / 2.0
    col_b = np.clip(np.round((w[:, 0] - half) / stride).astype(np.int64), 0, wc - 1)
    row_b = np.clip(np.round((w[:, 1] - half) / stride).astype(np.int64), 0, hc - 1)
    centers_b = np.stack([col_b * stride + half, row_b * stride + half], axis=1)
    offsets = (w - centers_b) / stride

    cells_a = np.flatnonzero(inb).astype(np.int64)
    cells_b = (row_b * wc + col_b).astype(np.int64)
    return GroundTruth(cells_a=cells_a, cells_b=cells_b, offsets=offsets,
                       points_a=pa, points_b=w, grid=grid, stride=stride,
                       empty_overlap=(cells_a.size == 0))


def _hartley_normalization(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Translate centroid to origin and scale mean distance to sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / max(d, 1e-12)
    t = np.array([[s, 0, -s * c[0]],
                  [0, s, -s * c[1]],
                  [0, 0, 1]], dtype=np.float64)
    pn = np.hstack([pts, np.ones((pts.shape[0], 1))]) @ t.T
    return pn[:, :2], t


def _corr_arrays(corrs) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(corrs, tuple) and len(corrs) == 2:
        return (np.asarray(corrs[0], dtype=np.float64),
                np.asarray(corrs[1], dtype=np.float64))
    pa = np.array([c.pa for c in corrs], dtype=np.float64)
    pb = np.array([c.pb for c in corrs], dtype=np.float64)
    return pa, pb


def estimate_homography_dlt(corrs) -> Homography:
    """Least-squares homography by normalized direct linear transform.

    Accepts a list of Correspondence or a tuple of (N,2) arrays; needs at
    least 4 points in general position.
    """
    pa, pb = _corr_arrays(corrs)
    n = pa.shape[0]
    if n < 4:
        raise DegenerateGeometryError(f"need >= 4 correspondences, got {n}")
    pan, ta = _hartley_normalization(pa)
    pbn, tb = _hartley_normalization(pb)

    x, y = pan[:, 0], pan[:, 1]
    u, v = pbn[:, 0], pbn[:, 1]
    zero, one = np.zeros(n), np.ones(n)
    a = np.empty((2 * n, 9), dtype=np.float64)
    a[0::2] = np.column_stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u])
    a[1::2] = np.column_stack([zero, zero, zero, x, y, one, -v * x, -v * y, -v])

    _, s, vt = np.linalg.svd(a)
    if s[7] < 1e-9 * max(s[0], 1.0):
        raise DegenerateGeometryError("degenerate configuration (rank-deficient system)")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(tb) @ hn @ ta
    if abs(h[2, 2]) < 1e-12:
        raise DegenerateGeometryError("recovered homography has zero scale entry")
    return Homography(h)


def _symmetric_transfer_error(h: Homography, pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    fwd, vf = apply_homography(h, pa)
    bwd, vb = apply_homography(h.inverse(), pb)
    err = np.full(pa.shape[0], np.inf)
    ok = vf & vb
    err[ok] = np.sqrt(((fwd[ok] - pb[ok]) ** 2).sum(axis=1) +
                      ((bwd[ok] - pa[ok]) ** 2).sum(axis=1))
    return err


def ransac_homography(corrs, inlier_threshold_px: float = 3.0,
                      max_iters: int = 1000, seed: int = 0) -> RansacResult:
    """Hypothesize-and-verify homography fitting with 4-point DLT samples.

    Inlier test is symmetric transfer error; the consensus set is refit by
    DLT at the end.  Iteration count adapts to the observed inlier ratio at
    confidence 0.999.  Deterministic for a fixed seed.
    """
    pa, pb = _corr_arrays(corrs)
    n = pa.shape[0]
    if inlier_threshold_px <= 0:
        raise ValueError("inlier threshold must be positive")
    if n < 4:
        return RansacResult(None, np.zeros(n, dtype=bool), False, 0)

    rng = np.random.default_rng(seed)
    best_mask = np.zeros(n, dtype=bool)
    best_count = 0
    best_h: Homography | None = None
    needed = max_iters
    it = 0
    while it < min(max_iters, needed):
        it += 1
        idx = rng.choice(n, size=4, replace=False)
        try:
            h = estimate_homography_dlt((pa[idx], pb[idx]))
        except DegenerateGeometryError:
            continue
        err = _symmetric_transfer_error(h, pa, pb)
        mask = err < inlier_threshold_px
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask, best_h = count, mask, h
            ratio = count / n
            if ratio > 0:
                denom = np.log(max(1.0 - ratio ** 4, 1e-12))
                needed = int(np.ceil(np.log(1 - 0.999) / denom)) if denom < 0 else max_iters

    if best_count >= 4:
        try:
            refit = estimate_homography_dlt((pa[best_mask], pb[best_mask]))
            refit_mask = _symmetric_transfer_error(refit, pa, pb) < inlier_threshold_px
            if refit_mask.sum() >= 4:
                return RansacResult(refit, refit_mask, True, it)
        except DegenerateGeometryError:
            pass
        return RansacResult(best_h, best_mask, True, it)
    return RansacResult(best_h, best_mask, False, it)


def compute_epe(pred, h_true: Homography) -> np.ndarray:
    """Per-match end-point error ||pb - H(pa)|| in pixels."""
    pa, pb = _corr_arrays(pred)
    if pa.size == 0:
        return np.zeros(0)
    warped, valid = apply_homography(h_true, pa)
    err = np.full(pa.shape[0], np.inf)
    err[valid] = np.sqrt(((pb[valid] - warped[valid]) ** 2).sum(axis=1))
    return err


def compute_auc(errors, thresholds) -> dict[float, float]:
    """Normalized area under the cumulative error curve up to each threshold.

    Computed exactly from the step CDF: auc(t) = mean(clip(1 - e/t, 0, 1)).
    """
    thr = [float(t) for t in thresholds]
    if any(t <= 0 for t in thr) or sorted(thr) != thr:
        raise ValueError("thresholds must be positive and ascending")
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        warnings.warn("empty error list; AUC is zero at every threshold")
        return {t: 0.0 for t in thr}
    if np.any(e < 0):
        raise ValueError("errors must be non-negative")
    return {t: float(np.mean(np.clip(1.0 - e / t, 0.0, 1.0))) for t in thr}


def _average_ranks(a: np.ndarray) -> np.ndarray:
    """Fractional ranks starting at 1; ties get the average of their ranks."""
    order = np.argsort(a, kind="stable")
    ranks = np.empty(a.size, dtype=np.float64)
    sorted_a = a[order]
    i = 0
    while i < a.size:
        j = i
        while j + 1 < a.size and sorted_a[j + 1] == sorted_a[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rank_corr(a, b) -> float:
    """Pearson correlation of average ranks."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 3:
        raise ValueError("inputs must be equal-length 1-d sequences of length >= 3")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelationError("constant input sequence")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    return float((rx * ry).sum() / np.sqrt((rx ** 2).sum() * (ry ** 2).sum()))


def symmetric_epipolar_error(corr: Correspondence, f: np.ndarray) -> float:
    """d(pb, F pa)^2 + d(pa, F^T pb)^2 with point-line distances."""
    fm = np.asarray(f, dtype=np.float64).reshape(3, 3)
    pa = np.array([corr.pa[0], corr.pa[1], 1.0])
    pb = np.array([corr.pb[0], corr.pb[1], 1.0])
    line_b = fm @ pa          # epipolar line of pa in image B
    line_a = fm.T @ pb        # epipolar line of pb in image A
    nb = line_b[0] ** 2 + line_b[1] ** 2
    na = line_a[0] ** 2 + line_a[1] ** 2
    if nb < 1e-18 or na < 1e-18:
        raise ValueError("zero epipolar line normal")
    s = float(pb @ fm @ pa)
    return s * s / nb + s * s / na
