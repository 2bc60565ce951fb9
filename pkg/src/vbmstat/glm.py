"""Mass-univariate OLS: one shared pseudoinverse, many voxels."""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

from ._io import atomic_write_text
from .design import Contrast, DesignMatrix
from .errors import ConfigError, ContrastNotEstimableError, InsufficientDfError
from .volume import Volume3D, VolumeStack, flat, unflat

# voxels per work unit; fixed so results never depend on the thread count
CHUNK = 4096


def pinv_design(X: np.ndarray):
    """Return ``(pinv(X), pinv(X'X), rank)`` from one SVD.

    Singular values below ``max(n, p) * eps * s_max`` are treated as zero.
    """
    X = np.asarray(X, dtype=float)
    u, s, vt = np.linalg.svd(X, full_matrices=False)
    tol = max(X.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    keep = s > tol
    rank = int(keep.sum())
    u, s, vt = u[:, keep], s[keep], vt[keep]
    pinv_x = (vt.T / s) @ u.T
    xtx_pinv = (vt.T / s**2) @ vt
    return pinv_x, xtx_pinv, rank


@dataclass(eq=False)
class GlmFit:
    """Voxelwise OLS results over the analysis mask (vectors in mask order)."""

    beta: np.ndarray  # (p, V)
    sigma2: np.ndarray  # (V,)
    df: int
    rank: int
    X: np.ndarray
    xtx_pinv: np.ndarray
    std_residuals: Optional[np.ndarray]  # (n, V) float32, residual / sqrt(RSS)
    mask: np.ndarray
    affine: np.ndarray
    names: tuple = ()

    @property
    def zero_variance(self) -> np.ndarray:
        return ~(self.sigma2 > 0)

    def to_volume(self, values: np.ndarray, fill: float = 0.0) -> Volume3D:
        grid = np.full(self.mask.size, fill, dtype=float)
        grid[np.flatnonzero(flat(self.mask))] = values
        return Volume3D(unflat(grid, self.mask.shape), self.affine)

    def beta_volume(self, j: int) -> Volume3D:
        return self.to_volume(self.beta[j])

    def summary(self) -> dict:
        return {
            "n_subjects": int(self.X.shape[0]),
            "n_columns": int(self.X.shape[1]),
            "rank": int(self.rank),
            "df_error": int(self.df),
            "mask_voxels": int(self.mask.sum()),
            "zero_variance_voxels": int(self.zero_variance.sum()),
        }

    def write_summary(self, path) -> None:
        atomic_write_text(path, json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def _fit_chunk(Y, X, pinv_x, keep_residuals):
    beta = pinv_x @ Y
    resid = Y - X @ beta
    rss = np.einsum("ij,ij->j", resid, resid)
    # rounding noise on exactly-fitted voxels counts as zero variance
    floor = (Y.shape[0] * np.finfo(float).eps * np.max(np.abs(Y), axis=0, initial=0.0)) ** 2 * Y.shape[0]
    rss[rss <= floor] = 0.0
    std = None
    if keep_residuals:
        scale = np.zeros_like(rss)
        pos = rss > 0
        scale[pos] = 1.0 / np.sqrt(rss[pos])
        std = (resid * scale).astype(np.float32)
    return beta, rss, std


def fit_matrix(Y: np.ndarray, X, n_jobs: int = 1, keep_residuals: bool = True):
    """Fit ``Y = X beta + e`` column by column; returns ``(beta, sigma2, df, rank, xtx_pinv, std_residuals)``."""
    Xm = X.matrix if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.shape[0] != Xm.shape[0]:
        raise ConfigError(f"data has {Y.shape[0]} rows but design has {Xm.shape[0]}")
    pinv_x, xtx_pinv, rank = pinv_design(Xm)
    df = Xm.shape[0] - rank
    if df < 1:
        raise InsufficientDfError(f"n = {Xm.shape[0]} does not exceed design rank {rank}")
    V = Y.shape[1]
    bounds = [(a, min(a + CHUNK, V)) for a in range(0, V, CHUNK)]

    def work(b):
        return _fit_chunk(Y[:, b[0] : b[1]], Xm, pinv_x, keep_residuals)

    if n_jobs > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            parts = list(pool.map(work, bounds))
    else:
        parts = [work(b) for b in bounds]
    beta = np.concatenate([p[0] for p in parts], axis=1) if parts else np.zeros((Xm.shape[1], 0))
    rss = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0)
    std = np.concatenate([p[2] for p in parts], axis=1) if keep_residuals and parts else None
    return beta, rss / df, df, rank, xtx_pinv, std


def fit(stack: VolumeStack, X: DesignMatrix, n_jobs: int = 1, keep_residuals: bool = True) -> GlmFit:
    """Voxelwise least squares over ``stack.analysis_mask``."""
    if isinstance(X, DesignMatrix) and tuple(X.subject_ids) != tuple(stack.subject_ids):
        raise ConfigError("stack subject order does not match the design matrix rows")
    Xm = X.matrix if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)
    beta, sigma2, df, rank, xtx_pinv, std = fit_matrix(stack.matrix(), Xm, n_jobs, keep_residuals)
    names = X.names if isinstance(X, DesignMatrix) else ()
    return GlmFit(beta, sigma2, df, rank, Xm, xtx_pinv, std, stack.analysis_mask, stack.affine, names)


@dataclass(eq=False)
class StatMap:
    t: np.ndarray  # (V,) on mask
    df: int
    contrast: str
    mask: np.ndarray
    affine: np.ndarray
    zero_variance: np.ndarray  # (V,) bool

    @property
    def dims(self):
        return self.mask.shape

    def grid(self, fill: float = 0.0) -> np.ndarray:
        out = np.full(self.mask.size, fill, dtype=float)
        out[np.flatnonzero(flat(self.mask))] = self.t
        return unflat(out, self.mask.shape)

    def volume(self) -> Volume3D:
        return Volume3D(self.grid(), self.affine, self.mask)

    def valid_mask(self) -> np.ndarray:
        """Mask grid with zero-variance voxels removed."""
        out = np.zeros(self.mask.size, dtype=bool)
        out[np.flatnonzero(flat(self.mask))] = ~self.zero_variance
        return unflat(out, self.mask.shape)


def contrast_variance_factor(c, xtx_pinv, X=None) -> float:
    """``c' pinv(X'X) c`` after checking ``c`` lies in the row space of ``X``."""
    c = np.asarray(c, dtype=float)
    if c.shape != (xtx_pinv.shape[0],):
        raise ConfigError(f"contrast length {c.size} does not match {xtx_pinv.shape[0]} design columns")
    if X is not None:
        proj = c @ np.linalg.pinv(X) @ X
        if np.max(np.abs(proj - c)) > 1e-8 * max(1.0, np.max(np.abs(c))):
            raise ContrastNotEstimableError(f"contrast {c.tolist()} is not estimable from this design")
    factor = float(c @ xtx_pinv @ c)
    if not factor > 0:
        raise ContrastNotEstimableError(f"contrast {c.tolist()} has c' pinv(X'X) c = {factor} <= 0")
    return factor


def t_map(fit: GlmFit, c) -> StatMap:
    """``t = c'beta / sqrt(sigma2 * c' pinv(X'X) c)``; zero-variance voxels get t = 0."""
    name = c.name if isinstance(c, Contrast) else "contrast"
    w = c.vector if isinstance(c, Contrast) else np.asarray(c, dtype=float)
    factor = contrast_variance_factor(w, fit.xtx_pinv, fit.X)
    effect = w @ fit.beta
    zero = fit.zero_variance
    t = np.zeros_like(effect)
    ok = ~zero
    t[ok] = effect[ok] / np.sqrt(fit.sigma2[ok] * factor)
    return StatMap(t, fit.df, name, fit.mask, fit.affine, zero)


def t_to_p(t, df):
    """Upper-tail Student-t probability."""
    if np.any(np.asarray(df) < 1):
        raise ConfigError("degrees of freedom must be >= 1")
    return stats.t.sf(t, df)


def p_to_t(p, df):
    """Threshold ``u`` with ``P(T > u) = p``."""
    if np.any(np.asarray(df) < 1):
        raise ConfigError("degrees of freedom must be >= 1")
    return stats.t.isf(p, df)


class StreamingFit:
    """Accumulate the sufficient statistics of a voxelwise OLS one subject at a time.

    Keeps ``X'Y``, ``sum Y^2`` and the neighbour cross-products
    ``sum_i Y_i(x) Y_i(x + e_d)`` so that t-maps and residual smoothness can be
    formed without holding every subject image in memory.
    """

    def __init__(self, X, dims):
        self.X = np.asarray(X.matrix if isinstance(X, DesignMatrix) else X, dtype=float)
        self.dims = tuple(dims)
        n, p = self.X.shape
        self.xty = np.zeros((p,) + self.dims)
        self.yy = np.zeros(self.dims)
        self.cross = [np.zeros(tuple(d - (ax == a) for a, d in enumerate(self.dims))) for ax in range(3)]
        self._row = 0

    def add(self, img: np.ndarray) -> None:
        if self._row >= self.X.shape[0]:
            raise ConfigError("more images than design rows")
        img = np.asarray(img, dtype=float)
        x = self.X[self._row]
        for j in range(x.size):
            if x[j] != 0:
                self.xty[j] += x[j] * img
        self.yy += img * img
        self.cross[0] += img[1:] * img[:-1]
        self.cross[1] += img[:, 1:] * img[:, :-1]
        self.cross[2] += img[:, :, 1:] * img[:, :, :-1]
        self._row += 1

    def finish(self):
        """Return ``(beta, rss, neighbour_residual_products, df, xtx_pinv)``, all grids."""
        if self._row != self.X.shape[0]:
            raise ConfigError(f"received {self._row} images for {self.X.shape[0]} design rows")
        _, xtx_pinv, rank = pinv_design(self.X)
        df = self.X.shape[0] - rank
        if df < 1:
            raise InsufficientDfError("no residual degrees of freedom")
        beta = np.tensordot(xtx_pinv, self.xty, axes=1)
        rss = self.yy - np.einsum("j...,j...->...", self.xty, beta)
        rss = np.maximum(rss, 0.0)
        res_cross = []
        for ax in range(3):
            hi = [slice(None)] * 3
            lo = [slice(None)] * 3
            hi[ax] = slice(1, None)
            lo[ax] = slice(None, -1)
            fitted = np.einsum("j...,j...->...", self.xty[(slice(None),) + tuple(hi)], beta[(slice(None),) + tuple(lo)])
            res_cross.append(self.cross[ax] - fitted)
        return beta, rss, res_cross, df, xtx_pinv
