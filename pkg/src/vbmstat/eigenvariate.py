"""First-eigenvariate ROI summaries with nuisance covariates regressed out."""

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .design import DesignMatrix
from .errors import ConfigError, DegenerateRoiError, DataError
from .volume import Volume3D, VolumeStack, flat, unflat

DEFAULT_REMOVE = ("age", "tiv")
SCALINGS = ("voxels", "subjects")


@dataclass(eq=False)
class Eigenvariate:
    values: np.ndarray  # one per subject
    explained_variance: float
    weights: np.ndarray  # one per ROI voxel (unit norm)
    roi_index: np.ndarray  # linear voxel indices of the ROI
    removed: tuple
    kept: tuple

    def weight_volume(self, dims, affine) -> Volume3D:
        grid = np.zeros(int(np.prod(dims)))
        grid[self.roi_index] = self.weights
        return Volume3D(unflat(grid, dims), affine)


def _roi_index(roi, dims) -> np.ndarray:
    roi = np.asarray(roi)
    if roi.dtype == bool:
        if roi.shape != tuple(dims):
            raise ConfigError(f"ROI grid {roi.shape} does not match image grid {tuple(dims)}")
        return np.flatnonzero(flat(roi))
    return np.unique(roi.astype(np.int64))


def eigenvariate_from_matrix(M: np.ndarray, nuisance: np.ndarray = None, scaling: str = "voxels"):
    """Rank-1 summary of an ``n x v`` matrix after projecting out ``nuisance`` columns.

    Returns ``(values, weights, explained)`` with ``values = u1 * s1 / sqrt(k)``
    and the sign fixed so that the voxel weights sum to a non-negative number
    (first non-negligible weight positive when the sum cancels).
    ``k`` is the voxel count (``scaling="voxels"``, values on the scale of the
    ROI mean intensity) or the subject count (``scaling="subjects"``).
    """
    if scaling not in SCALINGS:
        raise ConfigError(f"scaling must be one of {SCALINGS}, got {scaling!r}")
    M = np.asarray(M, dtype=float)
    n = M.shape[1] if scaling == "voxels" else M.shape[0]
    if nuisance is not None and nuisance.size:
        Z = np.asarray(nuisance, dtype=float)
        M = M - Z @ (np.linalg.pinv(Z) @ M)
    u, s, vt = np.linalg.svd(M, full_matrices=False)
    total = float(np.sum(s**2))
    if s.size == 0 or not s[0] > 1e-12 * max(1.0, np.sqrt(total)) or total == 0:
        raise DegenerateRoiError("adjusted ROI data have no variance")
    u1, v1 = u[:, 0], vt[0]
    total_w = v1.sum()
    scale_w = np.abs(v1).sum()
    if abs(total_w) <= 1e-9 * scale_w:
        # weights cancel: the sum's sign is rounding noise, so the first
        # non-negligible weight decides instead
        total_w = v1[np.flatnonzero(np.abs(v1) > 1e-9 * scale_w)[0]]
    if total_w < 0:
        u1, v1 = -u1, -v1
    return u1 * s[0] / np.sqrt(n), v1, float(s[0] ** 2 / total)


def extract_eigenvariate(
    stack: VolumeStack,
    roi,
    X: DesignMatrix,
    keep: Sequence[str] = ("intercept", "mci", "ad"),
    remove: Sequence[str] = DEFAULT_REMOVE,
    scaling: str = "voxels",
) -> Eigenvariate:
    """Adjusted first eigenvariate of the ROI voxels.

    Parameters
    ----------
    roi : bool grid or array of linear voxel indices
    keep, remove : design column names
        ``remove`` columns are regressed out of every ROI voxel before the SVD;
        ``keep`` columns (group effects by default) are left in the data.
    scaling : {"voxels", "subjects"}
        Divisor of ``u1 * s1``: square root of the ROI voxel count or of the
        subject count.
    """
    keep, remove = tuple(keep), tuple(remove)
    if set(keep) & set(remove):
        raise ConfigError(f"columns both kept and removed: {sorted(set(keep) & set(remove))}")
    X.columns(keep)
    cols = X.columns(remove)
    if tuple(X.subject_ids) != tuple(stack.subject_ids):
        raise ConfigError("stack subject order does not match the design matrix rows")
    idx = _roi_index(roi, stack.dims)
    if idx.size == 0:
        raise DataError("ROI is empty")
    M = np.stack([v.vector()[idx] for v in stack.volumes])
    values, weights, explained = eigenvariate_from_matrix(M, X.matrix[:, cols], scaling)
    return Eigenvariate(values, explained, weights, idx, remove, keep)
