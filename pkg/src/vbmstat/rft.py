"""Gaussian random field cluster-level inference.

Smoothness is estimated from standardized residuals; the expected Euler
characteristic of the excursion set comes from the t-field EC densities and
resel counts; cluster extents follow the exponential approximation
``P(n >= k) = exp(-beta k^(2/3))`` and the corrected p-value treats the
number of clusters as Poisson.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import factorial, lgamma
from typing import List, Optional

import numpy as np
from scipy import stats
from scipy.special import gammaln

from ._io import atomic_write_text
from .clusters import Cluster, DEFAULT_CONNECTIVITY, connected_components, threshold
from .design import Contrast, DesignMatrix
from .errors import ConfigError, InsufficientDataError, SmoothnessUndefinedError
from .glm import GlmFit, fit, fit_matrix, t_map
from .phantom import fwhm_from_difference_variance
from .volume import VolumeStack, flat, unflat

FOUR_LN2 = 4.0 * np.log(2.0)
MIN_FWHM = 1e-3


@dataclass
class SmoothnessEstimate:
    fwhm_vox: np.ndarray  # (3,)
    voxel_size: np.ndarray  # (3,) mm
    resels: np.ndarray  # R0..R3
    mask_voxels: int
    diff_variance: Optional[np.ndarray] = None

    @property
    def fwhm_mm(self) -> np.ndarray:
        return self.fwhm_vox * self.voxel_size

    @property
    def resel_size(self) -> float:
        """Voxels per resel."""
        return float(np.prod(self.fwhm_vox))


def resel_counts(mask: np.ndarray, fwhm_vox) -> np.ndarray:
    """Resel counts ``R0..R3`` of a voxel mask.

    ``R0..R2`` come from counting the lattice points, edges, faces and cubes
    lying wholly inside the mask; ``R3`` is the voxel count over the resel size.
    """
    m = np.asarray(mask, dtype=bool)
    fx, fy, fz = np.asarray(fwhm_vox, dtype=float)
    P = m.sum()
    ex = (m[1:] & m[:-1]).sum()
    ey = (m[:, 1:] & m[:, :-1]).sum()
    ez = (m[:, :, 1:] & m[:, :, :-1]).sum()
    fxy = (m[1:, 1:] & m[:-1, 1:] & m[1:, :-1] & m[:-1, :-1]).sum()
    fxz = (m[1:, :, 1:] & m[:-1, :, 1:] & m[1:, :, :-1] & m[:-1, :, :-1]).sum()
    fyz = (m[:, 1:, 1:] & m[:, :-1, 1:] & m[:, 1:, :-1] & m[:, :-1, :-1]).sum()
    c = m[1:, 1:, 1:] & m[:-1, 1:, 1:] & m[1:, :-1, 1:] & m[1:, 1:, :-1]
    c &= m[:-1, :-1, 1:] & m[:-1, 1:, :-1] & m[1:, :-1, :-1] & m[:-1, :-1, :-1]
    C = c.sum()
    r0 = P - (ex + ey + ez) + (fxy + fxz + fyz) - C
    r1 = (ex - fxy - fxz + C) / fx + (ey - fxy - fyz + C) / fy + (ez - fxz - fyz + C) / fz
    r2 = (fxy - C) / (fx * fy) + (fxz - C) / (fx * fz) + (fyz - C) / (fy * fz)
    r3 = P / (fx * fy * fz)
    return np.array([r0, r1, r2, r3], dtype=float)


def _finish_smoothness(sum_sq, pairs, df, mask, voxel_size):
    if np.any(pairs == 0):
        raise SmoothnessUndefinedError("mask has no neighbouring voxel pairs along some axis")
    v = sum_sq / pairs
    if not np.all(np.isfinite(v)) or np.any(v <= 0):
        raise SmoothnessUndefinedError("residual fields are constant; smoothness is undefined")
    # normalised residuals overstate 2(1 - rho) by a factor 1 + rho (1 + rho) / (2 df)
    rho = np.clip(1.0 - v / 2.0, 0.0, 1.0)
    v = v / (1.0 + rho * (1.0 + rho) / (2.0 * df))
    fwhm = np.maximum(fwhm_from_difference_variance(v), MIN_FWHM)
    return SmoothnessEstimate(fwhm, np.asarray(voxel_size, float), resel_counts(mask, fwhm), int(mask.sum()), v)


def estimate_smoothness(std_residuals, mask: np.ndarray, df: int, voxel_size=(1.0, 1.0, 1.0)) -> SmoothnessEstimate:
    """FWHM per axis from standardized residuals ``e / sqrt(RSS)``.

    Parameters
    ----------
    std_residuals : array (n, V)
        One row per subject over the ``V`` mask voxels (mask order), or an
        array of ``n`` full grids.
    mask : bool grid
    df : int
        Residual degrees of freedom.
    """
    mask = np.asarray(mask, dtype=bool)
    r = np.asarray(std_residuals)
    if r.shape[0] < 3:
        raise InsufficientDataError(f"need at least 3 residual images, got {r.shape[0]}")
    idx = np.flatnonzero(flat(mask))
    sum_sq = np.zeros(3)
    pairs = np.array(
        [(mask[1:] & mask[:-1]).sum(), (mask[:, 1:] & mask[:, :-1]).sum(), (mask[:, :, 1:] & mask[:, :, :-1]).sum()],
        dtype=float,
    )
    both = [mask[1:] & mask[:-1], mask[:, 1:] & mask[:, :-1], mask[:, :, 1:] & mask[:, :, :-1]]
    for row in r:
        if row.ndim == 1:
            g = np.zeros(mask.size)
            g[idx] = row
            g = unflat(g, mask.shape)
        else:
            g = np.asarray(row, dtype=float)
        for ax in range(3):
            d = np.diff(g, axis=ax)
            sum_sq[ax] += np.sum(d[both[ax]] ** 2)
    return _finish_smoothness(sum_sq, pairs, df, mask, voxel_size)


def smoothness_from_fit(fit: GlmFit) -> SmoothnessEstimate:
    if fit.std_residuals is None:
        raise ConfigError("fit was run without keeping residuals")
    vs = np.sqrt((fit.affine[:3, :3] ** 2).sum(axis=0))
    return estimate_smoothness(fit.std_residuals, fit.mask, fit.df, vs)


def smoothness_from_products(rss, res_cross, mask, df, voxel_size) -> SmoothnessEstimate:
    """Same estimate from per-voxel RSS and neighbour residual products (streaming path)."""
    mask = np.asarray(mask, dtype=bool) & (rss > 0)
    sum_sq = np.zeros(3)
    pairs = np.zeros(3)
    for ax in range(3):
        hi = [slice(None)] * 3
        lo = [slice(None)] * 3
        hi[ax] = slice(1, None)
        lo[ax] = slice(None, -1)
        both = mask[tuple(hi)] & mask[tuple(lo)]
        denom = np.sqrt(rss[tuple(hi)][both] * rss[tuple(lo)][both])
        sum_sq[ax] = np.sum(2.0 - 2.0 * res_cross[ax][both] / denom)
        pairs[ax] = both.sum()
    return _finish_smoothness(sum_sq, pairs, df, mask, voxel_size)


def ec_densities(u: float, df: float) -> np.ndarray:
    """Euler characteristic densities ``rho_0..rho_3`` of a t field (per resel)."""
    u = float(u)
    g = (1.0 + u * u / df) ** (-(df - 1.0) / 2.0)
    rho0 = stats.t.sf(u, df)
    rho1 = np.sqrt(FOUR_LN2) / (2.0 * np.pi) * g
    c2 = np.exp(gammaln((df + 1.0) / 2.0) - gammaln(df / 2.0)) / np.sqrt(df / 2.0)
    rho2 = FOUR_LN2 / (2.0 * np.pi) ** 1.5 * c2 * u * g
    rho3 = FOUR_LN2**1.5 / (2.0 * np.pi) ** 2 * g * ((df - 1.0) / df * u * u - 1.0)
    return np.array([rho0, rho1, rho2, rho3])


def expected_clusters(u: float, S: SmoothnessEstimate, df: float) -> float:
    return float(np.dot(S.resels, ec_densities(u, df)))


@dataclass
class ClusterTest:
    """GRF quantities shared by every cluster at one threshold."""

    u: float
    voxel_p: float
    df: float
    expected_clusters: float
    expected_resels_per_cluster: float
    beta: float

    def extent_survival(self, k_resel: float) -> float:
        if k_resel <= 0:
            raise ConfigError(f"cluster extent must be positive, got {k_resel} resels")
        if not np.isfinite(self.beta):
            return 1.0
        return float(np.exp(-self.beta * k_resel ** (2.0 / 3.0)))

    def fwe_p(self, k_resel: float) -> float:
        return float(-np.expm1(-self.expected_clusters * self.extent_survival(k_resel)))


def cluster_test(u: float, S: SmoothnessEstimate, df: float) -> ClusterTest:
    if not u > 0:
        raise ConfigError(f"cluster-forming threshold must be > 0, got {u}")
    rho = ec_densities(u, df)
    em = float(np.dot(S.resels, rho))
    en = float(S.resels[3] * rho[0])  # expected suprathreshold resels
    if em <= 0:
        em = np.finfo(float).tiny
    eta = en / em
    beta = (np.exp(lgamma(2.5)) / eta) ** (2.0 / 3.0) if eta > 0 else np.inf
    return ClusterTest(float(u), float(rho[0]), float(df), em, eta, float(beta))


def cluster_fwe_p(k: float, u: float, S: SmoothnessEstimate, df: float) -> float:
    """Corrected p for a cluster of ``k`` voxels formed at threshold ``u``.

    With a degenerate search region (``R1 = R2 = R3 = 0``) the extent term is
    1 and the result is ``1 - exp(-R0 P(T > u))``, i.e. voxelwise inference.
    """
    if k < 1:
        raise ConfigError(f"cluster extent must be >= 1 voxel, got {k}")
    return cluster_test(u, S, df).fwe_p(k / S.resel_size)


def annotate_clusters(clusters: List[Cluster], u: float, S: SmoothnessEstimate, df: float) -> ClusterTest:
    test = cluster_test(u, S, df)
    for c in clusters:
        c.extra["k_resel"] = c.extent / S.resel_size
        c.fwe_p = test.fwe_p(c.extra["k_resel"])
    return test


def inference_report(test: ClusterTest, S: SmoothnessEstimate, clusters: List[Cluster]) -> dict:
    return {
        "u": test.u,
        "voxel_p": test.voxel_p,
        "df": test.df,
        "fwhm_mm": [float(x) for x in S.fwhm_mm],
        "fwhm_vox": [float(x) for x in S.fwhm_vox],
        "resels": [float(x) for x in S.resels],
        "expected_clusters": test.expected_clusters,
        "expected_resels_per_cluster": test.expected_resels_per_cluster,
        "clusters": [
            {
                "id": c.id,
                "extent": c.extent,
                "peak_t": c.peak_t,
                "peak_mni": [float(x) for x in c.peak_world],
                "fwe_p": c.fwe_p,
                "label": c.label,
            }
            for c in clusters
        ],
    }


def write_report(report: dict, path) -> None:
    atomic_write_text(path, json.dumps(report, indent=2, sort_keys=True) + "\n")


# --- permutation oracle -------------------------------------------------------------


def _n_labelings(groups: np.ndarray) -> int:
    _, counts = np.unique(groups, return_counts=True)
    total = factorial(int(counts.sum()))
    for c in counts:
        total //= factorial(int(c))
    return total


def _max_extent(Y, Xp, c, u, mask, connectivity):
    beta, sigma2, df, _, xtx_pinv, _ = fit_matrix(Y, Xp, keep_residuals=False)
    factor = float(c @ xtx_pinv @ c)
    t = np.zeros(sigma2.size)
    ok = sigma2 > 0
    t[ok] = (c @ beta)[ok] / np.sqrt(sigma2[ok] * factor)
    grid = np.zeros(mask.size, dtype=bool)
    grid[np.flatnonzero(flat(mask))] = t > u
    cl = connected_components(unflat(grid, mask.shape), connectivity)
    return cl[0].extent if cl else 0


def permutation_cluster_p(
    stack: VolumeStack,
    X: DesignMatrix,
    c,
    u: float,
    n_perm: int,
    seed: int = 0,
    connectivity: int = DEFAULT_CONNECTIVITY,
    n_jobs: int = 1,
):
    """Permutation FWE p-values for the observed clusters of a group contrast.

    Group labels (the indicator columns) are shuffled across subjects while
    intercept and covariates stay attached to their rows; the model is refit
    for each permutation and the maximum cluster extent recorded. Returns
    ``(clusters, null_max_extents)``, each cluster carrying
    ``(1 + #{null >= extent}) / (1 + n_perm)`` in ``fwe_p``.
    """
    if n_perm < 100:
        raise ConfigError(f"need at least 100 permutations, got {n_perm}")
    w = c.vector if isinstance(c, Contrast) else np.asarray(c, dtype=float)
    ind = [j for j, role in enumerate(X.roles) if role == "indicator"]
    if not ind or np.any(np.abs(np.delete(w, ind)) > 0):
        raise ConfigError("permutation test needs a contrast on group indicator columns only")
    groups = X.matrix[:, ind] @ (np.arange(len(ind)) + 1)
    if _n_labelings(groups) - 1 < n_perm:
        raise InsufficientDataError(
            f"only {_n_labelings(groups) - 1} distinct relabelings exist; {n_perm} requested"
        )
    Y = stack.matrix()
    mask = stack.analysis_mask
    obs_map = t_map(fit(stack, X, keep_residuals=False), w)
    observed = connected_components(threshold(obs_map, u), connectivity, stat=obs_map)

    def one(i):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(2, i))))
        perm = rng.permutation(X.n)
        Xp = X.matrix.copy()
        Xp[:, ind] = X.matrix[perm][:, ind]
        return _max_extent(Y, Xp, w, u, mask, connectivity)

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            null = np.array(list(pool.map(one, range(n_perm))))
    else:
        null = np.array([one(i) for i in range(n_perm)])
    for cl in observed:
        cl.fwe_p = float((1 + np.sum(null >= cl.extent)) / (1 + n_perm))
    return observed, null
