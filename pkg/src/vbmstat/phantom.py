"""Synthetic VBM cohorts built from smooth Gaussian random fields.

Each subject image is white noise smoothed with a separable Gaussian kernel,
rescaled to a known voxelwise standard deviation, offset by a baseline and
reduced inside group-specific spheres ("atrophy"). Randomness comes from
NumPy's PCG64 bit generator seeded through ``SeedSequence(seed,
spawn_key=...)``; the subject field for subject ``i`` always uses spawn key
``(1, i)`` and the covariate table uses ``(0,)``, so output does not depend
on scheduling.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage

from ._io import atomic_write_text
from .errors import ConfigError, InsufficientDataError
from .volume import Volume3D, VolumeStack, stack_volumes

FWHM_PER_SIGMA = 2.0 * np.sqrt(2.0 * np.log(2.0))
RNG_ALGORITHM = "numpy PCG64 via SeedSequence(seed, spawn_key)"
DIAGNOSES = ("CN", "MCI", "AD")

# synthetic covariate distributions; magnitudes only, no claim about any real cohort
AGE_MEAN, AGE_SD = 73.0, 6.0
TIV_MEAN, TIV_SD = 1450.0, 130.0
EDUCATION_MEAN, EDUCATION_SD = 15.5, 2.8
MMSE_MEAN = {"CN": 29.0, "MCI": 27.0, "AD": 22.0}
MMSE_SD = 2.0
APOE4_RATE = {"CN": 0.322, "MCI": 0.333, "AD": 0.467}


def _per_axis(value, name="fwhm") -> np.ndarray:
    arr = np.broadcast_to(np.asarray(value, dtype=float), (3,)).copy()
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} must be finite and >= 0 per axis, got {value}")
    return arr


def fwhm_to_sigma(fwhm_mm, voxel_size) -> np.ndarray:
    """Kernel standard deviation in voxels for a FWHM in millimetres."""
    return _per_axis(fwhm_mm) / FWHM_PER_SIGMA / np.asarray(voxel_size, dtype=float)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled Gaussian truncated at +-4 sigma and renormalised to unit sum."""
    if sigma <= 0:
        return np.ones(1)
    radius = int(np.ceil(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth_array(arr: np.ndarray, sigmas, mode: str = "reflect") -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    for axis, s in enumerate(sigmas):
        if s > 0:
            out = ndimage.correlate1d(out, gaussian_kernel(s), axis=axis, mode=mode)
    return out


def gaussian_smooth(v: Volume3D, fwhm) -> Volume3D:
    """Separable Gaussian smoothing of a volume; ``fwhm`` in mm, scalar or per axis.

    Boundaries are handled by symmetric reflection so constant images stay constant.
    """
    sigmas = fwhm_to_sigma(fwhm, v.voxel_size)
    if not np.any(sigmas > 0):
        return v
    return v.with_data(smooth_array(v.data, sigmas))


@lru_cache(maxsize=32)
def _band_matrix(sigma: float, n: int) -> np.ndarray:
    """``(n, n + 2r)`` matrix applying the truncated kernel in 'valid' mode."""
    k = gaussian_kernel(sigma)
    T = np.zeros((n, n + k.size - 1))
    for i in range(n):
        T[i, i : i + k.size] = k
    T.flags.writeable = False
    return T


def smooth_noise_field(rng: np.random.Generator, dims, sigmas, sd: float = 1.0) -> np.ndarray:
    """Stationary smooth Gaussian field with voxelwise standard deviation ``sd``.

    Noise is drawn on a grid padded by the kernel radius and each axis pass
    keeps only fully supported samples, so no boundary condition ever touches
    the returned voxels. The passes are banded matrix products.
    """
    dims = tuple(int(d) for d in dims)
    mats = [_band_matrix(float(s), d) for s, d in zip(sigmas, dims)]
    padded = tuple(T.shape[1] for T in mats)
    out = rng.standard_normal(padded)
    nx, ny, nz = dims
    out = (mats[0] @ out.reshape(padded[0], -1)).reshape(nx, padded[1], padded[2])
    out = np.matmul(mats[1], out)
    out = np.matmul(out, mats[2].T)
    energy = float(np.prod([np.sum(gaussian_kernel(float(s)) ** 2) for s in sigmas]))
    out *= sd / np.sqrt(energy)
    return out


@dataclass
class Sphere:
    center: Tuple[float, float, float]  # mm, world
    radius: float  # mm
    delta: float  # intensity subtracted inside

    def __post_init__(self):
        self.center = tuple(float(c) for c in self.center)

    def weights(self, dims, affine) -> np.ndarray:
        """Effect weight per voxel: 1 inside, 0 outside, linear over one voxel at the edge."""
        ijk = np.indices(dims, dtype=float).reshape(3, -1).T
        xyz = ijk @ np.asarray(affine)[:3, :3].T + np.asarray(affine)[:3, 3]
        dist = np.linalg.norm(xyz - np.asarray(self.center, dtype=float), axis=1)
        h = float(np.mean(np.sqrt((np.asarray(affine)[:3, :3] ** 2).sum(axis=0))))
        w = np.clip((self.radius - dist) / h + 0.5, 0.0, 1.0)
        return w.reshape(dims)


@dataclass
class GroupSpec:
    label: str
    n: int
    spheres: List[Sphere] = field(default_factory=list)


@dataclass
class PhantomSpec:
    dims: Tuple[int, int, int]
    voxel_size: Tuple[float, float, float]
    smoothing_fwhm: Tuple[float, float, float]
    groups: List[GroupSpec]
    noise_sd: float = 0.1
    seed: int = 0
    baseline: float = 1.0
    conversion_rate: float = 0.0
    converter_spheres: List[Sphere] = field(default_factory=list)
    apoe4_rate: Optional[dict] = None

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.voxel_size = tuple(float(v) for v in np.broadcast_to(self.voxel_size, (3,)))
        self.smoothing_fwhm = tuple(_per_axis(self.smoothing_fwhm, "smoothing_fwhm"))
        self.groups = [g if isinstance(g, GroupSpec) else _group_from_dict(g) for g in self.groups]
        self.converter_spheres = [s if isinstance(s, Sphere) else Sphere(**s) for s in self.converter_spheres]
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigError(f"dims must be three positive integers, got {self.dims}")
        if min(self.voxel_size) <= 0:
            raise ConfigError("voxel sizes must be > 0")
        if self.noise_sd <= 0:
            raise ConfigError("noise_sd must be > 0")
        if not 0.0 <= self.conversion_rate <= 1.0:
            raise ConfigError("conversion_rate must lie in [0, 1]")
        if not self.groups:
            raise ConfigError("at least one group is required")
        labels = [g.label for g in self.groups]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"duplicate group labels {labels}")
        lo, hi = self.field_of_view()
        for g in self.groups:
            if g.label not in DIAGNOSES:
                raise ConfigError(f"group label {g.label!r} not in {DIAGNOSES}")
            if g.n < 2:
                raise ConfigError(f"group {g.label} needs n >= 2, got {g.n}")
        for s in [s for g in self.groups for s in g.spheres] + self.converter_spheres:
            c = np.asarray(s.center, dtype=float)
            if s.radius <= 0 or np.any(c - s.radius < lo) or np.any(c + s.radius > hi):
                raise ConfigError(f"sphere at {s.center} radius {s.radius} leaves the field of view")

    @property
    def n_subjects(self) -> int:
        return sum(g.n for g in self.groups)

    def affine(self) -> np.ndarray:
        """Voxel-to-world map with the grid centre at the world origin."""
        vs = np.asarray(self.voxel_size)
        aff = np.diag(np.r_[vs, 1.0])
        aff[:3, 3] = -vs * (np.asarray(self.dims) - 1) / 2.0
        return aff

    def field_of_view(self):
        vs = np.asarray(self.voxel_size)
        half = vs * (np.asarray(self.dims) - 1) / 2.0
        return -half, half

    def sigmas(self) -> np.ndarray:
        return fwhm_to_sigma(self.smoothing_fwhm, self.voxel_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        d.pop("rng", None)
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "PhantomSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (TypeError, KeyError, ValueError) as exc:
            raise ConfigError(f"{path}: invalid phantom spec ({exc})") from exc

    def to_json(self, path) -> None:
        d = self.to_dict()
        d["rng"] = RNG_ALGORITHM
        atomic_write_text(path, json.dumps(d, indent=2) + "\n")


def _group_from_dict(d) -> GroupSpec:
    d = dict(d)
    spheres = [s if isinstance(s, Sphere) else Sphere(**s) for s in d.pop("spheres", [])]
    return GroupSpec(spheres=spheres, **d)


def three_group_spec(
    dims=(40, 40, 40),
    voxel_size=2.0,
    fwhm=8.0,
    delta_ad: float = 0.0,
    delta_mci: float = 0.0,
    radius: float = 10.0,
    center=(0.0, 0.0, 0.0),
    counts=(90, 129, 30),
    noise_sd: float = 0.1,
    seed: int = 0,
    conversion_rate: float = 0.0,
    converter_delta: float = 0.0,
) -> PhantomSpec:
    """Three-group cohort (CN/MCI/AD) with one shared atrophy sphere."""
    groups = []
    for label, n, delta in zip(DIAGNOSES, counts, (0.0, delta_mci, delta_ad)):
        spheres = [Sphere(tuple(center), radius, delta)] if delta else []
        groups.append(GroupSpec(label, int(n), spheres))
    conv = [Sphere(tuple(center), radius, converter_delta)] if converter_delta else []
    return PhantomSpec(
        dims=tuple(np.broadcast_to(dims, (3,))),
        voxel_size=tuple(np.broadcast_to(voxel_size, (3,))),
        smoothing_fwhm=tuple(np.broadcast_to(fwhm, (3,))),
        groups=groups,
        noise_sd=noise_sd,
        seed=seed,
        conversion_rate=conversion_rate,
        converter_spheres=conv,
    )


def subject_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(1, index))))


def _exact_flags(rng, n, rate):
    flags = np.zeros(n, dtype=bool)
    flags[: int(round(rate * n))] = True
    rng.shuffle(flags)
    return flags


def cohort_table(spec: PhantomSpec) -> pd.DataFrame:
    """Synthetic covariates for every phantom subject, in stack order."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed, spawn_key=(0,))))
    apoe = dict(APOE4_RATE)
    apoe.update(spec.apoe4_rate or {})
    rows = []
    for g in spec.groups:
        n = g.n
        age = rng.normal(AGE_MEAN, AGE_SD, n).clip(40.0, 100.0)
        tiv = rng.normal(TIV_MEAN, TIV_SD, n).clip(900.0, None)
        edu = rng.normal(EDUCATION_MEAN, EDUCATION_SD, n).clip(6.0, 22.0)
        mmse = rng.normal(MMSE_MEAN[g.label], MMSE_SD, n).clip(0.0, 30.0)
        sex = np.where(rng.random(n) < 0.5, "F", "M")
        carrier = _exact_flags(rng, n, apoe[g.label])
        converted = _exact_flags(rng, n, spec.conversion_rate) if g.label == "MCI" else [None] * n
        for i in range(n):
            rows.append(
                {
                    "subject_id": f"{g.label}_{i:03d}",
                    "diagnosis": g.label,
                    "age": round(float(age[i]), 2),
                    "tiv": round(float(tiv[i]), 1),
                    "sex": sex[i],
                    "education": round(float(edu[i]), 1),
                    "mmse": round(float(mmse[i]), 1),
                    "apoe4_carrier": bool(carrier[i]),
                    "converted_24mo": None if converted[i] is None else bool(converted[i]),
                }
            )
    df = pd.DataFrame(rows)
    df["converted_24mo"] = df["converted_24mo"].astype("object")
    return df


def subject_field(spec: PhantomSpec, index: int, effect: Optional[np.ndarray] = None) -> np.ndarray:
    rng = subject_rng(spec.seed, index)
    img = smooth_noise_field(rng, spec.dims, spec.sigmas(), sd=spec.noise_sd)
    img += spec.baseline
    if effect is not None:
        img -= effect
    return img


def effect_maps(spec: PhantomSpec):
    """Per-group and converter offset grids (``None`` when a group has no spheres)."""
    aff = spec.affine()

    def total(spheres):
        if not spheres:
            return None
        out = np.zeros(spec.dims)
        for s in spheres:
            out += s.delta * s.weights(spec.dims, aff)
        return out

    return {g.label: total(g.spheres) for g in spec.groups}, total(spec.converter_spheres)


def generate_cohort(
    spec: PhantomSpec, n_jobs: int = 1, mask_rule: str = "threshold", threshold: float = 0.1
) -> Tuple[VolumeStack, pd.DataFrame]:
    """Simulate the subject images and covariate table for ``spec``.

    Output is bit-identical for a given seed whatever ``n_jobs`` is.
    """
    table = cohort_table(spec)
    group_maps, conv_map = effect_maps(spec)
    effects = []
    for row in table.itertuples():
        eff = group_maps[row.diagnosis]
        if conv_map is not None and row.converted_24mo is True:
            eff = conv_map if eff is None else eff + conv_map
        effects.append(eff)

    def one(i):
        return Volume3D(subject_field(spec, i, effects[i]), spec.affine())

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            volumes = list(pool.map(one, range(len(table))))
    else:
        volumes = [one(i) for i in range(len(table))]
    stack = stack_volumes(volumes, list(table["subject_id"]), mask_rule=mask_rule, threshold=threshold)
    return stack, table


def _as_arrays(fields) -> List[np.ndarray]:
    if isinstance(fields, VolumeStack):
        return [v.data for v in fields.volumes]
    return [f.data if isinstance(f, Volume3D) else np.asarray(f, dtype=float) for f in fields]


def fwhm_from_difference_variance(v, voxel_size=1.0):
    """Invert ``var(first difference) = 2 (1 - exp(-2 ln2 / fwhm^2))`` (fwhm in voxels).

    Exact for fields with Gaussian autocorrelation sampled on the lattice; a
    difference variance of 2 or more (white noise) maps to 0.
    """
    v = np.asarray(v, dtype=float)
    rho = np.clip(1.0 - v / 2.0, 1e-300, 1.0 - 1e-15)
    fwhm = np.sqrt(4.0 * np.log(2.0) / (-2.0 * np.log(rho)))
    fwhm = np.where(v >= 2.0, 0.0, fwhm)
    return fwhm * np.asarray(voxel_size, dtype=float)


def estimate_fwhm_empirical(fields, voxel_size=1.0) -> np.ndarray:
    """Smoothness (FWHM in mm per axis) of an ensemble of independent null fields.

    Fields are centred voxelwise across the ensemble (removing baseline and any
    fixed effect), the first-difference variance along each axis is divided by
    the field variance, and the lattice relation for Gaussian autocorrelation
    is inverted.
    """
    arrays = _as_arrays(fields)
    if len(arrays) < 20:
        raise InsufficientDataError(f"need at least 20 independent null fields, got {len(arrays)}")
    if isinstance(fields, VolumeStack):
        voxel_size = fields.voxel_size
    stack = np.stack(arrays)
    stack = stack - stack.mean(axis=0)
    var = np.mean(stack**2)
    if var <= 0:
        raise InsufficientDataError("null fields have zero variance")
    diff_var = np.array([np.mean(np.diff(stack, axis=ax + 1) ** 2) for ax in range(3)]) / var
    return fwhm_from_difference_variance(diff_var, voxel_size)


def roi_mean_noise_sd(spec: PhantomSpec, roi: np.ndarray) -> float:
    """Exact standard deviation of a subject's ROI-mean noise for ``spec``'s smoothing.

    The ROI mean of the smoothed field is a fixed linear combination of the
    underlying white noise; its variance is the squared norm of the ROI
    indicator convolved with the (unit-variance-normalised) kernel.
    """
    roi = np.asarray(roi, dtype=float)
    kernels = [gaussian_kernel(s) for s in spec.sigmas()]
    g = roi
    for axis, k in enumerate(kernels):
        g = np.apply_along_axis(lambda x: np.convolve(x, k, mode="full"), axis, g)
    energy = float(np.prod([np.sum(k * k) for k in kernels]))
    return float(spec.noise_sd * np.sqrt(np.sum(g**2) / energy) / roi.sum())


def calibrate_delta(spec: PhantomSpec, sphere: Sphere, target_d: float) -> float:
    """Sphere offset giving an expected ROI-mean Cohen's d of ``target_d``.

    The ROI is the set of voxels with feather weight above one half; group
    variances are equal, so d is the mean ROI offset over the ROI-mean noise sd.
    """
    w = sphere.weights(spec.dims, spec.affine())
    roi = w > 0.5
    return float(target_d * roi_mean_noise_sd(spec, roi) / w[roi].mean())


def write_cohort(stack: VolumeStack, table: pd.DataFrame, out_dir) -> List[Path]:
    """Write each subject as ``<id>.nii.gz`` plus ``cohort.csv``; returns the image paths."""
    from .design import write_cohort_csv
    from .volume import write_volume

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for sid, v in zip(stack.subject_ids, stack.volumes):
        p = out_dir / f"{sid}.nii.gz"
        write_volume(v, p)
        paths.append(p)
    write_cohort_csv(table, out_dir / "cohort.csv")
    return paths
