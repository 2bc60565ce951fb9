"""In-memory volumes, subject stacks and their NIfTI persistence.

Voxel vectors everywhere in the package use the NIfTI linear order
``i + nx * (j + ny * k)``, i.e. numpy Fortran order on ``(nx, ny, nz)`` arrays.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nifti
from .errors import ConformabilityError, ConfigError, EmptyMaskError, InsufficientDataError, VbmError

AFFINE_TOL = 1e-4


def flat(arr: np.ndarray) -> np.ndarray:
    """Flatten a grid in NIfTI (x-fastest) order."""
    return np.asarray(arr).ravel(order="F")


def unflat(vec: np.ndarray, dims) -> np.ndarray:
    return np.asarray(vec).reshape(tuple(dims), order="F")


def linear_index(ijk, dims) -> np.ndarray:
    ijk = np.asarray(ijk)
    nx, ny, _ = dims
    return ijk[..., 0] + nx * (ijk[..., 1] + ny * ijk[..., 2])


def ijk_from_linear(idx, dims) -> np.ndarray:
    idx = np.asarray(idx)
    nx, ny, _ = dims
    return np.stack([idx % nx, (idx // nx) % ny, idx // (nx * ny)], axis=-1)


def mask_sibling(path) -> Path:
    path = Path(path)
    name = path.name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            return path.with_name(name[: -len(ext)] + "_mask" + ext)
    raise ConfigError(f"{path}: expected a .nii or .nii.gz file name")


@dataclass(frozen=True, eq=False)
class Volume3D:
    """A 3D scalar grid with a voxel-to-world affine and an optional mask."""

    data: np.ndarray
    affine: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D grid, got shape {data.shape}")
        affine = np.array(self.affine, dtype=np.float64)
        if affine.shape != (4, 4) or not np.allclose(affine[3], [0, 0, 0, 1]):
            raise ValueError("affine must be 4x4 with last row (0, 0, 0, 1)")
        data.flags.writeable = False
        affine.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", affine)
        if self.mask is not None:
            mask = np.array(self.mask, dtype=bool)
            if mask.shape != data.shape:
                raise ValueError(f"mask shape {mask.shape} differs from data shape {data.shape}")
            mask.flags.writeable = False
            object.__setattr__(self, "mask", mask)

    @property
    def dims(self):
        return tuple(int(s) for s in self.data.shape)

    @property
    def voxel_size(self) -> np.ndarray:
        return np.sqrt((self.affine[:3, :3] ** 2).sum(axis=0))

    def vector(self) -> np.ndarray:
        return flat(self.data)

    def world(self, ijk) -> np.ndarray:
        """Voxel indices (..., 3) to world millimetres."""
        ijk = np.asarray(ijk, dtype=float)
        return ijk @ self.affine[:3, :3].T + self.affine[:3, 3]

    def voxel(self, xyz) -> np.ndarray:
        """World millimetres (..., 3) to fractional voxel indices."""
        inv = np.linalg.inv(self.affine)
        xyz = np.asarray(xyz, dtype=float)
        return xyz @ inv[:3, :3].T + inv[:3, 3]

    def with_data(self, data, mask=None) -> "Volume3D":
        return Volume3D(data, self.affine, self.mask if mask is None else mask)

    def conformable(self, other: "Volume3D", tol: float = AFFINE_TOL) -> bool:
        return self.dims == other.dims and bool(np.all(np.abs(self.affine - other.affine) <= tol))


def read_volume(path, load_mask: bool = True) -> Volume3D:
    """Read a NIfTI-1 volume, picking up a ``<stem>_mask`` sibling when present."""
    path = Path(path)
    if not path.exists():
        raise InsufficientDataError(f"{path}: no such file")
    data, affine = nifti.load(path)
    mask = None
    if load_mask:
        try:
            sib = mask_sibling(path)
        except ConfigError:
            sib = None
        if sib is not None and sib.exists():
            mask = nifti.load(sib)[0] != 0
    return Volume3D(data, affine, mask)


def write_volume(v: Volume3D, path, dtype="f8") -> None:
    path = Path(path)
    try:
        nifti.save(path, v.data, v.affine, dtype=dtype)
        if v.mask is not None:
            nifti.save(mask_sibling(path), v.mask.astype(np.uint8), v.affine, dtype="u1")
    except OSError as exc:
        raise VbmError(f"could not write {path}: {exc}") from exc


@dataclass(frozen=True, eq=False)
class VolumeStack:
    """Subjects' volumes on a common grid plus the voxels entering statistics."""

    subject_ids: tuple
    volumes: tuple
    analysis_mask: np.ndarray
    _matrix: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.subject_ids)

    @property
    def dims(self):
        return self.volumes[0].dims

    @property
    def affine(self) -> np.ndarray:
        return self.volumes[0].affine

    @property
    def voxel_size(self) -> np.ndarray:
        return self.volumes[0].voxel_size

    @property
    def mask_index(self) -> np.ndarray:
        """Linear indices of the analysis mask, ascending."""
        return np.flatnonzero(flat(self.analysis_mask))

    def matrix(self) -> np.ndarray:
        """Subjects x masked-voxels data matrix (cached, read-only)."""
        if self._matrix is None:
            idx = self.mask_index
            m = np.empty((self.n, idx.size))
            for row, v in enumerate(self.volumes):
                m[row] = v.vector()[idx]
            m.flags.writeable = False
            object.__setattr__(self, "_matrix", m)
        return self._matrix

    def reorder(self, ids: Sequence) -> "VolumeStack":
        pos = {s: i for i, s in enumerate(self.subject_ids)}
        order = [pos[s] for s in ids]
        return VolumeStack(tuple(ids), tuple(self.volumes[i] for i in order), self.analysis_mask)


def _analysis_mask(volumes, mask_rule, mask_path, threshold):
    dims = volumes[0].dims
    if mask_rule == "intersection":
        mask = np.ones(dims, dtype=bool)
        for v in volumes:
            mask &= v.data > 0
    elif mask_rule == "threshold":
        if threshold is None:
            raise ConfigError("threshold mask rule needs a threshold value")
        mean = np.zeros(dims)
        for v in volumes:
            mean += v.data
        mask = mean / len(volumes) > threshold
    elif mask_rule == "explicit":
        if mask_path is None:
            raise ConfigError("explicit mask rule needs a mask path")
        mvol = read_volume(mask_path, load_mask=False) if not isinstance(mask_path, Volume3D) else mask_path
        if not mvol.conformable(volumes[0]):
            raise ConformabilityError(f"explicit mask {mask_path} is not conformable with the stack")
        mask = mvol.data != 0
    else:
        raise ConfigError(f"unknown mask rule {mask_rule!r}")
    if not mask.any():
        raise EmptyMaskError(f"analysis mask ({mask_rule}) contains no voxels")
    return mask


def stack_volumes(
    volumes: Sequence[Volume3D],
    ids: Sequence,
    mask_rule: str = "intersection",
    mask_path=None,
    threshold: Optional[float] = None,
) -> VolumeStack:
    """Assemble already-loaded volumes into a stack (see :func:`build_stack`)."""
    if len(volumes) != len(ids):
        raise ConfigError(f"{len(volumes)} volumes but {len(ids)} subject ids")
    if len(volumes) < 3:
        raise InsufficientDataError(f"a stack needs at least 3 subjects, got {len(volumes)}")
    if len(set(ids)) != len(ids):
        raise ConfigError("subject ids must be unique")
    ref = volumes[0]
    for sid, v in zip(ids, volumes):
        if not v.conformable(ref):
            raise ConformabilityError(
                f"subject {sid!r} has dims {v.dims} / affine not matching subject {ids[0]!r} {ref.dims}"
            )
    mask = _analysis_mask(volumes, mask_rule, mask_path, threshold)
    mask.flags.writeable = False
    return VolumeStack(tuple(ids), tuple(volumes), mask)


def build_stack(paths, ids, mask_rule="intersection", mask_path=None, threshold=None) -> VolumeStack:
    """Load subject volumes and derive the analysis mask.

    Parameters
    ----------
    paths : sequence of path-like
        One NIfTI file per subject, in design-matrix row order.
    ids : sequence of str
        Subject identifiers, same order as ``paths``.
    mask_rule : {"intersection", "explicit", "threshold"}
        ``intersection`` keeps voxels strictly positive in every subject,
        ``threshold`` keeps voxels whose mean exceeds ``threshold`` and
        ``explicit`` reads the non-zero voxels of ``mask_path``.
    """
    if len(paths) != len(ids):
        raise ConfigError(f"{len(paths)} paths but {len(ids)} subject ids")
    volumes = [read_volume(p, load_mask=False) for p in paths]
    return stack_volumes(volumes, ids, mask_rule=mask_rule, mask_path=mask_path, threshold=threshold)
