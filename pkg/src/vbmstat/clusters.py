"""Suprathreshold cluster formation on 3D statistic maps."""

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numba
import numpy as np

from ._io import atomic_write_text
from .errors import ConfigError, ConformabilityError
from .glm import StatMap
from .volume import Volume3D, flat, ijk_from_linear, unflat

CONNECTIVITIES = (6, 18, 26)
DEFAULT_CONNECTIVITY = 18
CLUSTER_CSV_HEADER = ["id", "extent", "peak_t", "peak_x_mm", "peak_y_mm", "peak_z_mm", "fwe_p", "label"]


def neighbour_offsets(connectivity: int) -> np.ndarray:
    """Offsets that precede a voxel in x-fastest order, for the given connectivity."""
    if connectivity not in CONNECTIVITIES:
        raise ConfigError(f"connectivity must be one of {CONNECTIVITIES}, got {connectivity}")
    offs = []
    for dk in (-1, 0, 1):
        for dj in (-1, 0, 1):
            for di in (-1, 0, 1):
                nz = abs(di) + abs(dj) + abs(dk)
                if nz == 0 or (connectivity == 6 and nz > 1) or (connectivity == 18 and nz > 2):
                    continue
                if (dk, dj, di) < (0, 0, 0):
                    offs.append((di, dj, dk))
    return np.array(offs, dtype=np.int64)


@numba.njit(cache=True)
def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


@numba.njit(cache=True)
def label_into(grid, nx, ny, nz, offs, parent, labels):
    """Union-find labelling of a flat x-fastest boolean grid.

    Writes labels 1..K into ``labels`` numbered by first occurrence in linear
    order (0 = background) and returns K. ``parent`` is scratch space of the
    same length.
    """
    n = nx * ny * nz
    for idx in range(n):
        labels[idx] = 0
        if not grid[idx]:
            parent[idx] = -1
            continue
        parent[idx] = idx
        k = idx // (nx * ny)
        j = (idx // nx) % ny
        i = idx % nx
        for o in range(offs.shape[0]):
            ii = i + offs[o, 0]
            jj = j + offs[o, 1]
            kk = k + offs[o, 2]
            if ii < 0 or jj < 0 or kk < 0 or ii >= nx or jj >= ny or kk >= nz:
                continue
            nb = ii + nx * (jj + ny * kk)
            if not grid[nb]:
                continue
            ra = _find(parent, idx)
            rb = _find(parent, nb)
            if ra != rb:
                if ra < rb:
                    parent[rb] = ra
                else:
                    parent[ra] = rb
    count = 0
    for idx in range(n):
        if grid[idx]:
            r = _find(parent, idx)
            if r == idx:
                count += 1
                labels[idx] = count
            else:
                labels[idx] = labels[r]
    return count


def label_components(grid: np.ndarray, connectivity: int = DEFAULT_CONNECTIVITY):
    """Label a boolean 3D grid; returns ``(labels grid, count)``."""
    grid = np.asarray(grid, dtype=bool)
    if grid.ndim != 3:
        raise ConfigError(f"expected a 3D grid, got shape {grid.shape}")
    g = np.ascontiguousarray(flat(grid))
    parent = np.empty(g.size, dtype=np.int64)
    labels = np.empty(g.size, dtype=np.int64)
    nx, ny, nz = grid.shape
    count = label_into(g, nx, ny, nz, neighbour_offsets(connectivity), parent, labels)
    return unflat(labels, grid.shape), int(count)


@dataclass(eq=False)
class Cluster:
    id: int
    voxels: np.ndarray  # linear indices, ascending
    peak_t: float
    peak_index: int
    dims: tuple
    affine: np.ndarray
    fwe_p: Optional[float] = None
    label: Optional[str] = None
    extra: Dict[str, float] = field(default_factory=dict)

    @property
    def extent(self) -> int:
        return int(self.voxels.size)

    @property
    def peak_ijk(self) -> np.ndarray:
        return ijk_from_linear(self.peak_index, self.dims)

    @property
    def peak_world(self) -> np.ndarray:
        return self.peak_ijk @ self.affine[:3, :3].T + self.affine[:3, 3]

    def mask(self) -> np.ndarray:
        out = np.zeros(int(np.prod(self.dims)), dtype=bool)
        out[self.voxels] = True
        return unflat(out, self.dims)

    def mask_volume(self) -> Volume3D:
        return Volume3D(self.mask().astype(float), self.affine)


def threshold(stat: StatMap, u: float) -> np.ndarray:
    """Boolean grid of mask voxels with ``t > u`` (zero-variance voxels never pass)."""
    if np.isnan(u):
        raise ConfigError("threshold must not be NaN")
    t = stat.grid(fill=-np.inf)
    return (t > u) & stat.valid_mask()


def connected_components(
    grid: np.ndarray,
    connectivity: int = DEFAULT_CONNECTIVITY,
    stat: Optional[StatMap] = None,
    affine: Optional[np.ndarray] = None,
    min_extent: int = 1,
) -> List[Cluster]:
    """Split a boolean grid into clusters.

    Peaks come from ``stat`` when given (highest t, lowest linear index on
    ties), otherwise the first voxel. Clusters are ordered by descending
    extent, then ascending peak index, and numbered from 1 in that order.
    """
    grid = np.asarray(grid, dtype=bool)
    if stat is not None and stat.dims != grid.shape:
        raise ConformabilityError(f"grid shape {grid.shape} does not match statistic map {stat.dims}")
    if affine is None:
        affine = stat.affine if stat is not None else np.eye(4)
    labels, count = label_components(grid, connectivity)
    lab = flat(labels)
    idx = np.flatnonzero(lab)
    if count == 0:
        return []
    order = np.argsort(lab[idx], kind="stable")
    idx = idx[order]
    bounds = np.flatnonzero(np.diff(lab[idx])) + 1
    members = np.split(idx, bounds)
    tvals = flat(stat.grid(fill=-np.inf)) if stat is not None else None
    out = []
    for m in members:
        if m.size < min_extent:
            continue
        if tvals is None:
            peak, pt = int(m[0]), float("nan")
        else:
            tv = tvals[m]
            best = int(np.argmax(tv))  # first maximum = lowest linear index since m is ascending
            peak, pt = int(m[best]), float(tv[best])
        out.append(Cluster(0, m, pt, peak, grid.shape, np.asarray(affine, dtype=float)))
    out.sort(key=lambda c: (-c.extent, c.peak_index))
    for i, c in enumerate(out, start=1):
        c.id = i
    return out


def find_clusters(stat: StatMap, u: float, connectivity: int = DEFAULT_CONNECTIVITY) -> List[Cluster]:
    return connected_components(threshold(stat, u), connectivity, stat=stat)


def label_peak(cluster: Cluster, atlas: Volume3D, names: Dict[int, str]) -> Optional[str]:
    """Atlas region name at the cluster peak, ``None`` for background (id 0)."""
    if atlas.dims != tuple(cluster.dims) or not np.allclose(atlas.affine, cluster.affine, atol=1e-4):
        raise ConformabilityError(f"atlas grid {atlas.dims} is not conformable with the statistic map {cluster.dims}")
    region = int(round(flat(atlas.data)[cluster.peak_index]))
    if region == 0:
        return None
    return names.get(region, f"region_{region}")


def read_atlas_names(path) -> Dict[int, str]:
    """Two-column ``id,name`` CSV (header optional)."""
    import csv

    out = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip().lstrip("-").isdigit():
                continue
            out[int(row[0])] = row[1].strip()
    return out


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)


def cluster_rows(clusters: List[Cluster]) -> List[list]:
    rows = []
    for c in clusters:
        x, y, z = c.peak_world
        rows.append([c.id, c.extent, c.peak_t, float(x), float(y), float(z), c.fwe_p, c.label])
    return rows


def write_cluster_table(clusters: List[Cluster], path) -> None:
    lines = [",".join(CLUSTER_CSV_HEADER)]
    for row in cluster_rows(clusters):
        lines.append(",".join(_fmt(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")
