"""Independent reference implementations used only by tests."""

from collections import deque
from itertools import product

import numba
import numpy as np


def neighbour_set(connectivity):
    out = []
    for d in product((-1, 0, 1), repeat=3):
        n = sum(map(abs, d))
        if n == 0:
            continue
        if n <= {6: 1, 18: 2, 26: 3}[connectivity]:
            out.append(d)
    return out


def flood_fill_components(grid, connectivity):
    """Breadth-first flood fill; returns a list of sorted tuples of voxel coordinates.

    Works on a zero-padded copy so neighbour lookups need no bounds checks.
    """
    grid = np.asarray(grid, dtype=bool)
    pad = np.pad(grid, 1)
    shape = pad.shape
    strides = (shape[1] * shape[2], shape[2], 1)
    offs = [sum(d * s for d, s in zip(o, strides)) for o in neighbour_set(connectivity)]
    occ = pad.ravel().tolist()
    seen = [False] * len(occ)
    comps = []
    for start in np.flatnonzero(pad.ravel()).tolist():
        if seen[start]:
            continue
        seen[start] = True
        q = deque([start])
        comp = []
        while q:
            v = q.popleft()
            comp.append(v)
            for o in offs:
                w = v + o
                if occ[w] and not seen[w]:
                    seen[w] = True
                    q.append(w)
        coords = np.unravel_index(np.array(comp), shape)
        comps.append(tuple(sorted(zip(*(c.astype(int) - 1 for c in coords)))))
    return comps


def partition_of_labels(labels):
    """Labelled grid -> set of frozensets of coordinates (label values ignored)."""
    out = {}
    for idx in zip(*np.nonzero(labels)):
        out.setdefault(int(labels[idx]), set()).add(tuple(int(i) for i in idx))
    return {frozenset(s) for s in out.values()}


def exact_sample(n, mean, sd):
    """``n`` values whose sample mean and sample SD (ddof=1) equal ``mean`` and ``sd`` exactly."""
    z = np.linspace(-1.0, 1.0, n)
    z = z - z.mean()
    z = z / z.std(ddof=1)
    return mean + sd * z


# Published APOE4-stratified cells: (diagnosis, carrier, n, mean, sd)
STRATIFIED_CELLS = [
    ("CN", False, 61, 0.394, 0.046),
    ("CN", True, 29, 0.397, 0.034),
    ("MCI", False, 86, 0.389, 0.047),
    ("MCI", True, 43, 0.388, 0.044),
    ("AD", False, 16, 0.311, 0.053),
    ("AD", True, 14, 0.310, 0.024),
]


def stratified_cohort():
    """Cohort whose cells reproduce the published stratified summary statistics."""
    import pandas as pd

    rows = []
    for dx, car, n, m, s in STRATIFIED_CELLS:
        for i, v in enumerate(exact_sample(n, m, s)):
            rows.append((f"{dx}{int(car)}_{i:03d}", dx, car, v))
    return pd.DataFrame(rows, columns=["subject_id", "diagnosis", "apoe4_carrier", "eigenvariate"])


# --- exhaustive 3x3x3 connectivity check ------------------------------------------------


def _plane_bits(axis, value):
    """27-bit mask of the voxels whose coordinate on ``axis`` equals ``value``."""
    out = 0
    for v in range(27):
        if (v % 3, (v // 3) % 3, v // 9)[axis] == value:
            out |= 1 << v
    return out


_FULL = (1 << 27) - 1
_LOW = np.array([_plane_bits(a, 0) for a in range(3)], dtype=np.int64)
_HIGH = np.array([_plane_bits(a, 2) for a in range(3)], dtype=np.int64)
_STEP = np.array([1, 3, 9], dtype=np.int64)


@numba.njit(cache=True)
def _dilate_axis(c, axis):
    up = (c & ~_HIGH[axis]) << _STEP[axis]
    down = (c & ~_LOW[axis]) >> _STEP[axis]
    return (c | up | down) & _FULL


@numba.njit(cache=True)
def _dilate(c, conn):
    """One-step dilation of a 27-bit set by shifts; 26 is the full 3x3x3 box."""
    if conn == 6:
        return _dilate_axis(c, 0) | _dilate_axis(c, 1) | _dilate_axis(c, 2)
    if conn == 26:
        return _dilate_axis(_dilate_axis(_dilate_axis(c, 0), 1), 2)
    return _dilate_axis(_dilate_axis(c, 0), 1) | _dilate_axis(_dilate_axis(c, 1), 2) | _dilate_axis(_dilate_axis(c, 0), 2)


@numba.njit(cache=True)
def _flood_labels(mask, conn, out):
    """Bit-parallel flood fill by repeated dilation; components numbered by their lowest voxel."""
    remaining = mask
    k = 0
    while remaining:
        k += 1
        comp = remaining & -remaining
        while True:
            grown = _dilate(comp, conn) & mask
            if grown == comp:
                break
            comp = grown
        remaining &= ~comp
        for v in range(27):
            if (comp >> v) & 1:
                out[v] = k
    return k


@numba.njit(cache=True)
def exhaustive_cube_check(label_into, offs, conn, start, stop):
    """Compare the union-find labeller with the flood fill on masks ``start..stop-1``.

    Returns the number of mismatching masks and the first one found (-1 if none).
    """
    grid = np.zeros(27, dtype=np.bool_)
    parent = np.empty(27, dtype=np.int64)
    labels = np.empty(27, dtype=np.int64)
    ref = np.zeros(27, dtype=np.int64)
    bad = 0
    first = -1
    for m in range(start, stop):
        for v in range(27):
            grid[v] = (m >> v) & 1
            ref[v] = 0
        k = label_into(grid, 3, 3, 3, offs, parent, labels)
        kr = _flood_labels(np.int64(m), conn, ref)
        ok = k == kr
        for v in range(27):
            if labels[v] != ref[v]:
                ok = False
        if not ok:
            bad += 1
            if first < 0:
                first = m
    return bad, first


def grid_search_mle(x, y, lo=-20.0, hi=20.0):
    """Coarse-to-fine brute-force maximisation of the unpenalized 1-feature log-likelihood."""
    c0 = c1 = 0.0
    width = hi - lo
    for _ in range(12):
        b0 = np.linspace(c0 - width / 2, c0 + width / 2, 81)
        b1 = np.linspace(c1 - width / 2, c1 + width / 2, 81)
        B0, B1 = np.meshgrid(b0, b1, indexing="ij")
        eta = B0[..., None] + B1[..., None] * x
        ll = np.sum(y * eta - np.logaddexp(0, eta), axis=-1)
        i, j = np.unravel_index(np.argmax(ll), ll.shape)
        c0, c1 = b0[i], b1[j]
        width /= 8
    return c0, c1
