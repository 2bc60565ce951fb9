"""Monte Carlo checks of the inference machinery on synthetic cohorts."""

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from . import clusters as cl
from .design import build_design, make_contrast
from .glm import StreamingFit, p_to_t
from .phantom import PhantomSpec, cohort_table, effect_maps, three_group_spec, subject_field
from .rft import annotate_clusters, smoothness_from_products

logger = logging.getLogger(__name__)


def simulation_seed(base_seed: int, index: int) -> int:
    ss = np.random.SeedSequence(base_seed, spawn_key=(3, index))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass
class NullSimulation:
    seed: int
    n_clusters: int
    min_fwe_p: float
    max_extent: int
    fwhm_mm: list
    expected_clusters: float


def run_null_simulation(spec: PhantomSpec, contrast="CN>AD", voxel_p=0.001, connectivity=18) -> NullSimulation:
    """Simulate one cohort, stream it through the GLM and run the GRF cluster test."""
    table = cohort_table(spec)
    X = build_design(table, table["subject_id"])
    c = make_contrast(contrast).vector
    group_maps, conv_map = effect_maps(spec)
    acc = StreamingFit(X, spec.dims)
    for i, row in enumerate(table.itertuples()):
        eff = group_maps[row.diagnosis]
        if conv_map is not None and row.converted_24mo is True:
            eff = conv_map if eff is None else eff + conv_map
        acc.add(subject_field(spec, i, eff))
    beta, rss, res_cross, df, xtx_pinv = acc.finish()
    mask = np.ones(spec.dims, dtype=bool)
    S = smoothness_from_products(rss, res_cross, mask, df, spec.voxel_size)
    sigma2 = rss / df
    t = np.zeros(spec.dims)
    ok = sigma2 > 0
    t[ok] = np.tensordot(c, beta, axes=1)[ok] / np.sqrt(sigma2[ok] * float(c @ xtx_pinv @ c))
    u = float(p_to_t(voxel_p, df))
    found = cl.connected_components((t > u) & ok, connectivity, affine=spec.affine())
    test = annotate_clusters(found, u, S, df)
    return NullSimulation(
        seed=spec.seed,
        n_clusters=len(found),
        min_fwe_p=min((x.fwe_p for x in found), default=1.0),
        max_extent=max((x.extent for x in found), default=0),
        fwhm_mm=[float(v) for v in S.fwhm_mm],
        expected_clusters=test.expected_clusters,
    )


@dataclass
class FweCalibration:
    n_sim: int
    alpha: float
    false_positives: int
    simulations: List[NullSimulation] = field(default_factory=list)

    @property
    def rate(self) -> float:
        return self.false_positives / self.n_sim

    def interval(self, z: float = 1.96):
        """Wilson score interval of the family-wise error rate."""
        n, p = self.n_sim, self.rate
        centre = (p + z * z / (2 * n)) / (1 + z * z / n)
        half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / (1 + z * z / n)
        return centre - half, centre + half

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rate"] = self.rate
        d["mean_clusters"] = float(np.mean([s.n_clusters for s in self.simulations]))
        d["mean_expected_clusters"] = float(np.mean([s.expected_clusters for s in self.simulations]))
        d["mean_fwhm_mm"] = np.mean([s.fwhm_mm for s in self.simulations], axis=0).tolist()
        return d


def calibrate_fwe(
    n_sim: int,
    base_seed: int = 0,
    dims=(64, 64, 64),
    voxel_size=1.5,
    fwhm=8.0,
    counts=(90, 129, 30),
    alpha=0.05,
    voxel_p=0.001,
    connectivity=18,
    progress=None,
) -> FweCalibration:
    """Family-wise error of the GRF cluster test over ``n_sim`` null cohorts."""
    sims = []
    t0 = time.time()
    for i in range(n_sim):
        spec = three_group_spec(dims=dims, voxel_size=voxel_size, fwhm=fwhm, counts=counts, seed=simulation_seed(base_seed, i))
        sims.append(run_null_simulation(spec, voxel_p=voxel_p, connectivity=connectivity))
        if progress is not None:
            progress(i + 1, sims[-1], time.time() - t0)
    fp = sum(s.min_fwe_p < alpha for s in sims)
    return FweCalibration(n_sim, alpha, int(fp), sims)


def write_calibration(cal: FweCalibration, path) -> None:
    from ._io import atomic_write_text

    atomic_write_text(path, json.dumps(cal.to_dict(), indent=2, sort_keys=True) + "\n")
