"""End-to-end orchestration behind the command-line interface.

Each ``cmd_*`` function takes a :class:`PipelineConfig`, writes its artifacts
into ``config.output_dir`` and returns a small result dict; failures surface as
:class:`StageError`. :func:`run_guarded` turns those into exit codes and one
JSON line on stderr naming the stage that failed.
"""

import csv
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from . import clusters as cl
from . import groupstats as gs
from . import plots
from . import predict as pr
from ._io import atomic_write_text
from .design import build_design, make_contrast, read_cohort_csv, validate_cohort, write_cohort_csv
from .eigenvariate import extract_eigenvariate
from .errors import ConfigError, DataError, VbmError
from .glm import fit, p_to_t, t_map
from .phantom import PhantomSpec, generate_cohort, three_group_spec, write_cohort
from .rft import annotate_clusters, inference_report, smoothness_from_fit
from .volume import Volume3D, build_stack, read_volume, write_volume

logger = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    """Settings for every subcommand; unknown JSON keys are rejected.

    Exactly one of ``manifest`` (CSV with ``subject_id,path``) or ``phantom``
    (a phantom description) supplies the images for ``run``.
    """

    output_dir: str = "vbm_out"
    manifest: Optional[str] = None
    phantom: Optional[dict] = None
    cohort: Optional[str] = None
    contrasts: List[str] = field(default_factory=lambda: ["CN>AD", "MCI>AD"])
    voxel_p: float = 0.001
    alpha: float = 0.05
    connectivity: int = 18
    mask_rule: Optional[str] = None
    mask_path: Optional[str] = None
    mask_threshold: float = 0.1
    atlas: Optional[str] = None
    atlas_names: Optional[str] = None
    seed: int = 0
    n_jobs: int = 1
    write_maps: bool = True
    eigenvariate_contrast: Optional[str] = None
    roi: Optional[str] = None
    feature_sets: List[str] = field(default_factory=lambda: ["clinical", "eigenvariate", "combined"])
    folds: int = 5
    decision_threshold: float = pr.DEFAULT_THRESHOLD
    l2: float = pr.DEFAULT_L2
    variance_rule: str = "pooled"
    ss_type: int = 2
    n_sim: int = 200

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(d)

    def override(self, **kw) -> "PipelineConfig":
        d = asdict(self)
        d.update({k: v for k, v in kw.items() if v is not None})
        return PipelineConfig.from_dict(d)

    def validate(self) -> "PipelineConfig":
        for name in ("voxel_p", "alpha", "decision_threshold"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        if self.connectivity not in cl.CONNECTIVITIES:
            raise ConfigError(f"connectivity must be one of {cl.CONNECTIVITIES}, got {self.connectivity}")
        if self.n_jobs < 1:
            raise ConfigError("n_jobs must be >= 1")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.variance_rule not in ("pooled", "welch"):
            raise ConfigError("variance_rule must be 'pooled' or 'welch'")
        if self.ss_type not in (1, 2, 3):
            raise ConfigError("ss_type must be 1, 2 or 3")
        for fs in self.feature_sets:
            if fs not in pr.FEATURE_SETS:
                raise ConfigError(f"unknown feature set {fs!r}; choose from {sorted(pr.FEATURE_SETS)}")
        self.contrasts = [make_contrast(c).name for c in self.contrasts]
        out = Path(self.output_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
        if not out.is_dir():
            raise ConfigError(f"output path {out} is not a directory")
        return self

    def echo(self) -> dict:
        """Settings that influence results (no paths), for the run summary."""
        d = asdict(self)
        for k in ("output_dir", "manifest", "cohort", "mask_path", "atlas", "atlas_names", "roi", "n_jobs"):
            d.pop(k)
        return d


class StageError(Exception):
    def __init__(self, stage: str, error: Exception):
        super().__init__(f"{stage}: {error}")
        self.stage = stage
        self.error = error

    @property
    def exit_code(self) -> int:
        return getattr(self.error, "exit_code", 1)

    def to_json(self) -> str:
        return json.dumps({"stage": self.stage, "error": type(self.error).__name__, "message": str(self.error)})


class _Stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        logger.info("stage %s", self.name)
        return self

    def __exit__(self, typ, exc, tb):
        if exc is not None and isinstance(exc, (VbmError, OSError, ValueError, KeyError)) and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def run_guarded(func, config: PipelineConfig, stream=None, report=None) -> int:
    """Call ``func(config)``; map failures to exit codes and one JSON line on ``stream``.

    ``report``, when given, receives the command's result dict on success.
    """
    stream = stream if stream is not None else sys.stderr
    try:
        result = func(config)
    except StageError as exc:
        print(exc.to_json(), file=stream)
        return exc.exit_code
    if report is not None:
        report(result)
    return 0


# --- output schemas -------------------------------------------------------------------

GROUP_STATS_HEADER = [
    "contrast", "cluster_id", "group1", "group2", "n1", "n2", "mean1", "se1", "mean2", "se2",
    "t", "df", "p", "cohen_d",
]
EIGENVARIATE_HEADER = ["subject_id", "diagnosis", "contrast", "cluster_id", "eigenvariate"]
STRATIFY_HEADER = [
    "diagnosis", "n_noncarrier", "mean_noncarrier", "sd_noncarrier", "n_carrier", "mean_carrier",
    "sd_carrier", "mean_difference", "t", "df", "p", "cohen_d", "carrier_frequency",
]
ANOVA_HEADER = ["source", "ss", "df", "ms", "F", "p"]
RUN_SUMMARY_KEYS = {"config", "glm", "contrasts", "outputs"}
INFERENCE_KEYS = {"u", "voxel_p", "df", "fwhm_mm", "fwhm_vox", "resels", "expected_clusters", "expected_resels_per_cluster", "clusters"}
PREDICT_KEYS = {"feature_set", "features", "fold_auc", "auc_mean", "auc_sd", "pooled_auc", "metrics", "model"}

CSV_SCHEMAS = {
    "clusters_": cl.CLUSTER_CSV_HEADER,
    "group_stats.csv": GROUP_STATS_HEADER,
    "eigenvariates.csv": EIGENVARIATE_HEADER,
    "stratify.csv": STRATIFY_HEADER,
    "anova.csv": ANOVA_HEADER,
    "roc.csv": list(pr.ROC_HEADER),
}
JSON_SCHEMAS = {
    "summary.json": RUN_SUMMARY_KEYS,
    "inference_": INFERENCE_KEYS,
    "predict_": PREDICT_KEYS,
}


def _schema_for(name: str, table: dict):
    for key, val in table.items():
        if name == key or (key.endswith("_") and name.startswith(key)):
            return val
    return None


def validate_outputs(paths: Sequence[Path]) -> None:
    """Check every CSV header and JSON key set against its documented schema."""
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise DataError(f"expected output {p.name} was not written")
        if p.suffix == ".csv":
            want = _schema_for(p.name, CSV_SCHEMAS)
            if want is None:
                continue
            with open(p, newline="") as fh:
                header = next(csv.reader(fh), [])
            if header != list(want):
                raise DataError(f"{p.name}: header {header} does not match schema {list(want)}")
        elif p.suffix == ".json":
            want = _schema_for(p.name, JSON_SCHEMAS)
            if want is None:
                continue
            with open(p) as fh:
                keys = set(json.load(fh))
            if not want <= keys:
                raise DataError(f"{p.name}: missing keys {sorted(want - keys)}")
        elif p.suffix == ".svg":
            if "</svg>" not in p.read_text():
                raise DataError(f"{p.name}: truncated SVG")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "" if np.isnan(x) else f"{float(x):.10g}"
    return str(x)


def write_rows(path, header, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    atomic_write_text(path, buf.getvalue())
    return Path(path)


def write_json(path, obj) -> Path:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return Path(path)


def slug(contrast: str) -> str:
    return contrast.replace(">", "_gt_").lower()


# --- inputs -------------------------------------------------------------------------


def phantom_from_config(config: PipelineConfig) -> PhantomSpec:
    d = dict(config.phantom or {})
    if "groups" in d:
        d["seed"] = config.seed
        return PhantomSpec.from_dict(d)
    d.setdefault("seed", config.seed)
    d["seed"] = config.seed
    try:
        return three_group_spec(**d)
    except TypeError as exc:
        raise ConfigError(f"bad phantom settings: {exc}") from exc


def read_manifest(path) -> pd.DataFrame:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"manifest not found: {p}")
    df = pd.read_csv(p, dtype=str)
    for col in ("subject_id", "path"):
        if col not in df.columns:
            raise ConfigError(f"manifest {p.name} lacks a {col!r} column")
    base = p.parent
    df["path"] = [str(q if Path(q).is_absolute() else base / q) for q in df["path"]]
    return df


def load_inputs(config: PipelineConfig):
    """Returns ``(stack, cohort)`` with the stack in cohort-compatible order."""
    if (config.manifest is None) == (config.phantom is None):
        raise StageError("config", ConfigError("give exactly one of 'manifest' or 'phantom'"))
    if config.phantom is not None:
        with _Stage("phantom"):
            spec = phantom_from_config(config)
            stack, cohort = generate_cohort(
                spec, n_jobs=config.n_jobs, mask_rule=config.mask_rule or "threshold", threshold=config.mask_threshold
            )
        return stack, cohort
    with _Stage("cohort"):
        if config.cohort is None:
            raise ConfigError("a manifest run needs a cohort CSV")
        cohort = read_cohort_csv(config.cohort, ("subject_id", "diagnosis", "age", "tiv"))
    with _Stage("stack"):
        man = read_manifest(config.manifest)
        missing = sorted(set(man["subject_id"]) - set(cohort["subject_id"]))
        if missing:
            raise DataError(f"subject {missing[0]!r} has an image but no cohort row")
        stack = build_stack(
            list(man["path"]), list(man["subject_id"]), config.mask_rule or "intersection",
            config.mask_path, config.mask_threshold,
        )
    return stack, cohort


# --- run --------------------------------------------------------------------------------


def _group_rows(contrast: str, cluster_id: int, values: np.ndarray, diagnosis: np.ndarray, rule: str):
    g1, g2 = contrast.split(">")
    x1, x2 = values[diagnosis == g1], values[diagnosis == g2]
    r = gs.two_sample_t(x1, x2, rule, labels=(g1, g2))
    se1, se2 = r.ses
    return [contrast, cluster_id, g1, g2, r.n[0], r.n[1], r.means[0], se1, r.means[1], se2, r.t, r.df, r.p, r.cohen_d]


def cmd_run(config: PipelineConfig) -> dict:
    """Voxelwise GLM, cluster inference, eigenvariates and group statistics."""
    with _Stage("config"):
        config.validate()
    out = Path(config.output_dir)
    stack, cohort = load_inputs(config)
    with _Stage("design"):
        cohort = validate_cohort(cohort, ("subject_id", "diagnosis", "age", "tiv"))
        X = build_design(cohort, stack.subject_ids)
    with _Stage("fit"):
        glm = fit(stack, X, n_jobs=config.n_jobs)
    with _Stage("smoothness"):
        S = smoothness_from_fit(glm)
    atlas = names = None
    if config.atlas:
        with _Stage("atlas"):
            atlas = read_volume(config.atlas, load_mask=False)
            names = cl.read_atlas_names(config.atlas_names) if config.atlas_names else {}
    written: List[Path] = []
    diag = cohort.set_index("subject_id").loc[list(stack.subject_ids), "diagnosis"].to_numpy()
    ev_rows, gs_rows, summaries = [], [], {}
    cohort_ev = None
    ev_source = config.eigenvariate_contrast or config.contrasts[0]
    u = float(p_to_t(config.voxel_p, glm.df))
    for name in config.contrasts:
        s = slug(name)
        with _Stage("inference"):
            c = make_contrast(name)
            stat = t_map(glm, c)
            found = cl.find_clusters(stat, u, config.connectivity)
            test = annotate_clusters(found, u, S, glm.df)
            if atlas is not None:
                for k in found:
                    k.label = cl.label_peak(k, atlas, names)
            report = inference_report(test, S, found)
            written.append(write_json(out / f"inference_{s}.json", report))
            cl.write_cluster_table(found, out / f"clusters_{s}.csv")
            written.append(out / f"clusters_{s}.csv")
            if config.write_maps:
                write_volume(stat.volume(), out / f"tmap_{s}.nii.gz")
        significant = [k for k in found if k.fwe_p < config.alpha]
        for k in significant:
            with _Stage("eigenvariate"):
                ev = extract_eigenvariate(stack, k.mask(), X)
                if config.write_maps:
                    write_volume(ev.weight_volume(stack.dims, stack.affine), out / f"ev_weights_{s}_c{k.id}.nii.gz")
            for sid, d, v in zip(stack.subject_ids, diag, ev.values):
                ev_rows.append([sid, d, name, k.id, v])
            if name == ev_source and k.id == significant[0].id:
                cohort_ev = dict(zip(stack.subject_ids, ev.values))
            with _Stage("groupstats"):
                gs_rows.append(_group_rows(name, k.id, ev.values, diag, config.variance_rule))
        summaries[name] = {
            "u": u,
            "n_clusters": len(found),
            "n_significant": len(significant),
            "expected_clusters": test.expected_clusters,
            "min_fwe_p": min((k.fwe_p for k in found), default=None),
        }
    with _Stage("write"):
        written.append(write_rows(out / "eigenvariates.csv", EIGENVARIATE_HEADER, ev_rows))
        written.append(write_rows(out / "group_stats.csv", GROUP_STATS_HEADER, gs_rows))
        aug = cohort.copy()
        if cohort_ev is not None:
            aug["eigenvariate"] = aug["subject_id"].map(cohort_ev)
        write_cohort_csv(aug, out / "cohort_eigenvariate.csv")
        if config.write_maps:
            write_volume(Volume3D(stack.analysis_mask.astype(float), stack.affine), out / "mask.nii.gz", dtype="u1")
        summary = {
            "config": config.echo(),
            "glm": glm.summary(),
            "smoothness": {"fwhm_mm": [float(x) for x in S.fwhm_mm], "resels": [float(x) for x in S.resels]},
            "contrasts": summaries,
            "eigenvariate_source": ev_source if cohort_ev is not None else None,
            "outputs": sorted(p.name for p in written) + ["cohort_eigenvariate.csv", "summary.json"],
        }
        written.append(write_json(out / "summary.json", summary))
    with _Stage("schema"):
        validate_outputs(written)
    return summary


# --- predict ------------------------------------------------------------------------


def _cohort_for(config: PipelineConfig, required) -> pd.DataFrame:
    with _Stage("config"):
        config.validate()
    with _Stage("cohort"):
        if config.cohort is None:
            raise ConfigError("this command needs a cohort CSV")
        cohort = read_cohort_csv(config.cohort)
        missing = [c for c in required if c not in cohort.columns]
        if missing:
            raise ConfigError(f"cohort is missing column(s): {', '.join(missing)}")
    return cohort


def cmd_predict(config: PipelineConfig) -> dict:
    """Cross-validated conversion prediction for every requested feature set."""
    needed = sorted({c for fs in config.feature_sets for c in pr.FEATURE_SETS.get(fs, ())} | {"converted_24mo"})
    cohort = _cohort_for(config, needed)
    out = Path(config.output_dir)
    reports, written = [], []
    for fs in config.feature_sets:
        with _Stage("predict"):
            r = pr.cross_validate(
                cohort, fs, k=config.folds, seed=config.seed, threshold=config.decision_threshold,
                l2=config.l2, n_jobs=config.n_jobs,
            )
        reports.append(r)
        with _Stage("write"):
            written.append(write_json(out / f"predict_{fs}.json", r.to_dict()))
    with _Stage("write"):
        pr.write_roc_csv(reports, out / "roc.csv")
        written.append(out / "roc.csv")
        svg = plots.roc_svg([(r.feature_set, r.roc.fpr, r.roc.tpr, r.pooled_auc) for r in reports], "MCI-to-AD conversion")
        plots.write_svg(svg, out / "roc.svg")
        written.append(out / "roc.svg")
    with _Stage("schema"):
        validate_outputs(written)
    return {r.feature_set: r.to_dict() for r in reports}


# --- stratify -----------------------------------------------------------------------


def cmd_stratify(config: PipelineConfig) -> dict:
    """Carrier vs non-carrier comparisons per diagnosis plus a two-way ANOVA."""
    cohort = _cohort_for(config, ["diagnosis", "apoe4_carrier", "eigenvariate"])
    out = Path(config.output_dir)
    with _Stage("stratify"):
        cohort = cohort[cohort["apoe4_carrier"].map(lambda v: v is not None and v == v)]
        strata = gs.stratified_comparison(cohort, variance_rule=config.variance_rule)
    rows = []
    for s in strata:
        c = s.comparison
        rows.append([
            s.diagnosis, c.n[0], c.means[0], c.sds[0], c.n[1], c.means[1], c.sds[1],
            c.mean_difference, c.t, c.df, c.p, c.cohen_d, s.carrier_frequency,
        ])
    anova = None
    with _Stage("anova"):
        if len(strata) >= 2:
            anova = gs.two_way_anova(
                cohort["eigenvariate"].to_numpy(float), cohort["diagnosis"],
                cohort["apoe4_carrier"].map(lambda v: "APOE4+" if v else "APOE4-"), ss_type=config.ss_type,
            )
    with _Stage("write"):
        written = [write_rows(out / "stratify.csv", STRATIFY_HEADER, rows)]
        arows = [[r.source, r.ss, r.df, r.ms, r.F, r.p] for r in anova.rows] if anova else []
        written.append(write_rows(out / "anova.csv", ANOVA_HEADER, arows))
        groups = {}
        for level in [s.diagnosis for s in strata]:
            g = cohort[cohort["diagnosis"] == level]
            flags = g["apoe4_carrier"].map(bool).to_numpy()
            groups[level] = {
                "APOE4-": g.loc[~flags, "eigenvariate"].to_numpy(float),
                "APOE4+": g.loc[flags, "eigenvariate"].to_numpy(float),
            }
        plots.write_svg(plots.stratified_svg(groups, title="Eigenvariate by diagnosis and APOE4"), out / "stratify.svg")
        written.append(out / "stratify.svg")
    with _Stage("schema"):
        validate_outputs(written)
    return {"strata": [dict(zip(STRATIFY_HEADER, r)) for r in rows], "anova": anova.to_records() if anova else None}


# --- phantom / eigenvariate / validate-fwe ------------------------------------------


def cmd_phantom(config: PipelineConfig) -> dict:
    """Write a synthetic cohort: one NIfTI per subject, cohort.csv, manifest.csv, spec.json."""
    with _Stage("config"):
        config.validate()
        spec = phantom_from_config(config)
    out = Path(config.output_dir)
    with _Stage("phantom"):
        stack, table = generate_cohort(spec, n_jobs=config.n_jobs, mask_rule="threshold", threshold=config.mask_threshold)
        paths = write_cohort(stack, table, out)
        write_rows(out / "manifest.csv", ["subject_id", "path"], [[s, p.name] for s, p in zip(stack.subject_ids, paths)])
        spec.to_json(out / "spec.json")
    return {"n_subjects": stack.n, "dims": list(stack.dims)}


def cmd_eigenvariate(config: PipelineConfig) -> dict:
    """Eigenvariate of a given ROI mask; appends an ``eigenvariate`` column to the cohort."""
    with _Stage("config"):
        config.validate()
    stack, cohort = load_inputs(config)
    out = Path(config.output_dir)
    with _Stage("roi"):
        if config.roi is None:
            raise ConfigError("the eigenvariate command needs an ROI mask (--roi)")
        roi = read_volume(config.roi, load_mask=False)
        if not roi.conformable(stack.volumes[0]):
            raise DataError(f"ROI {config.roi} is not conformable with the image stack")
    with _Stage("eigenvariate"):
        X = build_design(cohort, stack.subject_ids)
        ev = extract_eigenvariate(stack, roi.data != 0, X)
    with _Stage("write"):
        aug = cohort.copy()
        aug["eigenvariate"] = aug["subject_id"].map(dict(zip(stack.subject_ids, ev.values)))
        write_cohort_csv(aug, out / "cohort_eigenvariate.csv")
        write_volume(ev.weight_volume(stack.dims, stack.affine), out / "ev_weights.nii.gz")
    return {"explained_variance": ev.explained_variance, "n_voxels": int(ev.roi_index.size)}


def cmd_validate_fwe(config: PipelineConfig, dims=(64, 64, 64), voxel_size=1.5, fwhm=8.0) -> dict:
    """Monte Carlo family-wise error of the cluster test on null phantoms."""
    from .validation import calibrate_fwe, write_calibration

    with _Stage("config"):
        config.validate()
        if config.n_sim < 1:
            raise ConfigError("n_sim must be >= 1")

    def progress(i, sim, elapsed):
        logger.info("simulation %d/%d min_fwe_p=%.4f (%.0fs)", i, config.n_sim, sim.min_fwe_p, elapsed)

    with _Stage("validate-fwe"):
        cal = calibrate_fwe(
            config.n_sim, base_seed=config.seed, dims=dims, voxel_size=voxel_size, fwhm=fwhm,
            alpha=config.alpha, voxel_p=config.voxel_p, connectivity=config.connectivity, progress=progress,
        )
        write_calibration(cal, Path(config.output_dir) / "fwe_calibration.json")
    lo, hi = cal.interval()
    return {"rate": cal.rate, "n_sim": cal.n_sim, "false_positives": cal.false_positives, "wilson_95": [lo, hi]}


COMMANDS = {
    "run": cmd_run,
    "predict": cmd_predict,
    "stratify": cmd_stratify,
    "phantom": cmd_phantom,
    "eigenvariate": cmd_eigenvariate,
    "validate-fwe": cmd_validate_fwe,
}
