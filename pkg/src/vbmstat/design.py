"""Cohort tables, the five-column VBM design and pairwise group contrasts."""

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd

from ._io import atomic_write_text
from .errors import CohortError, ConfigError

COHORT_COLUMNS = [
    "subject_id",
    "diagnosis",
    "age",
    "tiv",
    "sex",
    "education",
    "mmse",
    "apoe4_carrier",
    "converted_24mo",
]
OPTIONAL_COLUMNS = ["eigenvariate"]
DIAGNOSES = ("CN", "MCI", "AD")

DESIGN_COLUMNS = ("intercept", "mci", "ad", "age", "tiv")
DESIGN_ROLES = ("intercept", "indicator", "indicator", "covariate", "covariate")

# weights against the DESIGN_COLUMNS layout, CN being the reference level
CONTRASTS = {
    "CN>AD": (0.0, 0.0, -1.0, 0.0, 0.0),
    "MCI>AD": (0.0, 1.0, -1.0, 0.0, 0.0),
    "CN>MCI": (0.0, -1.0, 0.0, 0.0, 0.0),
}
CLI_CONTRASTS = {"cn-gt-ad": "CN>AD", "mci-gt-ad": "MCI>AD", "cn-gt-mci": "CN>MCI"}


def _to_bool(series: pd.Series, name: str) -> pd.Series:
    def conv(x):
        if x is None or (isinstance(x, float) and np.isnan(x)) or x == "":
            return None
        if isinstance(x, (bool, np.bool_)):
            return bool(x)
        s = str(x).strip().lower()
        if s in ("1", "true", "yes", "y", "t", "1.0"):
            return True
        if s in ("0", "false", "no", "n", "f", "0.0"):
            return False
        raise CohortError(f"column {name!r}: cannot interpret {x!r} as boolean")

    return series.map(conv).astype("object")


def validate_cohort(df: pd.DataFrame, required: Sequence[str] = ("subject_id", "diagnosis")) -> pd.DataFrame:
    """Check the cohort invariants; returns a normalised copy.

    Only ``required`` columns must be present, the rest are validated when
    they exist so partial tables (e.g. prediction-only cohorts) are accepted.
    """
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise CohortError(f"cohort is missing column(s): {', '.join(missing)}")
    df = df.copy()
    df["subject_id"] = df["subject_id"].astype(str)
    if df["subject_id"].duplicated().any():
        dup = df.loc[df["subject_id"].duplicated(), "subject_id"].iloc[0]
        raise CohortError(f"duplicate subject id {dup!r}")
    bad = ~df["diagnosis"].isin(DIAGNOSES)
    if bad.any():
        raise CohortError(f"unknown diagnosis {df.loc[bad, 'diagnosis'].iloc[0]!r} (expected CN/MCI/AD)")
    for col in ("age", "tiv", "education", "mmse", "eigenvariate"):
        if col in df.columns:
            df[col] = pd.to_numeric(df[col], errors="raise").astype(float)
    if "age" in df.columns and not df["age"].between(0, 120, inclusive="neither").all():
        raise CohortError("age must lie in (0, 120)")
    if "tiv" in df.columns and not (df["tiv"] > 0).all():
        raise CohortError("tiv must be > 0")
    if "mmse" in df.columns and not df["mmse"].between(0, 30).all():
        raise CohortError("mmse must lie in [0, 30]")
    if "sex" in df.columns and not df["sex"].isin(["M", "F"]).all():
        raise CohortError("sex must be M or F")
    for col in ("apoe4_carrier", "converted_24mo"):
        if col in df.columns:
            df[col] = _to_bool(df[col], col)
    if "converted_24mo" in df.columns:
        wrong = df["converted_24mo"].notna() & (df["diagnosis"] != "MCI")
        if wrong.any():
            raise CohortError(
                f"converted_24mo is defined for non-MCI subject {df.loc[wrong, 'subject_id'].iloc[0]!r}"
            )
    return df


def read_cohort_csv(path, required: Sequence[str] = ("subject_id", "diagnosis")) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"cohort CSV not found: {path}")
    df = pd.read_csv(path, dtype={"subject_id": str}, keep_default_na=True)
    return validate_cohort(df, required)


def write_cohort_csv(df: pd.DataFrame, path) -> None:
    cols = [c for c in COHORT_COLUMNS + OPTIONAL_COLUMNS if c in df.columns]
    extra = [c for c in df.columns if c not in cols]
    out = df[cols + extra].copy()
    for col in ("apoe4_carrier", "converted_24mo"):
        if col in out.columns:
            out[col] = out[col].map(lambda x: "" if x is None or x != x else int(bool(x)))
    atomic_write_text(path, out.to_csv(index=False, float_format="%.10g", lineterminator="\n"))


@dataclass
class DesignMatrix:
    matrix: np.ndarray
    names: tuple
    roles: tuple
    subject_ids: tuple
    centers: Dict[str, float]
    rank: int
    warnings: List[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def p(self) -> int:
        return self.matrix.shape[1]

    def columns(self, names) -> List[int]:
        try:
            return [self.names.index(c) for c in names]
        except ValueError as exc:
            raise ConfigError(f"unknown design column in {list(names)}; have {self.names}") from exc


def build_design(cohort: pd.DataFrame, order: Sequence[str]) -> DesignMatrix:
    """Rows ``[1, MCI, AD, age - mean(age), tiv - mean(tiv)]`` in ``order``.

    Age and TIV are centred on the subjects listed in ``order`` (the modelled
    sample). A design without all three groups, or with constant age/TIV, is
    returned with a rank-deficiency warning rather than rejected.
    """
    cohort = validate_cohort(cohort, ("subject_id", "diagnosis", "age", "tiv"))
    by_id = cohort.set_index("subject_id")
    order = [str(s) for s in order]
    unknown = [s for s in order if s not in by_id.index]
    if unknown:
        raise CohortError(f"subject {unknown[0]!r} is not in the cohort table")
    rows = by_id.loc[order]
    age = rows["age"].to_numpy(float)
    tiv = rows["tiv"].to_numpy(float)
    centers = {"age": float(age.mean()), "tiv": float(tiv.mean())}
    X = np.column_stack(
        [
            np.ones(len(order)),
            (rows["diagnosis"] == "MCI").to_numpy(float),
            (rows["diagnosis"] == "AD").to_numpy(float),
            age - centers["age"],
            tiv - centers["tiv"],
        ]
    )
    s = np.linalg.svd(X, compute_uv=False)
    rank = int(np.sum(s > max(X.shape) * np.finfo(float).eps * s[0]))
    notes = []
    if rank < X.shape[1]:
        present = sorted(set(rows["diagnosis"]))
        notes.append(f"design is rank deficient (rank {rank} of {X.shape[1]}; groups present: {present})")
        warnings.warn(notes[-1], RuntimeWarning, stacklevel=2)
    return DesignMatrix(X, DESIGN_COLUMNS, DESIGN_ROLES, tuple(order), centers, rank, notes)


@dataclass(frozen=True)
class Contrast:
    name: str
    weights: tuple
    description: str = ""

    @property
    def vector(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)


def make_contrast(name: str, p: int = 5) -> Contrast:
    """Pairwise group contrast ``"G1>G2"`` (or CLI spelling ``g1-gt-g2``)."""
    key = CLI_CONTRASTS.get(name, name)
    if key not in CONTRASTS:
        raise ConfigError(f"unknown contrast {name!r}; choose from {sorted(CONTRASTS)}")
    if p != 5:
        raise ConfigError(f"group contrasts need the 5-column layout, design has {p} columns")
    g1, g2 = key.split(">")
    return Contrast(key, CONTRASTS[key], f"{g1} has greater GMV than {g2}")
