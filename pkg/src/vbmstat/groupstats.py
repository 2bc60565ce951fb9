"""Two-sample comparisons, Cohen's d and two-way ANOVA on ROI summaries.

Every test has a summary-statistics entry point (means, SDs, counts) because
published tables are often the only data available.
"""

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from .errors import ConfigError, EstimabilityError, InsufficientDataError, UndefinedEffectError


@dataclass
class GroupComparison:
    labels: Tuple[str, str]
    n: Tuple[int, int]
    means: Tuple[float, float]
    sds: Tuple[float, float]
    t: float
    df: float
    p: float
    cohen_d: float
    variance_rule: str = "pooled"

    @property
    def ses(self) -> Tuple[float, float]:
        return tuple(s / np.sqrt(k) for s, k in zip(self.sds, self.n))

    @property
    def mean_difference(self) -> float:
        return self.means[0] - self.means[1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ses"] = list(self.ses)
        d["mean_difference"] = self.mean_difference
        return d


def cohen_d(mean1: float, sd1: float, mean2: float, sd2: float) -> float:
    """``(mean1 - mean2) / sqrt((sd1^2 + sd2^2) / 2)``, the unweighted average-variance form."""
    if sd1 < 0 or sd2 < 0:
        raise ConfigError("standard deviations must be >= 0")
    if sd1 == 0 and sd2 == 0:
        raise UndefinedEffectError("both standard deviations are zero; Cohen's d is undefined")
    return (mean1 - mean2) / np.sqrt((sd1**2 + sd2**2) / 2.0)


def sd_from_se(se: float, n: int) -> float:
    return se * np.sqrt(n)


def two_sample_t_from_summary(
    mean1, sd1, n1, mean2, sd2, n2, variance_rule="pooled", labels=("group1", "group2")
) -> GroupComparison:
    """Two-sample t-test from group means, SDs and sizes (two-sided p)."""
    if n1 < 2 or n2 < 2:
        raise InsufficientDataError(f"each group needs n >= 2, got {n1} and {n2}")
    v1, v2 = sd1**2, sd2**2
    diff = mean1 - mean2
    if variance_rule == "pooled":
        df = n1 + n2 - 2
        sp2 = ((n1 - 1) * v1 + (n2 - 1) * v2) / df
        se = np.sqrt(sp2 * (1.0 / n1 + 1.0 / n2))
    elif variance_rule == "welch":
        a, b = v1 / n1, v2 / n2
        se = np.sqrt(a + b)
        df = (a + b) ** 2 / (a**2 / (n1 - 1) + b**2 / (n2 - 1)) if se > 0 else n1 + n2 - 2
    else:
        raise ConfigError(f"variance_rule must be 'pooled' or 'welch', got {variance_rule!r}")
    if se == 0:
        if diff != 0:
            raise UndefinedEffectError("zero variance in both groups with different means")
        t, p, d = 0.0, 1.0, 0.0
    else:
        t = diff / se
        p = float(2.0 * stats.t.sf(abs(t), df))
        d = cohen_d(mean1, sd1, mean2, sd2)
    return GroupComparison(
        tuple(labels), (int(n1), int(n2)), (float(mean1), float(mean2)), (float(sd1), float(sd2)),
        float(t), float(df), float(min(p, 1.0)), float(d), variance_rule,
    )


def two_sample_t(x1, x2, variance_rule="pooled", labels=("group1", "group2")) -> GroupComparison:
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x1.size < 2 or x2.size < 2:
        raise InsufficientDataError(f"each group needs n >= 2, got {x1.size} and {x2.size}")
    return two_sample_t_from_summary(
        x1.mean(), x1.std(ddof=1), x1.size, x2.mean(), x2.std(ddof=1), x2.size, variance_rule, labels
    )


# --- two-way ANOVA ------------------------------------------------------------------


@dataclass
class AnovaRow:
    source: str
    ss: float
    df: int
    ms: float
    F: Optional[float]
    p: Optional[float]


@dataclass
class AnovaResult:
    rows: List[AnovaRow]
    ss_type: int
    n: int
    factor_a: str
    factor_b: str

    def __getitem__(self, source: str) -> AnovaRow:
        for r in self.rows:
            if r.source == source:
                return r
        raise KeyError(source)

    def to_records(self) -> List[dict]:
        return [asdict(r) for r in self.rows]


@dataclass
class Cell:
    a: str
    b: str
    n: int
    mean: float
    sd: float


def _codes(levels: Sequence, values: Sequence, coding: str) -> np.ndarray:
    """Indicator (treatment, first level as reference) or sum-to-zero columns."""
    k = len(levels)
    pos = np.array([levels.index(v) for v in values])
    out = np.zeros((len(values), k - 1))
    for j in range(1, k):
        out[:, j - 1] = pos == j
    if coding == "sum":
        out[pos == 0] = -1.0
    return out


def _interaction(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.column_stack([A[:, i] * B[:, j] for i in range(A.shape[1]) for j in range(B.shape[1])])


def _weighted_rss(design: np.ndarray, means: np.ndarray, w: np.ndarray) -> float:
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(design * sw[:, None], means * sw, rcond=None)
    r = means - design @ coef
    return float(np.sum(w * r * r))


def _anova(a_vals, b_vals, means, weights, ss_within, n_total, ss_type, a_name, b_name) -> AnovaResult:
    """ANOVA on observation-level or cell-level data.

    ``means``/``weights`` are either raw observations with weight 1 and
    ``ss_within = 0``, or cell means with cell counts as weights and the pooled
    within-cell sum of squares; residual sums of squares are identical in both
    representations, so every sum of squares is as well.
    """
    if ss_type not in (1, 2, 3):
        raise ConfigError(f"ss_type must be 1, 2 or 3, got {ss_type}")
    la = sorted(set(a_vals), key=list(a_vals).index)
    lb = sorted(set(b_vals), key=list(b_vals).index)
    present = set(zip(a_vals, b_vals))
    for x in la:
        for y in lb:
            if (x, y) not in present:
                raise EstimabilityError(f"cell ({a_name}={x}, {b_name}={y}) has no observations")
    coding = "sum" if ss_type == 3 else "treatment"
    one = np.ones((len(means), 1))
    A = _codes(la, a_vals, coding)
    B = _codes(lb, b_vals, coding)
    AB = _interaction(A, B)

    def rss(*blocks):
        return ss_within + _weighted_rss(np.column_stack((one,) + blocks), means, weights)

    rss_full = rss(A, B, AB)
    centred = means - np.average(means, weights=weights)
    if ss_within + np.sum(weights * centred**2) <= 1e-24 * max(1.0, float(np.sum(weights * means**2))):
        rss_full = 0.0  # all values equal: every sum of squares is rounding noise
    if rss_full == 0.0:
        ss = {a_name: 0.0, b_name: 0.0, "interaction": 0.0}
    elif ss_type == 1:
        rss_0 = rss()
        rss_a = rss(A)
        rss_ab = rss(A, B)
        ss = {a_name: rss_0 - rss_a, b_name: rss_a - rss_ab, "interaction": rss_ab - rss_full}
    elif ss_type == 2:
        rss_a = rss(A)
        rss_b = rss(B)
        rss_ab = rss(A, B)
        ss = {a_name: rss_b - rss_ab, b_name: rss_a - rss_ab, "interaction": rss_ab - rss_full}
    else:
        ss = {a_name: rss(B, AB) - rss_full, b_name: rss(A, AB) - rss_full, "interaction": rss(A, B) - rss_full}
    dfs = {a_name: len(la) - 1, b_name: len(lb) - 1, "interaction": (len(la) - 1) * (len(lb) - 1)}
    df_res = n_total - len(la) * len(lb)
    if df_res < 1:
        raise InsufficientDataError("no residual degrees of freedom (one observation per cell)")
    ms_res = rss_full / df_res
    rows = []
    for src in (a_name, b_name, "interaction"):
        s = max(ss[src], 0.0)
        ms = s / dfs[src]
        if ms_res > 0:
            F = ms / ms_res
            p = float(stats.f.sf(F, dfs[src], df_res))
        else:
            F, p = (0.0, 1.0) if s == 0 else (np.inf, 0.0)
        rows.append(AnovaRow(src, s, dfs[src], ms, float(F), p))
    rows.append(AnovaRow("residual", rss_full, df_res, ms_res, None, None))
    return AnovaResult(rows, ss_type, int(n_total), a_name, b_name)


def two_way_anova(values, factor_a, factor_b, ss_type: int = 2, names=("diagnosis", "apoe4")) -> AnovaResult:
    """Two-way ANOVA with interaction on raw observations (default type II sums of squares)."""
    y = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ConfigError("ANOVA values must be finite")
    a = [str(v) for v in factor_a]
    b = [str(v) for v in factor_b]
    if not (len(a) == len(b) == y.size):
        raise ConfigError("values and factors must have equal length")
    return _anova(a, b, y, np.ones_like(y), 0.0, y.size, ss_type, *names)


def two_way_anova_from_summary(cells: Sequence[Cell], ss_type: int = 2, names=("diagnosis", "apoe4")) -> AnovaResult:
    """Same ANOVA reconstructed exactly from per-cell n, mean and SD."""
    cells = list(cells)
    for c in cells:
        if c.n < 1:
            raise EstimabilityError(f"cell ({c.a}, {c.b}) has no observations")
    ss_within = float(sum((c.n - 1) * c.sd**2 for c in cells))
    n_total = int(sum(c.n for c in cells))
    return _anova(
        [str(c.a) for c in cells],
        [str(c.b) for c in cells],
        np.array([c.mean for c in cells], dtype=float),
        np.array([c.n for c in cells], dtype=float),
        ss_within, n_total, ss_type, *names,
    )


# --- APOE4 stratification -------------------------------------------------------------


@dataclass
class Stratum:
    diagnosis: str
    comparison: GroupComparison  # non-carriers (group 1) vs carriers (group 2)
    carriers: int
    n: int

    @property
    def carrier_frequency(self) -> float:
        return self.carriers / self.n


def carrier_frequencies(cohort: pd.DataFrame, within: str = "diagnosis", by: str = "apoe4_carrier") -> Dict[str, float]:
    out = {}
    for level, g in _groups(cohort, within):
        flags = g[by].map(bool)
        out[level] = float(flags.mean())
    return out


def _groups(cohort, within):
    order = [d for d in ("CN", "MCI", "AD") if d in set(cohort[within])]
    order += sorted(set(cohort[within]) - set(order))
    return [(lvl, cohort[cohort[within] == lvl]) for lvl in order]


def stratified_comparison(
    cohort: pd.DataFrame,
    value: str = "eigenvariate",
    by: str = "apoe4_carrier",
    within: str = "diagnosis",
    variance_rule: str = "pooled",
) -> List[Stratum]:
    """Carrier vs non-carrier comparison inside every diagnostic group."""
    for col in (value, by, within):
        if col not in cohort.columns:
            raise ConfigError(f"cohort has no {col!r} column")
    out = []
    for level, g in _groups(cohort, within):
        flags = g[by].map(bool).to_numpy()
        x_non = g.loc[~flags, value].to_numpy(float)
        x_car = g.loc[flags, value].to_numpy(float)
        if x_non.size < 2 or x_car.size < 2:
            raise EstimabilityError(
                f"stratum {within}={level} has {x_non.size} non-carriers and {x_car.size} carriers; need >= 2 each"
            )
        cmp_ = two_sample_t(x_non, x_car, variance_rule, labels=("APOE4-", "APOE4+"))
        out.append(Stratum(level, cmp_, int(flags.sum()), int(flags.size)))
    return out
