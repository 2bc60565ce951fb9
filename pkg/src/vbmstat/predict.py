"""Conversion prediction: penalized logistic regression, stratified k-fold CV, ROC/AUC.

AUC is computed with integer pair counts so the trapezoid area and the
Mann-Whitney statistic are the same number, not merely close.
"""

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ._io import atomic_write_text
from .errors import ConfigError, InsufficientDataError

CLINICAL = ("age", "sex", "education", "mmse", "apoe4_carrier")
FEATURE_SETS = {
    "clinical": CLINICAL,
    "eigenvariate": ("eigenvariate",),
    "combined": CLINICAL + ("eigenvariate",),
}
DEFAULT_L2 = 1e-4
DEFAULT_THRESHOLD = 0.5
GRAD_TOL = 1e-8
MAX_ITER = 100
SEPARATION_NORM = 1e4


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def odds_ratio(beta):
    return np.exp(np.asarray(beta, dtype=float))


@dataclass
class LogisticModel:
    """Logistic model; ``coef[0]`` is the intercept, all on the original feature scale."""

    names: Tuple[str, ...]
    coef: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    coef_std: np.ndarray  # coefficients on the standardized scale
    l2: float = 0.0
    n_iter: int = 0
    grad_norm: float = 0.0
    converged: bool = True
    separated: bool = False

    @property
    def intercept(self) -> float:
        return float(self.coef[0])

    @property
    def odds_ratios(self) -> Dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, odds_ratio(self.coef[1:]))}

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            X = X.reshape(-1, len(self.names))
        return self.coef[0] + X @ self.coef[1:]

    def predict_proba(self, X) -> np.ndarray:
        return _sigmoid(self.decision_function(X))

    def to_dict(self) -> dict:
        return {
            "features": list(self.names),
            "intercept": self.intercept,
            "coefficients": {n: float(v) for n, v in zip(self.names, self.coef[1:])},
            "odds_ratios": self.odds_ratios,
            "l2": self.l2,
            "iterations": self.n_iter,
            "gradient_max_abs": self.grad_norm,
            "converged": self.converged,
            "separated": self.separated,
        }


def penalized_gradient(beta, Z, y, l2):
    """Score of the penalized log-likelihood; ``Z`` includes the intercept column (unpenalized)."""
    g = Z.T @ (y - _sigmoid(Z @ beta))
    g[1:] -= l2 * beta[1:]
    return g


def penalized_loglik(beta, Z, y, l2):
    eta = Z @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)) - 0.5 * l2 * np.sum(beta[1:] ** 2))


def fit_logistic(features, labels, l2: float = DEFAULT_L2, names: Optional[Sequence[str]] = None) -> LogisticModel:
    """Newton/IRLS fit of ``P(y=1) = sigmoid(b0 + x'b)`` with a ridge penalty on ``b``.

    Features are standardized with the training mean and SD (population SD,
    constant columns keep scale 1); coefficients are mapped back afterwards.
    Converges when the largest absolute gradient component is ``<= 1e-8``.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(labels).astype(bool)
    n, m = X.shape
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(m))
    if len(names) != m:
        raise ConfigError(f"{len(names)} feature names for {m} columns")
    if l2 < 0:
        raise ConfigError("l2 must be >= 0")
    if y.shape != (n,):
        raise ConfigError("labels must have one entry per row")
    if not np.all(np.isfinite(X)):
        raise ConfigError("features must be finite")
    if y.all() or not y.any():
        raise InsufficientDataError("labels contain a single class")
    if n < m + 1:
        raise InsufficientDataError(f"need n >= m + 1 observations, got n={n}, m={m}")
    mu = X.mean(axis=0) if m else np.zeros(0)
    sd = X.std(axis=0) if m else np.zeros(0)
    sd = np.where(sd > 0, sd, 1.0)
    Z = np.column_stack([np.ones(n), (X - mu) / sd])
    yf = y.astype(float)
    q = yf.mean()
    beta = np.zeros(m + 1)
    beta[0] = np.log(q / (1 - q))
    pen = np.full(m + 1, l2)
    pen[0] = 0.0
    converged = separated = False
    obj = penalized_loglik(beta, Z, yf, l2)
    it = 0
    for it in range(1, MAX_ITER + 1):
        g = penalized_gradient(beta, Z, yf, l2)
        if np.max(np.abs(g)) <= GRAD_TOL:
            converged = True
            it -= 1
            break
        p = _sigmoid(Z @ beta)
        w = p * (1 - p)
        H = (Z * w[:, None]).T @ Z + np.diag(pen)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            new = penalized_loglik(cand, Z, yf, l2)
            if new >= obj - 1e-12 * abs(obj) or t < 1e-10:
                break
            t *= 0.5
        beta, obj = cand, new
        if np.linalg.norm(beta) > SEPARATION_NORM:
            separated = True
            break
    g = penalized_gradient(beta, Z, yf, l2)
    gmax = float(np.max(np.abs(g)))
    converged = converged or gmax <= GRAD_TOL
    perfect = bool(np.all((Z @ beta > 0) == y))
    separated = separated or (perfect and (not converged or np.max(np.abs(beta[1:]), initial=0.0) > 10))
    coef = np.empty(m + 1)
    coef[1:] = beta[1:] / sd
    coef[0] = beta[0] - float(np.sum(coef[1:] * mu))
    return LogisticModel(names, coef, mu, sd, beta.copy(), float(l2), it, gmax, bool(converged), bool(separated))


# --- ROC / AUC ------------------------------------------------------------------------


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # score at which each point is reached (inf for the origin)
    auc: float


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ConfigError("scores and labels must be 1-D of equal length")
    if not np.all(np.isfinite(s)):
        raise ConfigError("scores must be finite")
    if y.all() or not y.any():
        raise InsufficientDataError("ROC needs both classes")
    return s, y


def roc_auc(scores, labels) -> RocCurve:
    """ROC by a sweep over unique scores (descending) and its trapezoid area.

    Tied scores move the curve diagonally, which is the half-credit tie rule.
    """
    s, y = _check_binary(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    distinct = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.r_[0, np.cumsum(y)[distinct]].astype(np.int64)
    fp = np.r_[0, np.cumsum(~y)[distinct]].astype(np.int64)
    P, N = int(tp[-1]), int(fp[-1])
    # twice the area in units of one pair, kept integral
    twice = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auc = twice / (2 * P * N)
    return RocCurve(fp / N, tp / P, np.r_[np.inf, s[distinct]], auc)


def mann_whitney_auc(scores, labels) -> float:
    """Brute-force pair count: P(score+ > score-) + 0.5 P(tie)."""
    s, y = _check_binary(scores, labels)
    pos, neg = s[y], s[~y]
    gt = int(np.sum(pos[:, None] > neg[None, :]))
    eq = int(np.sum(pos[:, None] == neg[None, :]))
    return (2 * gt + eq) / (2 * pos.size * neg.size)


@dataclass
class Metrics:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.n

    @property
    def precision(self) -> Optional[float]:
        d = self.tp + self.fp
        return self.tp / d if d else None

    @property
    def recall(self) -> Optional[float]:
        d = self.tp + self.fn
        return self.tp / d if d else None

    @property
    def f1(self) -> Optional[float]:
        d = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / d if d else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(accuracy=self.accuracy, precision=self.precision, recall=self.recall, f1=self.f1)
        return d


def classification_metrics(predicted, labels) -> Metrics:
    p = np.asarray(predicted).astype(bool)
    y = np.asarray(labels).astype(bool)
    if p.size == 0 or p.shape != y.shape:
        raise ConfigError("predictions and labels must be nonempty and of equal length")
    return Metrics(int(np.sum(p & y)), int(np.sum(p & ~y)), int(np.sum(~p & y)), int(np.sum(~p & ~y)))


# --- cross-validation -----------------------------------------------------------------


def stratified_folds(labels, k: int, seed: int) -> np.ndarray:
    """Fold index per subject: seeded shuffle, then round-robin within each class.

    The negative class continues the rotation where the positives stopped, so
    fold sizes differ by at most one overall and per class.
    """
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    y = np.asarray(labels).astype(bool)
    if y.size < k:
        raise InsufficientDataError(f"{y.size} subjects cannot fill {k} folds")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(4,))))
    folds = np.empty(y.size, dtype=np.int64)
    start = 0
    for cls in (True, False):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(idx.size)]
        folds[idx] = (start + np.arange(idx.size)) % k
        start = (start + idx.size) % k
    return folds


def _encode(col: pd.Series, name: str) -> np.ndarray:
    if name == "sex":
        bad = ~col.isin(["M", "F"])
        if bad.any():
            raise ConfigError("sex must be coded M/F")
        return (col == "F").to_numpy(float)
    if col.dtype == object:
        return col.map(lambda v: float(bool(v)) if isinstance(v, (bool, np.bool_)) else float(v)).to_numpy(float)
    return col.to_numpy(float)


def feature_matrix(cohort: pd.DataFrame, names: Sequence[str]) -> np.ndarray:
    """Numeric matrix of the named cohort columns; sex as F=1, booleans as 0/1."""
    missing = [c for c in names if c not in cohort.columns]
    if missing:
        raise ConfigError(f"cohort is missing feature column(s): {', '.join(missing)}")
    X = np.column_stack([_encode(cohort[c], c) for c in names]) if names else np.zeros((len(cohort), 0))
    if not np.all(np.isfinite(X)):
        bad = [c for j, c in enumerate(names) if not np.all(np.isfinite(X[:, j]))]
        raise ConfigError(f"non-finite values in feature column(s): {', '.join(bad)}")
    return X


def conversion_subset(cohort: pd.DataFrame, label: str = "converted_24mo") -> pd.DataFrame:
    if label not in cohort.columns:
        raise ConfigError(f"cohort is missing the {label!r} column")
    sub = cohort[(cohort["diagnosis"] == "MCI") & cohort[label].map(lambda v: v is not None and v == v)]
    if sub.empty:
        raise InsufficientDataError("no MCI subjects with a conversion label")
    return sub


@dataclass
class CvReport:
    feature_set: str
    features: List[str]
    k: int
    seed: int
    threshold: float
    l2: float
    n: int
    n_positive: int
    fold_auc: List[Optional[float]]
    auc_mean: Optional[float]
    auc_sd: Optional[float]
    undefined_folds: int
    pooled_auc: float
    metrics: Metrics
    roc: RocCurve
    model: LogisticModel  # fit on all subjects
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "feature_set": self.feature_set,
            "features": self.features,
            "k": self.k,
            "seed": self.seed,
            "threshold": self.threshold,
            "l2": self.l2,
            "n": self.n,
            "n_positive": self.n_positive,
            "fold_auc": self.fold_auc,
            "auc_mean": self.auc_mean,
            "auc_sd": self.auc_sd,
            "undefined_folds": self.undefined_folds,
            "pooled_auc": self.pooled_auc,
            "metrics": self.metrics.to_dict(),
            "model": self.model.to_dict(),
            "warnings": self.warnings,
        }


def cross_validate(
    cohort: pd.DataFrame,
    feature_set: str = "combined",
    k: int = 5,
    seed: int = 0,
    threshold: float = DEFAULT_THRESHOLD,
    l2: float = DEFAULT_L2,
    features: Optional[Sequence[str]] = None,
    n_jobs: int = 1,
) -> CvReport:
    """Stratified k-fold evaluation of conversion prediction on the MCI subset.

    Fold AUCs are undefined (None) for test folds without both classes and are
    left out of the mean. Confusion metrics pool all held-out predictions.
    """
    if features is None:
        if feature_set not in FEATURE_SETS:
            raise ConfigError(f"unknown feature set {feature_set!r}; choose from {sorted(FEATURE_SETS)}")
        features = FEATURE_SETS[feature_set]
    if not 0 < threshold < 1:
        raise ConfigError("threshold must lie in (0, 1)")
    sub = conversion_subset(cohort)
    X = feature_matrix(sub, features)
    y = sub["converted_24mo"].map(bool).to_numpy()
    notes = []
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos < 2 or n_neg < 2:
        raise InsufficientDataError(f"need >= 2 subjects per class, got {n_pos} converters and {n_neg} non-converters")
    if n_pos < k or n_neg < k:
        msg = f"fewer subjects than folds in one class ({n_pos} converters, {n_neg} non-converters, k={k})"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    folds = stratified_folds(y, k, seed)

    def run(f):
        train, test = folds != f, folds == f
        model = fit_logistic(X[train], y[train], l2, features)
        prob = model.predict_proba(X[test])
        auc = roc_auc(prob, y[test]).auc if 0 < y[test].sum() < test.sum() else None
        return prob, auc

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            results = list(ex.map(run, range(k)))
    else:
        results = [run(f) for f in range(k)]
    held = np.empty(y.size)
    fold_auc = []
    for f, (prob, auc) in enumerate(results):
        held[folds == f] = prob
        fold_auc.append(auc)
    defined = [a for a in fold_auc if a is not None]
    mean = float(np.mean(defined)) if defined else None
    sd = float(np.std(defined, ddof=1)) if len(defined) > 1 else None
    roc = roc_auc(held, y)
    return CvReport(
        feature_set=feature_set,
        features=list(features),
        k=k,
        seed=seed,
        threshold=threshold,
        l2=l2,
        n=int(y.size),
        n_positive=n_pos,
        fold_auc=fold_auc,
        auc_mean=mean,
        auc_sd=sd,
        undefined_folds=k - len(defined),
        pooled_auc=roc.auc,
        metrics=classification_metrics(held >= threshold, y),
        roc=roc,
        model=fit_logistic(X, y, l2, features),
        warnings=notes,
    )


def write_report(report: CvReport, path) -> None:
    atomic_write_text(path, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


ROC_HEADER = ("feature_set", "fpr", "tpr", "threshold")


def write_roc_csv(reports: Sequence[CvReport], path) -> None:
    lines = [",".join(ROC_HEADER)]
    for r in reports:
        for x, t, th in zip(r.roc.fpr, r.roc.tpr, r.roc.thresholds):
            lines.append(f"{r.feature_set},{x!r},{t!r},{'inf' if np.isinf(th) else repr(float(th))}")
    atomic_write_text(path, "\n".join(lines) + "\n")
