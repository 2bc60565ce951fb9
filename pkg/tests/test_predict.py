import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vbmstat import predict as pr
from vbmstat.errors import ConfigError, InsufficientDataError

from .oracles import grid_search_mle


@pytest.mark.parametrize("seed", range(5))
def test_matches_grid_search(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=10)
    y = np.array([0, 1] * 5)[rng.permutation(10)]
    y[np.argmax(x)] = 0  # keep the toy non-separable
    y[np.argmin(x)] = 1
    m = pr.fit_logistic(x, y, l2=0.0)
    b0, b1 = grid_search_mle(x, y)
    assert m.coef[0] == pytest.approx(b0, abs=1e-4)
    assert m.coef[1] == pytest.approx(b1, abs=1e-4)
    assert m.grad_norm <= 1e-8 and m.converged and not m.separated


@given(st.integers(1, 60), st.integers(1, 60))
def test_intercept_only_analytic(pos, neg):
    y = np.r_[np.ones(pos), np.zeros(neg)]
    m = pr.fit_logistic(np.zeros((pos + neg, 0)), y)
    q = pos / (pos + neg)
    assert m.intercept == pytest.approx(np.log(q / (1 - q)), abs=1e-9)
    np.testing.assert_allclose(m.predict_proba(np.zeros((3, 0))), q, atol=1e-9)


def test_odds_ratio_identity():
    assert pr.odds_ratio(-0.551) == pytest.approx(0.576, abs=1e-3)
    m = pr.LogisticModel(("eigenvariate",), np.array([0.0, -0.551]), np.zeros(1), np.ones(1), np.array([0.0, -0.551]))
    assert m.odds_ratios["eigenvariate"] == pytest.approx(0.576, abs=1e-3)


@given(st.integers(0, 10_000))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    Z = np.column_stack([np.ones(30), rng.normal(size=(30, 3))])
    y = (rng.random(30) < 0.4).astype(float)
    beta = rng.normal(size=4)
    g = pr.penalized_gradient(beta, Z, y, 0.3)
    h = 1e-6
    fd = np.array([(pr.penalized_loglik(beta + h * e, Z, y, 0.3) - pr.penalized_loglik(beta - h * e, Z, y, 0.3)) / (2 * h) for e in np.eye(4)])
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)


def test_gradient_at_solution_and_original_scale():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(200, 3)) * [1.0, 10.0, 0.01] + [0, 50, 3]
    y = rng.random(200) < pr._sigmoid(0.5 * X[:, 0] - 0.1 * (X[:, 1] - 50))
    m = pr.fit_logistic(X, y)
    assert m.grad_norm <= 1e-8
    Z = np.column_stack([np.ones(200), (X - m.mean) / m.scale])
    np.testing.assert_allclose(Z @ m.coef_std, m.decision_function(X), atol=1e-9)


def test_separation_flagged():
    x = np.arange(10.0)
    y = x >= 5
    m = pr.fit_logistic(x, y, l2=0.0)
    assert m.separated
    m2 = pr.fit_logistic(x, y)  # default ridge keeps it finite
    assert np.all(np.isfinite(m2.coef))


def test_fit_errors():
    with pytest.raises(InsufficientDataError):
        pr.fit_logistic(np.zeros((5, 1)), np.ones(5))
    with pytest.raises(InsufficientDataError):
        pr.fit_logistic(np.zeros((2, 3)), [0, 1])
    with pytest.raises(ConfigError):
        pr.fit_logistic([[np.nan], [1.0]], [0, 1])
    with pytest.raises(ConfigError):
        pr.fit_logistic([[0.0], [1.0]], [0, 1], l2=-1)


def test_roc_examples():
    assert pr.roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]).auc == 0.75
    assert pr.roc_auc([1, 2, 3, 4], [0, 0, 1, 1]).auc == 1.0
    r = pr.roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0])
    assert r.auc == 0.5
    np.testing.assert_array_equal(r.fpr, [0, 1]) and np.testing.assert_array_equal(r.tpr, [0, 1])
    with pytest.raises(InsufficientDataError):
        pr.roc_auc([1, 2], [1, 1])


scores_labels = st.integers(2, 50).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(0, 6), min_size=n, max_size=n),
        st.lists(st.booleans(), min_size=n, max_size=n),
    )
)


@given(scores_labels)
def test_auc_equals_mann_whitney(sl):
    s, y = sl
    if all(y) or not any(y):
        return
    assert pr.roc_auc(np.array(s, float), y).auc == pr.mann_whitney_auc(np.array(s, float), y)


@given(scores_labels)
def test_auc_monotone_invariance(sl):
    s, y = sl
    if all(y) or not any(y):
        return
    s = np.array(s, float)
    a = pr.roc_auc(s, y).auc
    assert pr.roc_auc(np.exp(s) * 3 - 7, y).auc == a
    assert pr.roc_auc(s**3, y).auc == a


def test_roc_curve_shape():
    rng = np.random.default_rng(0)
    r = pr.roc_auc(rng.normal(size=40), rng.random(40) < 0.3)
    assert r.fpr[0] == 0 and r.tpr[0] == 0 and r.fpr[-1] == 1 and r.tpr[-1] == 1
    assert np.all(np.diff(r.fpr) >= 0) and np.all(np.diff(r.tpr) >= 0)
    assert np.trapezoid(r.tpr, r.fpr) == pytest.approx(r.auc)


def test_metrics_examples():
    m = pr.Metrics(tp=7, fp=65, fn=3, tn=54)
    assert m.precision == pytest.approx(0.0972, abs=1e-4)
    assert m.recall == pytest.approx(0.70)
    assert m.f1 == pytest.approx(0.1707, abs=1e-4)
    assert m.f1 == pytest.approx(2 * m.precision * m.recall / (m.precision + m.recall))
    perfect = pr.classification_metrics([1, 0, 1], [1, 0, 1])
    assert (perfect.accuracy, perfect.precision, perfect.recall, perfect.f1) == (1, 1, 1, 1)
    none = pr.classification_metrics([0, 0, 0], [1, 0, 1])
    assert none.recall == 0 and none.precision is None
    assert none.to_dict()["precision"] is None


@given(st.lists(st.booleans(), min_size=5, max_size=200), st.integers(2, 10), st.integers(0, 100))
def test_fold_stratification(y, k, seed):
    y = np.array(y)
    if y.size < k:
        return
    f = pr.stratified_folds(y, k, seed)
    assert set(np.unique(f)) <= set(range(k))
    for cls in (True, False):
        counts = np.bincount(f[y == cls], minlength=k)
        assert counts.max() - counts.min() <= 1
    total = np.bincount(f, minlength=k)
    assert total.max() - total.min() <= 1
    np.testing.assert_array_equal(f, pr.stratified_folds(y, k, seed))


def _mci_cohort(x, y, rng):
    n = len(y)
    return pd.DataFrame(
        {
            "subject_id": [f"m{i}" for i in range(n)],
            "diagnosis": "MCI",
            "age": rng.normal(73, 7, n),
            "sex": rng.choice(["M", "F"], n),
            "education": rng.integers(8, 20, n).astype(float),
            "mmse": rng.integers(22, 30, n).astype(float),
            "apoe4_carrier": rng.random(n) < 0.33,
            "converted_24mo": y,
            "eigenvariate": x,
        }
    )


def test_separable_feature_perfect_cv():
    rng = np.random.default_rng(0)
    y = np.r_[np.ones(20, bool), np.zeros(60, bool)]
    x = np.where(y, -1.0, 1.0) + rng.normal(0, 0.1, y.size)
    r = pr.cross_validate(_mci_cohort(x, y, rng), "eigenvariate", seed=1)
    assert r.auc_mean == 1.0 and r.metrics.recall == 1.0 and r.pooled_auc == 1.0


def test_random_feature_auc_near_chance():
    means = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        y = np.zeros(200, bool)
        y[rng.permutation(200)[:50]] = True
        r = pr.cross_validate(_mci_cohort(rng.normal(size=200), y, rng), "eigenvariate", seed=seed)
        assert 0.35 <= r.auc_mean <= 0.65
        means.append(r.auc_mean)
    assert abs(np.mean(means) - 0.5) < 0.05


def test_cv_deterministic_across_jobs():
    rng = np.random.default_rng(5)
    y = rng.random(129) < 0.15
    coh = _mci_cohort(rng.normal(size=129) - 0.5 * y, y, rng)
    a = pr.cross_validate(coh, "combined", seed=3, n_jobs=1).to_dict()
    b = pr.cross_validate(coh, "combined", seed=3, n_jobs=4).to_dict()
    assert a == b


def test_undefined_folds_warned():
    rng = np.random.default_rng(1)
    y = np.zeros(40, bool)
    y[:3] = True
    with pytest.warns(RuntimeWarning, match="fewer"):
        r = pr.cross_validate(_mci_cohort(rng.normal(size=40), y, rng), "eigenvariate", k=5)
    assert r.undefined_folds == 2 and sum(a is None for a in r.fold_auc) == 2
    assert r.warnings


def test_cv_argument_errors():
    rng = np.random.default_rng(1)
    y = rng.random(30) < 0.3
    coh = _mci_cohort(rng.normal(size=30), y, rng)
    with pytest.raises(ConfigError, match="eigenvariate"):
        pr.cross_validate(coh.drop(columns="eigenvariate"), "combined")
    with pytest.raises(ConfigError):
        pr.cross_validate(coh, "imaging")
    with pytest.raises(ConfigError):
        pr.cross_validate(coh, k=1)
    with pytest.raises(ConfigError):
        pr.cross_validate(coh, threshold=1.0)


def test_report_outputs(tmp_path):
    rng = np.random.default_rng(2)
    y = rng.random(60) < 0.3
    coh = _mci_cohort(rng.normal(size=60), y, rng)
    reps = [pr.cross_validate(coh, fs) for fs in pr.FEATURE_SETS]
    pr.write_roc_csv(reps, tmp_path / "roc.csv")
    roc = pd.read_csv(tmp_path / "roc.csv")
    assert tuple(roc.columns) == pr.ROC_HEADER
    assert set(roc.feature_set) == set(pr.FEATURE_SETS)
    pr.write_report(reps[0], tmp_path / "r.json")
    import json

    d = json.loads((tmp_path / "r.json").read_text())
    assert {"auc_mean", "auc_sd", "pooled_auc", "metrics", "model"} <= set(d)
    assert 0 <= d["pooled_auc"] <= 1


def test_negative_eigenvariate_coefficient_in_phantoms():
    """Converters carry extra atrophy sized to a log-odds slope of about -0.55 per SD."""
    from vbmstat.design import build_design
    from vbmstat.eigenvariate import extract_eigenvariate
    from vbmstat.phantom import calibrate_delta, generate_cohort, three_group_spec

    base = dict(dims=(10, 10, 10), voxel_size=2.0, fwhm=6.0, radius=6.0, delta_ad=0.05, delta_mci=0.02, conversion_rate=9 / 129)
    probe = three_group_spec(**base, converter_delta=1.0)
    sphere = probe.converter_spheres[0]
    # within-MCI ROI d of 0.55 between converters and the rest
    conv_delta = calibrate_delta(probe, sphere, 0.551)
    neg = 0
    for seed in range(50):
        spec = three_group_spec(**base, converter_delta=conv_delta, seed=2000 + seed)
        stack, table = generate_cohort(spec)
        roi = sphere.weights(spec.dims, spec.affine()) > 0.5
        e = extract_eigenvariate(stack, roi, build_design(table, stack.subject_ids))
        table = table.set_index("subject_id").loc[list(stack.subject_ids)].reset_index()
        table["eigenvariate"] = e.values
        r = pr.cross_validate(table, "eigenvariate", seed=seed)
        neg += r.model.coef[1] < 0
    assert neg >= 45
