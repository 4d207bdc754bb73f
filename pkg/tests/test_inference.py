import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radiosense.feature_pca import ClassStats, PcaModel
from radiosense.inference import (
    KNN_EPS,
    FeatureBatch,
    KnnClassifier,
    NoEvidenceError,
    cross_validate,
    detect_occupancy,
    detection_metrics,
    gaussian_component,
    gaussian_components,
    infer,
    knn_component,
    knn_components,
    localization_rmse,
    posterior,
    stratified_folds,
)

from conftest import make_task


def naive_posterior(priors, G, combine="sum"):
    """Direct exponentiation, no log-sum-exp."""
    K, E = len(G), len(G[0])
    w = []
    for k in range(K):
        if combine == "sum":
            lik = sum(math.exp(G[k][e]) for e in range(E))
        else:
            lik = math.prod(math.exp(G[k][e]) for e in range(E))
        w.append(priors[k] * lik)
    total = sum(w)
    return [x / total for x in w]


def naive_knn(train, labels, q, k):
    """All-pairs search with explicit min/max scaling."""
    train = np.asarray(train, float)
    lo, hi = train.min(0), train.max(0)
    span = [h - l if h > l else 1.0 for l, h in zip(lo, hi)]
    z = [min(max((q[j] - lo[j]) / span[j], -0.5), 1.5) for j in range(len(q))]
    d = []
    for i, row in enumerate(train):
        zi = [(row[j] - lo[j]) / span[j] for j in range(len(q))]
        d.append((sum((a - b) ** 2 for a, b in zip(zi, z)), i))
    return [i for _, i in sorted(d)[:k]]


def model_with(mu, var, P=None, labels=("a",)):
    """Identity-subspace model so the reconstruction equals the features."""
    mu = np.atleast_2d(np.asarray(mu, float))
    var = np.atleast_2d(np.asarray(var, float))
    V = mu.shape[1]
    P = V if P is None else P
    U = np.eye(V)[:, :P]
    stats = tuple(ClassStats(lab, mu[i], var[i]) for i, lab in enumerate(labels))
    return PcaModel("T", U, np.ones(P), np.ones(V), np.eye(V), np.zeros(V), stats)


# ---------------------------------------------------------------------------
# gaussian component


def test_gaussian_standard_normal_at_one():
    m = model_with([0.0], [1.0])
    assert gaussian_component(m, np.array([1.0]), "a") == pytest.approx(-0.5 * (1 + math.log(2 * math.pi)), abs=1e-12)
    assert gaussian_component(m, np.array([1.0]), "a") == pytest.approx(-1.41894, abs=1e-5)


def test_gaussian_maximum_at_mean():
    var = np.array([0.5, 2.0, 3.0])
    m = model_with([1.0, -2.0, 0.5], var)
    peak = gaussian_component(m, np.array([1.0, -2.0, 0.5]), "a")
    assert peak == pytest.approx(-0.5 * np.sum(np.log(2 * np.pi * var)), abs=1e-12)
    assert gaussian_component(m, np.array([1.1, -2.0, 0.5]), "a") < peak


def test_gaussian_missing_class():
    with pytest.raises(KeyError):
        gaussian_component(model_with([0.0], [1.0]), np.array([0.0]), "b")


@given(st.integers(0, 10_000), st.integers(1, 4))
@settings(max_examples=80, deadline=None)
def test_gaussian_matches_density_product(seed, V):
    rng = np.random.default_rng(seed)
    mu, var = rng.normal(size=V), rng.uniform(0.2, 3, size=V)
    P = int(rng.integers(1, V + 1))
    Q, _ = np.linalg.qr(rng.normal(size=(V, V)))
    U, mean = Q[:, :P], rng.normal(size=V)
    m = PcaModel("T", U, np.ones(P), np.ones(V), np.eye(V), mean, (ClassStats("a", mu, var),))
    x = rng.normal(size=P)
    s_hat = [sum(U[v, p] * x[p] for p in range(P)) + mean[v] for v in range(V)]
    dens = 1.0
    for v in range(V):
        dens *= math.exp(-((s_hat[v] - mu[v]) ** 2) / (2 * var[v])) / math.sqrt(2 * math.pi * var[v])
    assert abs(gaussian_component(m, x, "a") - math.log(dens)) < 1e-10


def test_gaussian_components_sums_devices():
    m1 = model_with([[0.0], [1.0]], [[1.0], [1.0]], labels=("a", "b"))
    m2 = model_with([[2.0], [0.0]], [[0.5], [2.0]], labels=("a", "b"))
    feats = {"d1": np.array([0.3]), "d2": np.array([1.2])}
    got = gaussian_components({"d1": m1, "d2": m2}, feats, ["a", "b"])
    want = [gaussian_component(m1, feats["d1"], lab) + gaussian_component(m2, feats["d2"], lab) for lab in "ab"]
    np.testing.assert_allclose(got, want, atol=1e-12)
    with pytest.raises(KeyError, match="no model for device"):
        gaussian_components({"d1": m1}, feats, ["a", "b"])


# ---------------------------------------------------------------------------
# posterior


def test_posterior_examples():
    np.testing.assert_allclose(posterior([0.5, 0.5], [[0.0], [math.log(3)]]), [0.25, 0.75], atol=1e-15)
    p = posterior([1 / 3] * 3, np.full((3, 2), -4.0))
    np.testing.assert_allclose(p, [1 / 3] * 3, atol=1e-15)


def test_infer_tie_goes_to_lowest_index():
    task = make_task(("x", "y", "z"))
    batch = FeatureBatch("T1", 0, {"g1": np.zeros(2)})
    est = infer(task, batch, np.zeros((3, 1)))
    assert est.estimate == 0 and est.label == "x"


def test_no_evidence():
    with pytest.raises(NoEvidenceError, match="no evidence"):
        posterior([0.5, 0.5], np.full((2, 2), -np.inf))
    # extreme but finite logs never underflow in the log domain
    p = posterior([0.5, 0.5], [[-1e6], [-1e6 - 1]])
    assert np.all(np.isfinite(p))


def test_posterior_input_errors():
    with pytest.raises(ValueError):
        posterior([0.5, 0.5], np.zeros((3, 1)))
    with pytest.raises(ValueError):
        posterior([0.5, 0.5], [[np.nan], [0.0]])


instances = st.tuples(st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**32 - 1))


def random_instance(K, E, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.05, 1, size=K)
    return a / a.sum(), rng.uniform(-20, 20, size=(K, E))


@given(instances, st.sampled_from(["sum", "product"]))
@settings(max_examples=200, deadline=None)
def test_posterior_matches_naive_oracle(inst, combine):
    a, G = random_instance(*inst)
    # product over three gateways spans up to exp(60); still representable
    got = posterior(a, G, combine)
    np.testing.assert_allclose(got, naive_posterior(a.tolist(), G.tolist(), combine), atol=1e-10)
    assert abs(got.sum() - 1) < 1e-9 and np.all((got >= 0) & (got <= 1))


@given(instances, st.floats(-500, 500))
@settings(max_examples=100, deadline=None)
def test_common_shift_invariance(inst, c):
    a, G = random_instance(*inst)
    p0, p1 = posterior(a, G), posterior(a, G + c)
    np.testing.assert_allclose(p0, p1, atol=1e-9)
    assert np.argmax(p0) == np.argmax(p1)


@given(instances, st.integers(0, 3), st.floats(1.01, 10))
@settings(max_examples=100, deadline=None)
def test_prior_monotonicity(inst, k, factor):
    a, G = random_instance(*inst)
    k = k % len(a)
    b = a.copy()
    b[k] = min(a[k] * factor, 0.999)
    rest = [i for i in range(len(a)) if i != k]
    if rest:
        b[rest] = a[rest] * (1 - b[k]) / a[rest].sum()
    else:
        b[k] = 1.0
    assert posterior(b, G)[k] >= posterior(a, G)[k] - 1e-12


def test_infer_shape_check_and_json():
    task = make_task()
    batch = FeatureBatch("T1", 600, {"g1": np.zeros(2), "g2": np.zeros(2)})
    with pytest.raises(ValueError, match="components shape"):
        infer(task, batch, np.zeros((2, 1)))
    est = infer(task, batch, np.array([[0.0, 0.0], [math.log(3), math.log(3)]]), seq=4)
    doc = est.to_json()
    assert doc == {
        "task_id": "T1",
        "gw_ids": ["g1", "g2"],
        "timestamp_ms": 600,
        "estimate": "occupied",
        "posteriors": {"empty": pytest.approx(0.25), "occupied": pytest.approx(0.75)},
        "seq": 4,
    }


def test_feature_batch_validation():
    with pytest.raises(ValueError):
        FeatureBatch("T", 0, {})
    with pytest.raises(ValueError, match="non-finite"):
        FeatureBatch("T", 0, {"g": np.array([np.nan])})
    with pytest.raises(ValueError, match="non-finite"):
        FeatureBatch("T", 0, {"g": {"d": np.array([np.inf])}})


def test_detect_occupancy_and_prior_dominance():
    G = np.array([[0.0], [0.1]])
    batch = FeatureBatch("T1", 0, {"g": np.zeros(1)})
    lab, est = detect_occupancy(make_task(priors=(0.99, 0.01)), batch, G)
    assert lab == "empty"
    lab2, _ = detect_occupancy(make_task(priors=(0.01, 0.99)), batch, G)
    assert lab2 == "occupied"
    lab3, est3 = detect_occupancy(make_task(), batch, np.array([[0.0], [-5.0]]))
    assert lab3 == "empty" and est3.posteriors[0] >= 0.5
    with pytest.raises(ValueError):
        detect_occupancy(make_task(("a", "b", "c"), "localization"), batch, np.zeros((3, 1)))


# ---------------------------------------------------------------------------
# KNN


def test_knn_unanimous_vote():
    X = np.vstack([np.zeros((6, 2)), np.full((6, 2), 10.0)])
    clf = KnnClassifier.fit(X, ["A"] * 6 + ["B"] * 6, k=6)
    g = knn_components(clf, np.zeros(2))
    assert g[0] == pytest.approx(0.0, abs=1e-9)
    assert g[1] == pytest.approx(math.log(KNN_EPS / (6 + 2 * KNN_EPS)))
    assert knn_component(clf, np.zeros(2), "B") == g[1]


def test_knn_self_match_with_k1(rng):
    X = rng.normal(size=(20, 3))
    y = [f"c{i % 4}" for i in range(20)]
    clf = KnnClassifier.fit(X, y, k=1)
    for i in range(20):
        assert clf.neighbors(X[i])[0] == i
        assert clf.predict(X[i]) == y[i]


def test_knn_errors(rng):
    X = rng.normal(size=(5, 2))
    with pytest.raises(ValueError):
        KnnClassifier.fit(X, list("aabbb"), k=6)
    clf = KnnClassifier.fit(X, list("aabbb"), k=3)
    with pytest.raises(ValueError, match="dimension mismatch"):
        clf.neighbors(np.zeros(3))
    with pytest.raises(ValueError, match="untrained"):
        knn_components(None, np.zeros(2))


def test_knn_distance_ties_follow_insertion_order():
    X = np.array([[1.0], [-1.0], [1.0], [-1.0], [2.0]])
    clf = KnnClassifier.fit(X, list("abcde"), k=4)
    assert clf.neighbors(np.array([0.0])).tolist() == [0, 1, 2, 3]


@given(st.integers(0, 10_000), st.integers(7, 60), st.integers(1, 4))
@settings(max_examples=60, deadline=None)
def test_knn_matches_brute_force(seed, n, d):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d)) * rng.uniform(0.1, 10, size=d)
    y = [str(v) for v in rng.integers(0, 3, size=n)]
    clf = KnnClassifier.fit(X, y, k=6)
    for q in rng.normal(size=(5, d)) * 3:
        assert clf.neighbors(q).tolist() == naive_knn(X, y, q, 6)


@given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(-50, 50))
@settings(max_examples=60, deadline=None)
def test_knn_affine_rescaling_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    X = rng.integers(-20, 20, size=(30, 3)).astype(float)
    y = [str(v) for v in rng.integers(0, 3, size=30)]
    Q = rng.integers(-25, 25, size=(5, 3)).astype(float)
    X2, Q2 = X.copy(), Q.copy()
    X2[:, 1] = a * X2[:, 1] + b
    Q2[:, 1] = a * Q2[:, 1] + b
    c1, c2 = KnnClassifier.fit(X, y), KnnClassifier.fit(X2, y)
    for q, q2 in zip(Q, Q2):
        assert c1.predict(q) == c2.predict(q2)


def test_knn_json_round_trip(rng):
    clf = KnnClassifier.fit(rng.normal(size=(12, 3)), list("abc") * 4, k=3)
    back = KnnClassifier.from_json(clf.to_json())
    for q in rng.normal(size=(10, 3)):
        assert back.neighbors(q).tolist() == clf.neighbors(q).tolist()


# ---------------------------------------------------------------------------
# metrics


def test_detection_metrics_examples():
    assert detection_metrics([0, 1, 1, 0], [0, 1, 1, 0]) == {
        "sensitivity": 1.0,
        "fpr": 0.0,
        "accuracy": 1.0,
        "specificity": 1.0,
    }
    assert detection_metrics([1, 1, 1, 1], [0, 0, 1, 1]) == {
        "sensitivity": 1.0,
        "fpr": 1.0,
        "accuracy": 0.5,
        "specificity": 0.0,
    }
    m = detection_metrics([0, 0], [0, 0])
    assert m["sensitivity"] is None and m["specificity"] == 1.0
    with pytest.raises(ValueError):
        detection_metrics([0], [0, 1])
    with pytest.raises(ValueError):
        detection_metrics([2], [0])


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=50))
def test_detection_metrics_against_counts(pairs):
    d, t = zip(*pairs)
    m = detection_metrics(d, t)
    tp = sum(1 for a, b in pairs if a == b == 1)
    tn = sum(1 for a, b in pairs if a == b == 0)
    assert m["accuracy"] == (tp + tn) / len(pairs)
    if m["fpr"] is not None:
        assert m["fpr"] + m["specificity"] == pytest.approx(1.0)


def test_localization_rmse():
    cells = {"c0": (0.0, 0.0), "c1": (1.0, 0.0), "c2": (2.0, 0.0)}
    assert localization_rmse(["c0", "c1"], ["c0", "c1"], cells) == 0.0
    assert localization_rmse(["c1", "c2", "c0"], ["c0", "c1", "c1"], cells) == pytest.approx(1.0)
    with pytest.raises(KeyError, match="unknown cell"):
        localization_rmse(["c9"], ["c0"], cells)


# ---------------------------------------------------------------------------
# cross validation


def test_stratified_folds_balanced():
    y = ["a"] * 23 + ["b"] * 17 + ["c"] * 10
    f = stratified_folds(y, 10)
    for lab, n in (("a", 23), ("b", 17), ("c", 10)):
        counts = np.bincount(f[np.array(y) == lab], minlength=10)
        assert counts.max() - counts.min() <= 1 and counts.sum() == n
    assert np.array_equal(f, stratified_folds(y, 10))
    with pytest.raises(ValueError, match="fewer than"):
        stratified_folds(["a"] * 3 + ["b"] * 20, 10)


def test_cross_validate_separable(rng):
    X = np.vstack([rng.normal(m, 1.0, size=(30, 2)) for m in (0.0, 10.0, 20.0)])
    y = ["a"] * 30 + ["b"] * 30 + ["c"] * 30
    res = cross_validate(X, y, folds=10)
    assert res.accuracy == 1.0
    assert np.array_equal(res.confusion, np.diag([30, 30, 30]))


def test_cross_validate_chance_level(rng):
    n = 300
    y = [("a", "b", "c")[i % 3] for i in range(n)]
    res = cross_validate(np.zeros((n, 2)), y, folds=10)
    # with identical features every vote is a distance tie, so accuracy sits near one third
    assert abs(res.accuracy - 1 / 3) < 4 * math.sqrt((1 / 3) * (2 / 3) / n)
    assert res.confusion.sum() == n
    with pytest.raises(ValueError):
        cross_validate(np.zeros((4, 1)), list("aabb"), folds=1)
