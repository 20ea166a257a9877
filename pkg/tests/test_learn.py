import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from mqttforensics.flows import N_FEATURES
from mqttforensics.learn import (
    BINARY_CLASSES,
    MULTICLASS_CLASSES,
    CorruptModelError,
    Dataset,
    DatasetError,
    DecisionTreeClassifier,
    DivergenceError,
    FeatureMismatchError,
    FeatureScaler,
    GaussianNB,
    GradientBoostingClassifier,
    LinearSVC,
    MLPClassifier,
    ModelError,
    ModelFormatError,
    ModelKind,
    RandomForestClassifier,
    RandomOverSampler,
    RandomUnderSampler,
    UnsupportedVersionError,
    load_model,
    oversample,
    predict,
    save_model,
    train,
    undersample,
)
from mqttforensics.learn._tree import Binner, splitmix64
from mqttforensics.learn.model import model_from_bytes, model_to_bytes
from mqttforensics.learn.neural import loss_and_grads

FAST = {
    "rf": {"n_estimators": 10},
    "gbt": {"n_estimators": 10},
    "mlp": {"n_epochs": 5},
}


@pytest.fixture(scope="module")
def multi(small_flows):
    return Dataset.from_flows(small_flows, "multi")


@pytest.fixture(scope="module")
def binary(small_flows):
    return Dataset.from_flows(small_flows, "binary")


def toy(n_classes=3, n=150, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, n_classes, n)
    X = rng.normal(size=(n, N_FEATURES)) + 4.0 * y[:, None] * (np.arange(N_FEATURES) < 3)
    return Dataset(X, y, MULTICLASS_CLASSES, "multi")


# -- resampling --------------------------------------------------------------

def counts_dataset(counts, seed=0):
    rng = np.random.default_rng(seed)
    y = np.concatenate([np.full(n, c) for c, n in enumerate(counts)])
    X = rng.normal(size=(len(y), N_FEATURES))
    return Dataset(X, y, MULTICLASS_CLASSES, "multi")


@pytest.mark.parametrize("counts, under, over", [
    ((100, 10), (10, 10), (100, 100)),
    ((5, 3, 8), (3, 3, 3), (8, 8, 8)),
    ((7, 7), (7, 7), (7, 7)),
])
def test_resampling_counts(counts, under, over):
    d = counts_dataset(counts)
    assert tuple(np.bincount(undersample(d, 1).y)) == under
    assert tuple(np.bincount(oversample(d, 1).y)) == over


def test_resampling_rows_come_from_their_class():
    d = counts_dataset((40, 6, 13))
    originals = {(tuple(x), c) for x, c in zip(d.X, d.y)}
    for r in (undersample(d, 3), oversample(d, 3)):
        assert all((tuple(x), c) in originals for x, c in zip(r.X, r.y))
    u = undersample(d, 3)
    assert len({tuple(x) for x in u.X}) == len(u)


def test_balanced_input_unchanged():
    d = counts_dataset((7, 7))
    o = oversample(d, 0)
    np.testing.assert_array_equal(o.X, d.X)
    u = undersample(d, 0)
    assert sorted(map(tuple, u.X)) == sorted(map(tuple, d.X))


def test_resampling_determinism_and_errors():
    d = counts_dataset((30, 4))
    np.testing.assert_array_equal(undersample(d, 5).X, undersample(d, 5).X)
    assert not np.array_equal(oversample(d, 5).X, oversample(d, 6).X)
    empty = Dataset(np.empty((0, N_FEATURES)), np.empty(0), MULTICLASS_CLASSES, "multi")
    with pytest.raises(DatasetError):
        undersample(empty)
    with pytest.raises(DatasetError):
        oversample(empty)


def test_sampler_estimator_api():
    d = counts_dataset((20, 5))
    s = RandomUnderSampler(random_state=4)
    assert s.get_params() == {"random_state": 4}
    X, y = s.fit_resample(d.X, d.y)
    np.testing.assert_array_equal(X, d.X[s.sample_indices_])
    X, y = RandomOverSampler(random_state=4).fit_resample(d.X, d.y)
    assert np.bincount(y).tolist() == [20, 20]


def test_dataset_validation():
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, N_FEATURES)), [0, 3], BINARY_CLASSES, "binary")
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, N_FEATURES)), [0, 1], ("A", "B"), "binary")
    with pytest.raises(DatasetError):
        Dataset(np.full((2, N_FEATURES), np.inf), [0, 1], BINARY_CLASSES, "binary")
    with pytest.raises(DatasetError):
        Dataset(np.zeros((3, N_FEATURES)), [0, 1], BINARY_CLASSES, "binary")


def test_binary_collapse(small_flows, binary):
    assert binary.class_names == BINARY_CLASSES
    assert binary.y.sum() == sum(f.label != 0 for f in small_flows)


# -- Gaussian naive Bayes ---------------------------------------------------

def test_nb_closed_form():
    X = np.array([[0.0], [2.0], [10.0], [12.0]])
    nb = GaussianNB().fit(X, ["A", "A", "B", "B"])
    # population variance of all X is 26, within-class variance is 1
    np.testing.assert_allclose(nb.theta_, [[1.0], [11.0]], atol=1e-9, rtol=0)
    np.testing.assert_allclose(nb.var_, [[1 + 26e-9], [1 + 26e-9]], atol=1e-9, rtol=0)
    np.testing.assert_allclose(nb.class_prior_, [0.5, 0.5], atol=1e-9, rtol=0)
    assert nb.epsilon_ == pytest.approx(26e-9, rel=1e-12)


def test_nb_midpoint_is_uncertain():
    X = np.array([[0.0], [2.0], [10.0], [12.0]])
    nb = GaussianNB().fit(X, [0, 0, 1, 1])
    np.testing.assert_allclose(nb.predict_proba([[6.0]]), [[0.5, 0.5]], atol=1e-9, rtol=0)


def test_nb_log_density_by_hand():
    X = np.array([[0.0, 1.0], [2.0, 3.0], [4.0, 9.0], [6.0, 5.0], [5.0, 5.0]])
    y = np.array([0, 0, 1, 1, 1])
    nb = GaussianNB().fit(X, y)
    q = np.array([1.5, 4.0])
    eps = 1e-9 * max(np.var(X[:, 0]), np.var(X[:, 1]))
    logp = []
    for c in (0, 1):
        Xc = X[y == c]
        mu, var = Xc.mean(axis=0), Xc.var(axis=0) + eps
        lp = np.log(len(Xc) / len(X))
        for j in range(2):
            lp += -0.5 * np.log(2 * np.pi * var[j]) - (q[j] - mu[j]) ** 2 / (2 * var[j])
        logp.append(lp)
    expected = np.exp(logp - np.max(logp))
    expected /= expected.sum()
    np.testing.assert_allclose(nb.predict_proba([q])[0], expected, atol=1e-12)


# -- CART -------------------------------------------------------------------

def gini_of(labels):
    if len(labels) == 0:
        return 0.0
    _, n = np.unique(labels, return_counts=True)
    p = n / len(labels)
    return 1.0 - float((p ** 2).sum())


def exhaustive_root_split(X, y):
    """Minimum weighted Gini over every feature and every threshold."""
    best = (np.inf, None, None)
    for f in range(X.shape[1]):
        vals = np.unique(X[:, f])
        for lo, hi in zip(vals, vals[1:]):
            left = X[:, f] <= lo
            imp = (left.sum() * gini_of(y[left]) + (~left).sum() * gini_of(y[~left])) / len(y)
            if imp < best[0] - 1e-12:
                best = (imp, f, (lo, hi))
    return best


@settings(max_examples=150, deadline=None)
@given(st.integers(2, 50).flatmap(lambda n: st.tuples(
    st.lists(st.lists(st.integers(0, 6), min_size=1, max_size=3).map(tuple), min_size=n, max_size=n)
    .filter(lambda rows: len({len(r) for r in rows}) == 1),
    st.lists(st.integers(0, 2), min_size=n, max_size=n))))
def test_dt_root_split_is_gini_optimal(data):
    rows, labels = data
    X = np.array(rows, dtype=float)
    y = np.array(labels)
    tree = DecisionTreeClassifier().fit(X, y).tree_
    best_imp, best_f, best_gap = exhaustive_root_split(X, y)
    if tree.feature[0] < 0:
        # a leaf root means the node is pure or no split reduces impurity
        assert len(np.unique(y)) == 1 or best_f is None or best_imp >= gini_of(y) - 1e-12
        return
    f, thr = tree.feature[0], tree.threshold[0]
    left = X[:, f] <= thr
    imp = (left.sum() * gini_of(y[left]) + (~left).sum() * gini_of(y[~left])) / len(y)
    assert imp <= best_imp + 1e-12
    assert f == best_f and best_gap[0] <= thr < best_gap[1]


def test_dt_threshold_data_depth_one():
    X = np.array([[0.0], [1.0], [2.0], [5.0], [6.0], [7.0]])
    y = np.array([0, 0, 0, 1, 1, 1])
    dt = DecisionTreeClassifier().fit(X, y)
    assert dt.tree_.depth == 1 and dt.tree_.threshold[0] == 3.5
    assert (dt.predict(X) == y).all()


def test_dt_tie_breaks_to_lowest_feature():
    X = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0]])
    dt = DecisionTreeClassifier().fit(X, [0, 0, 1, 1])
    assert dt.tree_.feature[0] == 0


def test_dt_memorizes_training_set(multi):
    m = train("dt", multi)
    labels, _ = predict(m, multi.X)
    dup = {}
    for x, c in zip(map(tuple, multi.X), multi.y):
        dup.setdefault(x, set()).add(c)
    consistent = np.array([len(dup[tuple(x)]) == 1 for x in multi.X])
    assert (labels[consistent] == multi.y[consistent]).all()


def test_dt_sample_weight_equals_duplication():
    rng = np.random.default_rng(1)
    X = rng.integers(0, 5, size=(40, 3)).astype(float)
    y = rng.integers(0, 3, 40)
    w = rng.integers(1, 4, 40)
    a = DecisionTreeClassifier().fit(X, y, sample_weight=w)
    b = DecisionTreeClassifier().fit(np.repeat(X, w, axis=0), np.repeat(y, w))
    np.testing.assert_array_equal(a.predict_proba(X), b.predict_proba(X))


def test_degenerate_forest_equals_tree(multi):
    rf = RandomForestClassifier(n_estimators=1, bootstrap=False, max_features=None,
                                random_state=3).fit(multi.X, multi.y)
    dt = DecisionTreeClassifier(random_state=3).fit(multi.X, multi.y)
    np.testing.assert_array_equal(rf.predict(multi.X), dt.predict(multi.X))
    rng = np.random.default_rng(0)
    probe = rng.normal(size=(500, N_FEATURES)) * multi.X.std(axis=0) + multi.X.mean(axis=0)
    np.testing.assert_array_equal(rf.predict(probe), dt.predict(probe))


def test_forest_vote_shares(multi):
    m = train("rf", multi, {"n_estimators": 20})
    _, scores = predict(m, multi.X[:200])
    np.testing.assert_allclose(scores.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.isclose(scores * 20, np.round(scores * 20)))


def test_splitmix_reference_values():
    # first outputs of the reference splitmix64 generator seeded with 0
    assert splitmix64(0, 0) == 0xE220A8397B1DCDAF
    assert splitmix64(0, 1) == 0x6E789E6AA1B965F4


# -- gradient boosting -------------------------------------------------------

@pytest.mark.parametrize("mode", ["binary", "multi"])
def test_gbt_loss_non_increasing(mode, small_flows):
    d = Dataset.from_flows(small_flows, mode)
    gbt = GradientBoostingClassifier(n_estimators=40).fit(FeatureScaler().fit_transform(d.X), d.y)
    curve = np.array(gbt.loss_curve_)
    assert len(curve) == 41
    assert np.all(np.diff(curve) <= 1e-9)


def test_gbt_single_stump_newton_value():
    X = np.array([[0.0], [0.0], [1.0], [1.0]])
    y = np.array([0, 0, 1, 1])
    gbt = GradientBoostingClassifier(n_estimators=1, learning_rate=1.0, max_depth=1,
                                     min_child_weight=0.0).fit(X, y)
    # base score log(1) = 0 so p = 0.5: g = 0.5 - y, h = 0.25 per row
    leaf_right = -(2 * -0.5) / (2 * 0.25 + 1.0)
    np.testing.assert_allclose(gbt.decision_function([[1.0]])[0, 0], leaf_right, atol=1e-12)
    np.testing.assert_allclose(gbt.decision_function([[0.0]])[0, 0], -leaf_right, atol=1e-12)


def test_binner_prefers_dense_regions():
    x = np.concatenate([np.linspace(0, 0.01, 900), np.linspace(1, 1000, 900)])[:, None]
    b = Binner(16).fit(x)
    assert len(b.cuts_[0]) <= 15
    assert (b.cuts_[0] < 0.01).sum() >= 5
    np.testing.assert_array_equal(Binner(256).fit(np.array([[1.0], [3.0]])).cuts_[0], [2.0])


# -- MLP -----------------------------------------------------------------------

def test_mlp_gradient_check():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(10, 5))
    Y = np.eye(3)[rng.integers(0, 3, 10)]
    params = [rng.normal(0, 0.5, (5, 8)), rng.normal(0, 0.1, 8),
              rng.normal(0, 0.5, (8, 3)), rng.normal(0, 0.1, 3)]
    _, grads = loss_and_grads(params, X, Y)
    h = 1e-5
    worst = 0.0
    for p, g in zip(params, grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss_and_grads(params, X, Y)[0]
            p[idx] = old - h
            down = loss_and_grads(params, X, Y)[0]
            p[idx] = old
            numeric = (up - down) / (2 * h)
            rel = abs(numeric - g[idx]) / max(abs(numeric) + abs(g[idx]), 1e-8)
            worst = max(worst, rel)
    assert worst <= 1e-4


def test_mlp_full_batch_loss_non_increasing():
    d = toy(n=120)
    X = FeatureScaler().fit_transform(d.X)
    mlp = MLPClassifier(batch_size=len(X), n_epochs=50).fit(X, d.y)
    assert np.all(np.diff(mlp.loss_curve_) <= 1e-12)
    assert mlp.final_loss_ < mlp.loss_curve_[0]


def test_mlp_divergence_names_epoch():
    d = toy()
    with pytest.raises(DivergenceError) as err:
        MLPClassifier(learning_rate=1e12, n_epochs=5).fit(d.X * 1e3, d.y)
    assert 1 <= err.value.epoch <= 5
    assert f"epoch {err.value.epoch}" in str(err.value)


# -- linear SVM --------------------------------------------------------------

def test_svm_separable_toy():
    rng = np.random.default_rng(2)
    pts = rng.uniform(-1, 1, size=(200, 2))
    pts = pts[np.abs(pts[:, 0] + pts[:, 1]) > 0.3]
    y = (pts[:, 0] + pts[:, 1] > 0).astype(int)
    svm = LinearSVC(n_epochs=200, random_state=0).fit(pts, y)
    assert (svm.predict(pts) == y).all()
    grid = np.array(list(itertools.product(np.linspace(-1, 1, 21), repeat=2)))
    margin = np.array([sum(w * x for w, x in zip(svm.coef_[:, 1] - svm.coef_[:, 0], row))
                       + svm.intercept_[1] - svm.intercept_[0] for row in grid])
    np.testing.assert_array_equal(svm.predict(grid), (margin > 0).astype(int))
    far = np.abs(grid.sum(axis=1)) > 0.3
    assert (svm.predict(grid[far]) == (grid[far].sum(axis=1) > 0)).all()


def test_svm_one_vs_rest_argmax():
    # clusters on separate axes so each class is linearly separable from the rest
    rng = np.random.default_rng(0)
    y = rng.integers(0, 3, 300)
    X = rng.normal(size=(300, 5)) + 5.0 * np.eye(5)[y]
    svm = LinearSVC().fit(X, y)
    np.testing.assert_array_equal(svm.predict(X), np.argmax(svm.decision_function(X), axis=1))
    assert (svm.predict(X) == y).mean() > 0.95
    assert svm.final_loss_ > 0


# -- bundle: train / predict / persist ------------------------------------------

@pytest.mark.parametrize("kind", [k.value for k in ModelKind])
def test_scaling_invariance(kind):
    d = toy(n=200, seed=3)
    rng = np.random.default_rng(4)
    a = 2.0 ** rng.integers(-3, 4, N_FEATURES)
    c = rng.integers(-8, 8, N_FEATURES).astype(float)
    moved = Dataset(d.X * a + c, d.y, d.class_names, d.mode)
    test = rng.normal(size=(100, N_FEATURES)) * 2
    m1 = train(kind, d, FAST.get(kind))
    m2 = train(kind, moved, FAST.get(kind))
    np.testing.assert_array_equal(predict(m1, test)[0], predict(m2, test * a + c)[0])


@pytest.mark.parametrize("kind", [k.value for k in ModelKind])
def test_save_load_bit_equal(kind, multi, tmp_path):
    m = train(kind, multi, FAST.get(kind), seed=9)
    path = tmp_path / f"{kind}.mhnt"
    save_model(m, path)
    back = load_model(path)
    probe = np.vstack([multi.X[:300], multi.X[:50] * 1.5 + 0.25])
    l1, s1 = predict(m, probe)
    l2, s2 = predict(back, probe)
    np.testing.assert_array_equal(l1, l2)
    assert s1.tobytes() == s2.tobytes()
    assert back.kind == m.kind and back.class_names == m.class_names and back.train_seed == 9
    assert back.final_loss == m.final_loss


@pytest.mark.parametrize("kind", ["nb", "mlp", "rf", "gbt"])
def test_probabilistic_scores(kind, multi):
    m = train(kind, multi, FAST.get(kind))
    labels, scores = predict(m, multi.X[:500])
    assert scores.shape == (500, len(MULTICLASS_CLASSES))
    np.testing.assert_allclose(scores.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(labels, scores.argmax(axis=1))


def test_scores_cover_absent_classes():
    d = counts_dataset((10, 0, 10))
    m = train("nb", d)
    _, scores = predict(m, d.X)
    assert scores.shape[1] == 7 and (scores[:, 1] == 0).all() and (scores[:, 3:] == 0).all()


def test_training_is_deterministic(multi):
    for kind in ("rf", "mlp", "svm", "gbt"):
        a = predict(train(kind, multi, FAST.get(kind), seed=1), multi.X[:100])[1]
        b = predict(train(kind, multi, FAST.get(kind), seed=1), multi.X[:100])[1]
        assert a.tobytes() == b.tobytes()


def test_losses_recorded(multi):
    for kind in ("mlp", "svm", "gbt"):
        assert np.isfinite(train(kind, multi, FAST.get(kind)).final_loss)
    assert train("nb", multi).final_loss is None


def test_train_errors(multi):
    with pytest.raises(ModelError):
        train("knn", multi)
    with pytest.raises(DatasetError):
        train("dt", counts_dataset((10, 1)))
    with pytest.raises(DatasetError):
        train("dt", counts_dataset((10,)))


def test_feature_count_mismatch(multi):
    m = train("nb", multi)
    with pytest.raises(FeatureMismatchError):
        predict(m, multi.X[:, :23])


def test_model_file_errors(multi, tmp_path):
    data = model_to_bytes(train("nb", multi))
    assert data[:4] == b"MHNT"
    with pytest.raises(CorruptModelError):
        model_from_bytes(data[:-10])
    with pytest.raises(CorruptModelError):
        model_from_bytes(data[:7])
    with pytest.raises(ModelFormatError):
        model_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(UnsupportedVersionError):
        model_from_bytes(data[:4] + (99).to_bytes(2, "little") + data[6:])
    garbled = bytearray(data)
    garbled[20] ^= 0xFF
    with pytest.raises(CorruptModelError):
        model_from_bytes(bytes(garbled))


def test_estimator_api():
    for est in (DecisionTreeClassifier(max_depth=3), RandomForestClassifier(n_estimators=4),
                GradientBoostingClassifier(n_estimators=3), LinearSVC(alpha=0.01),
                GaussianNB(), MLPClassifier(hidden_units=4), FeatureScaler()):
        twin = clone(est)
        assert twin.get_params() == est.get_params()
    d = toy()
    rf = RandomForestClassifier(n_estimators=5).set_params(max_depth=2).fit(d.X, d.y)
    assert max(t.depth for t in rf.estimators_) <= 2
    assert 0 <= rf.score(d.X, d.y) <= 1


def test_scaler_zero_variance():
    X = np.column_stack([np.ones(5), np.arange(5.0)])
    s = FeatureScaler().fit(X)
    assert s.scale_[0] == 1.0
    np.testing.assert_allclose(s.inverse_transform(s.transform(X)), X)
    with pytest.raises(ValueError):
        s.transform(np.ones((2, 3)))
