import numpy as np
import pytest
from scipy.stats import energy_distance

from tabdiffusion.data import two_class_blobs
from tabdiffusion.errors import ConfigError, ContractError
from tabdiffusion.guidance import (GuidanceClassifier, conditional_sample, guided_epsilon,
                                   log_prob_grad, train_classifier)
from tabdiffusion.sampler import SampleConfig, sample
from tabdiffusion.schedule import linear_schedule
from tabdiffusion.trainer import TrainConfig

from gradcheck import numeric_grad, rel_err


def _logistic(w, b=0.0, time_conditioned=False):
    clf = GuidanceClassifier(len(w), 2, "logistic", time_conditioned=time_conditioned)
    d_in = clf.params["linear.w"].data.shape[0]
    W = np.zeros((d_in, 1))
    W[: len(w), 0] = w
    clf.params.assign("linear.w", W)
    clf.params.assign("linear.b", np.array([b]))
    return clf


def _randomize(clf, seed):
    rng = np.random.default_rng(seed)
    for name, p in clf.params.items():
        clf.params.assign(name, rng.normal(scale=0.5, size=p.data.shape))
    return clf


class ConstModel:
    """eps_theta that ignores its input; enough to isolate the guidance term."""
    feature_dim = 2

    def __init__(self, value=0.0):
        self.value = value

    def predict(self, x, t):
        return np.full(np.shape(x), self.value)


@pytest.fixture(scope="module")
def blobs():
    return two_class_blobs(2000, dim=2, separation=4.0, seed=0), two_class_blobs(1000, dim=2, separation=4.0, seed=1)


class TestLogProbGrad:
    def test_hand_value(self):
        g = log_prob_grad(_logistic([1.0, 0.0]), np.zeros(2), 1, 1)
        np.testing.assert_allclose(g, [0.5, 0.0], atol=1e-15)

    def test_saturated(self):
        g = log_prob_grad(_logistic([1.0, 0.0]), np.array([60.0, 0.0]), 1, 1)
        assert np.abs(g).max() < 1e-20

    def test_other_label_sign(self):
        g = log_prob_grad(_logistic([1.0, 0.0]), np.zeros(2), 1, 0)
        np.testing.assert_allclose(g, [-0.5, 0.0], atol=1e-15)

    @pytest.mark.parametrize("classes, tc", [(2, False), (2, True), (3, True)])
    def test_analytic_equals_tape(self, classes, tc):
        clf = _randomize(GuidanceClassifier(4, classes, "logistic", time_conditioned=tc, embed_dim=6), 1)
        x = np.random.default_rng(2).normal(size=(7, 4))
        y = np.arange(7) % classes
        a = log_prob_grad(clf, x, 13, y)
        b = log_prob_grad(clf, x, 13, y, method="tape")
        assert np.abs(a - b).max() <= 1e-12

    def test_mlp_finite_difference(self):
        clf = _randomize(GuidanceClassifier(3, 3, "mlp", hidden=8, embed_dim=4), 3)
        x = np.random.default_rng(4).normal(size=(4, 3))
        y = np.array([0, 1, 2, 1])
        g = log_prob_grad(clf, x, 9, y)

        def f(arrs):
            return float(np.sum(clf.log_probs(arrs["x"], 9).data[np.arange(4), y]))
        assert rel_err(g, numeric_grad(f, {"x": x}, "x")) <= 1e-4

    def test_bad_label(self):
        with pytest.raises(ContractError):
            log_prob_grad(_logistic([1.0, 0.0]), np.zeros(2), 1, 2)


class TestGuidedEpsilon:
    sched = linear_schedule(50)

    def test_scale_zero_and_zero_gradient(self):
        x = np.random.default_rng(5).normal(size=(3, 2))
        m = ConstModel(0.3)
        assert np.array_equal(guided_epsilon(m, _logistic([1.0, 0.0]), self.sched, x, 10, 1, 0.0), m.predict(x, 10))
        assert np.array_equal(guided_epsilon(m, _logistic([0.0, 0.0]), self.sched, x, 10, 1), m.predict(x, 10))

    def test_linear_in_scale(self):
        x = np.random.default_rng(6).normal(size=(3, 2))
        m, clf = ConstModel(0.1), _logistic([0.7, -0.3], 0.2)
        base = m.predict(x, 20)
        d1 = guided_epsilon(m, clf, self.sched, x, 20, 1, 1.0) - base
        d2 = guided_epsilon(m, clf, self.sched, x, 20, 1, 2.0) - base
        np.testing.assert_allclose(d2, 2 * d1, rtol=1e-15, atol=1e-17)
        expected = -np.sqrt(1 - self.sched.ab(20)) * log_prob_grad(clf, x, 20, 1)
        np.testing.assert_allclose(d1, expected, rtol=1e-14)

    def test_sign_pushes_towards_label(self):
        sched = linear_schedule(50)
        clf = _logistic([2.0])
        m = ConstModel()
        m.feature_dim = 1
        x = np.linspace(-2, 2, 9)[:, None]
        eps = guided_epsilon(m, clf, sched, x, 25, 1)
        assert np.all(eps < 0)  # smaller eps means a larger predicted x0
        assert np.all(guided_epsilon(m, clf, sched, x, 25, 0) > 0)


class TestTrainClassifier:
    def test_separable_accuracy(self, blobs):
        train, held = blobs
        sched = linear_schedule(200)
        clf = train_classifier(train.features, train.labels, sched,
                               TrainConfig(lr=0.01, max_steps=600, batch_size=128))
        assert np.mean(clf.predict(held.features, 1) == held.labels) > 0.9
        p = clf.predict_proba(held.features, 100)
        assert np.all(p > 0) and np.abs(p.sum(axis=1) - 1).max() <= 1e-12

    def test_mlp_kind(self, blobs):
        train, held = blobs
        clf = train_classifier(train.features, train.labels, linear_schedule(200),
                               TrainConfig(lr=0.01, max_steps=400, batch_size=128), kind="mlp")
        assert np.mean(clf.predict(held.features, 1) == held.labels) > 0.9

    def test_shuffled_labels_near_chance(self, blobs):
        train, held = blobs
        y = np.random.default_rng(7).permutation(train.labels)
        clf = train_classifier(train.features, y, linear_schedule(200),
                               TrainConfig(lr=0.01, max_steps=400, batch_size=128))
        assert abs(np.mean(clf.predict(held.features, 1) == held.labels) - 0.5) <= 0.1

    def test_seeded(self, blobs):
        train, _ = blobs
        cfg = TrainConfig(lr=0.01, max_steps=50, batch_size=64, seed=3)
        a = train_classifier(train.features, train.labels, linear_schedule(200), cfg, kind="mlp")
        b = train_classifier(train.features, train.labels, linear_schedule(200), cfg, kind="mlp")
        for name, p in a.params.items():
            assert np.array_equal(p.data, b.params[name].data)

    def test_single_class(self):
        with pytest.raises(ConfigError):
            train_classifier(np.zeros((5, 2)), np.ones(5), None, TrainConfig(max_steps=1))

    def test_bad_kind(self):
        with pytest.raises(ConfigError):
            GuidanceClassifier(2, 2, "forest")


class TestConditionalSample:
    def test_scale_zero_is_unconditional(self, two_mode_model, sched):
        clf = _logistic([3.0])
        cfg = SampleConfig(mode="ddim", seed=4)
        for k in (0, 3):
            guided, _ = conditional_sample(two_mode_model, clf, sched, cfg, 1, 50, k=k, scale=0.0)
            plain, _ = conditional_sample(two_mode_model, None, sched, cfg, 1, 50, k=k, scale=0.0)
            assert np.array_equal(guided, plain)
        assert np.array_equal(conditional_sample(two_mode_model, clf, sched, cfg, 1, 50, k=0, scale=0.0)[0],
                              sample(two_mode_model, sched, cfg, 50).x)

    def test_scale_zero_energy_distance(self, two_mode_model, sched):
        """Fresh-seed unconditional draws are indistinguishable from scale-0 guided draws."""
        clf = _logistic([3.0])
        a, _ = conditional_sample(two_mode_model, clf, sched, SampleConfig(mode="ddim", seed=10),
                                  1, 1000, k=0, scale=0.0)
        b = sample(two_mode_model, sched, SampleConfig(mode="ddim", seed=11), 1000).x
        a, b = a[:, 0], b[:, 0]
        stat = energy_distance(a, b)
        rng = np.random.default_rng(0)
        pooled = np.concatenate([a, b])
        null = []
        for _ in range(199):
            perm = rng.permutation(pooled)
            null.append(energy_distance(perm[:1000], perm[1000:]))
        p_value = (1 + np.sum(np.array(null) >= stat)) / 200
        assert p_value > 0.01

    def test_guidance_moves_mass(self, two_mode_model, sched):
        clf = _logistic([3.0])
        cfg = SampleConfig(mode="ddim", seed=12)
        base = np.mean(sample(two_mode_model, sched, cfg, 500).x[:, 0] > 0)
        share = {y: np.mean(conditional_sample(two_mode_model, clf, sched, cfg, y, 500, k=0)[0] > 0)
                 for y in (0, 1)}
        assert share[1] > base + 0.15 and share[0] < base - 0.15


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="desk-scale denoiser leaves guided class means about 0.5 sigma "
                                       "from the training means; see the decisions ledger")
@pytest.mark.parametrize("k", [0, 3])
def test_guided_class_means_match_training(blob_setup, sched, k):
    ds, model, clf = blob_setup
    for y in (0, 1):
        x, _ = conditional_sample(model, clf, sched, SampleConfig(mode="ddim", seed=20 + y), y, 1000, k=k)
        cls = ds.features[ds.labels == y]
        gap = np.abs(x.mean(axis=0) - cls.mean(axis=0)) / cls.std(axis=0)
        assert gap.max() <= 0.2
