import warnings

import numpy as np
import pytest

from transferrisk import attacks as K
from transferrisk import zoo
from transferrisk.errors import ConfigError, DegenerateInputError

PGD = K.AttackConfig("pgd", 0.1, 0.01, 20)


@pytest.fixture(scope="module")
def attack_data(blobs):
    x, y = blobs.test()
    return x, y


def threshold_model():
    """1-D two-class model predicting class 1 iff x > 0.5."""
    model = zoo.untrained(zoo.mlp("thr", 1, 2, (1,)))
    model.params = [(np.array([[1.0]]), np.array([0.0])), (np.array([[-1.0, 1.0]]), np.array([0.5, -0.5]))]
    return model


def linear_model(blobs):
    """ReLU net held in its linear regime (hidden = x + 1 > 0), readout fit by least squares."""
    (x, y), d = blobs.train(), blobs.inputs.shape[1]
    model = zoo.untrained(zoo.mlp("lin", d, blobs.classes, (d,)))
    h = np.column_stack([x + 1.0, np.ones(len(x))])
    w, *_ = np.linalg.lstsq(h, 4 * (np.eye(blobs.classes)[y] - 0.5), rcond=None)
    model.params = [(np.eye(d), np.ones(d)), (w[:-1], w[-1])]
    return model


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            K.AttackConfig("fgsm", -0.1)
        with pytest.raises(ConfigError):
            K.AttackConfig("pgd", 0.1, None, 5)
        with pytest.raises(ConfigError):
            K.AttackConfig("pgd", 0.1, 0.01, 0)
        with pytest.raises(ConfigError):
            K.AttackConfig("cw", 0.1)

    def test_alpha_above_eps_warns(self):
        with pytest.warns(UserWarning):
            K.AttackConfig("pgd", 0.1, 0.2, 3)

    def test_parse(self):
        assert K.AttackConfig.parse("fgsm:0.05") == K.AttackConfig("fgsm", 0.05)
        assert K.AttackConfig.parse("pgd:0.1:0.01:20:rs") == K.AttackConfig("pgd", 0.1, 0.01, 20, True)
        with pytest.raises(ConfigError):
            K.AttackConfig.parse("pgd:0.1")


class TestFgsm:
    def test_zero_epsilon_is_identity(self, blob_models, attack_data):
        x, y = attack_data
        batch = K.fgsm(blob_models["target"], x, y, K.AttackConfig("fgsm", 0.0))
        assert np.array_equal(batch.adversarials, x)

    def test_constraints(self, blob_models, attack_data):
        x, y = attack_data
        batch = K.fgsm(blob_models["target"], x, y, K.AttackConfig("fgsm", 0.2))
        assert np.all(np.abs(batch.adversarials - x).max(axis=1) <= 0.2 + 1e-6)
        assert batch.adversarials.min() >= 0 and batch.adversarials.max() <= 1

    def test_raises_loss_on_linear_model(self, blobs):
        model = linear_model(blobs)
        x, y = blobs.test()
        batch = K.fgsm(model, x, y, K.AttackConfig("fgsm", 0.05))
        assert zoo.loss(model, batch.adversarials, y).mean() >= zoo.loss(model, x, y).mean()

    def test_zero_gradient_coordinates_untouched(self):
        model = threshold_model()
        model.params[0] = (np.array([[1.0]]), np.array([-5.0]))  # dead ReLU: gradient exactly zero
        x = np.array([[0.3], [0.7]])
        batch = K.fgsm(model, x, [0, 1], K.AttackConfig("fgsm", 0.1))
        assert np.array_equal(batch.adversarials, x)


class TestPgd:
    def test_one_step_equals_fgsm(self, blob_models, attack_data):
        x, y = attack_data
        f = K.fgsm(blob_models["target"], x, y, K.AttackConfig("fgsm", 0.07))
        p = K.pgd(blob_models["target"], x, y, K.AttackConfig("pgd", 0.07, 0.07, 1))
        assert np.max(np.abs(f.adversarials - p.adversarials)) <= 1e-12

    def test_iterates_stay_in_ball(self, blob_models, attack_data, monkeypatch):
        x, y = attack_data
        seen = []
        real = K.check_constraints

        def spy(o, a, eps):
            seen.append(np.abs(a - o).max())
            return real(o, a, eps)

        monkeypatch.setattr(K, "check_constraints", spy)
        K.pgd(blob_models["target"], x, y, K.AttackConfig("pgd", 0.1, 0.03, 12, True, 5))
        assert len(seen) == 12 and max(seen) <= 0.1 + 1e-6

    def test_random_start_deterministic(self, blob_models, attack_data):
        x, y = attack_data
        cfg = K.AttackConfig("pgd", 0.1, 0.02, 5, True, 11)
        a = K.pgd(blob_models["target"], x, y, cfg)
        b = K.pgd(blob_models["target"], x, y, cfg)
        assert np.array_equal(a.adversarials, b.adversarials)

    def test_stronger_than_fgsm(self, blob_models, attack_data):
        x, y = attack_data
        model = blob_models["target"]
        rate_pgd = K.attack_success(model, K.pgd(model, x, y, PGD)).restricted
        rate_fgsm = K.attack_success(model, K.fgsm(model, x, y, K.AttackConfig("fgsm", 0.1))).restricted
        assert rate_pgd >= rate_fgsm

    def test_monotone_in_epsilon(self, blob_models, attack_data):
        x, y = attack_data
        model = blob_models["target"]
        rates = [K.attack_success(model, K.fgsm(model, x, y, K.AttackConfig("fgsm", e))).restricted
                 for e in (0.02, 0.05, 0.1, 0.2)]
        assert all(b >= a - 0.02 for a, b in zip(rates, rates[1:]))


class TestSuccess:
    def test_identity_batch(self, blob_models, attack_data):
        x, y = attack_data
        batch = K.AdversarialBatch(x, x.copy(), y, "t", K.AttackConfig("fgsm", 0.0))
        assert K.attack_success(blob_models["target"], batch).restricted == 0

    def test_hand_counted(self):
        orig = np.array([[0.2], [0.8], [0.3], [0.9]])
        adv = np.array([[0.6], [0.7], [0.1], [0.4]])
        rate = K.attack_success(threshold_model(), K.AdversarialBatch(orig, adv, np.array([0, 1, 1, 1]), "thr",
                                                                       K.AttackConfig("fgsm", 0.5)))
        # correct originals: 0, 1, 3 ; fooled adversarials: 0, 2, 3
        assert rate.restricted == pytest.approx(2 / 3)
        assert rate.unrestricted == pytest.approx(3 / 4)
        assert rate.n_correct == 3

    def test_constant_model(self):
        model = zoo.untrained(zoo.mlp("const", 2, 3, (2,)))
        model.params = [(np.zeros((2, 2)), np.zeros(2)), (np.zeros((2, 3)), np.array([0.0, 1.0, 0.0]))]
        x = np.random.default_rng(0).random((6, 2))
        labels = np.array([0, 0, 2, 0, 2, 0])
        batch = K.AdversarialBatch(x, x, labels, "const", K.AttackConfig("fgsm", 0.0))
        with pytest.raises(DegenerateInputError):
            K.attack_success(model, batch)
        rate = K.attack_success(model, batch, allow_undefined=True)
        assert rate.unrestricted == 1.0 and np.isnan(rate.restricted)


def test_export_import_round_trip(blob_models, attack_data, tmp_path):
    x, y = attack_data
    batch = K.pgd(blob_models["wide"], x, y, PGD)
    paths = K.export_batch(batch, tmp_path / "b", blob_models["wide"])
    header = paths["manifest"].read_text().splitlines()[0]
    assert header == "index,label,pred_original,pred_adversarial"
    back = K.import_batch(tmp_path / "b", PGD)
    assert np.array_equal(back.originals, x)  # dataset inputs are float32-exact
    assert np.array_equal(back.adversarials, batch.adversarials.astype(np.float32).astype(np.float64))
    assert np.array_equal(back.labels, y)
    K.check_constraints(back.originals, back.adversarials, PGD.epsilon)
