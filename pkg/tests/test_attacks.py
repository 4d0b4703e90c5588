import numpy as np
import pytest

from lipmargin.attacks import (
    AttackConfig,
    accuracy,
    adversarial_dataset,
    fgsm,
    input_gradient,
    transfer_eval,
)
from lipmargin.data import generate_blobs
from lipmargin.exceptions import InputError
from lipmargin.losses import cross_entropy
from lipmargin.nn import DenseLayer, Model

from conftest import random_model


def linear():
    return Model([DenseLayer([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])])


def test_fgsm_direction_on_linear_model():
    x = np.array([1.0, 0.0])
    adv = fgsm(linear(), x, 0, AttackConfig(epsilon=0.5))
    np.testing.assert_array_equal(adv, [0.5, 0.5])


def test_zero_gradient_coordinates_stay_put():
    m = Model([DenseLayer([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [0.0, 0.0])])
    adv = fgsm(m, np.zeros(3), 0, AttackConfig(epsilon=1.0))
    assert adv[2] == 0.0


def test_clamp_and_config_errors():
    adv = fgsm(linear(), np.array([0.9, 0.1]), 0, AttackConfig(epsilon=0.5, clamp_min=0.0,
                                                               clamp_max=1.0))
    assert adv.min() >= 0.0 and adv.max() <= 1.0
    with pytest.raises(InputError):
        AttackConfig(epsilon=-0.1)
    with pytest.raises(InputError):
        AttackConfig(clamp_min=1.0, clamp_max=0.0)
    with pytest.raises(InputError):
        AttackConfig.from_dict({"eps": 0.1})


def test_input_gradient_central_difference(rng):
    m = random_model(rng, [4, 6, 3])
    X = rng.normal(size=(5, 4))
    y = rng.integers(0, 3, 5)
    G = input_gradient(m, X, y)
    h = 1e-6
    for i in range(5):
        for j in range(4):
            e = np.zeros(4)
            e[j] = h
            num = (cross_entropy(m(X[i] + e), y[i]) - cross_entropy(m(X[i] - e), y[i])) / (2 * h)
            assert G[i, j] == pytest.approx(num, rel=1e-5, abs=1e-8)


def test_fgsm_increases_loss_to_first_order(rng):
    m = random_model(rng, [4, 6, 3])
    X = rng.normal(size=(50, 4))
    y = rng.integers(0, 3, 50)
    adv = fgsm(m, X, y, AttackConfig(epsilon=1e-4))
    assert np.all(cross_entropy(m(adv), y) >= cross_entropy(m(X), y) - 1e-12)


def test_misclassified_samples_can_be_skipped():
    X = np.array([[1.0, 0.0], [0.0, 1.0]])
    adv = fgsm(linear(), X, [0, 0], AttackConfig(epsilon=0.3, include_misclassified=False))
    np.testing.assert_array_equal(adv[1], X[1])
    assert not np.array_equal(adv[0], X[0])


def test_transfer_eval_and_dataset():
    data = generate_blobs(50, 2, 2, centers_seed=1, sample_seed=2)
    m = Model.init([2, 2], seed=0)
    res, X_adv = transfer_eval(m, m, data.features, data.labels, AttackConfig(epsilon=0.2),
                               return_adversarial=True)
    assert res["clean_acc_target"] == res["clean_acc_surrogate"]
    assert res["adv_acc_surrogate"] == accuracy(m, X_adv, data.labels)
    adv = adversarial_dataset(m, data, AttackConfig(epsilon=0.2))
    assert adv.provenance["surrogate_model_hash"] == m.param_hash()
    assert adv.provenance["epsilon"] == 0.2
    with pytest.raises(InputError):
        transfer_eval(m, Model.init([2, 3]), data.features, data.labels)


def test_documented_examples(rng):
    x = np.array([0.3, -0.2])
    np.testing.assert_array_equal(fgsm(linear(), x, 0, AttackConfig(epsilon=0.0)), x)
    # class 1 row dominates the gradient of -log p_0 in every coordinate
    m = Model([DenseLayer([[-1.0, -1.0], [1.0, 1.0]], [0.0, 0.0])])
    np.testing.assert_array_equal(fgsm(m, x, 0, AttackConfig(epsilon=0.25)), x + 0.25)
    res = transfer_eval(m, m, rng.normal(size=(20, 2)), rng.integers(0, 2, 20),
                        AttackConfig(epsilon=0.0))
    assert res["adv_acc_target"] == res["clean_acc_target"]


def test_fgsm_lowers_label_margin_of_linear_model(rng):
    from lipmargin.losses import label_margin

    m = Model([DenseLayer([[2.0, -1.0], [-0.5, 1.5]], [0.1, -0.2])])
    X = rng.normal(size=(200, 2))
    y = rng.integers(0, 2, 200)
    adv = fgsm(m, X, y, AttackConfig(epsilon=0.1))
    assert np.all(label_margin(m(adv), y) < label_margin(m(X), y))


def test_perturbation_bounded_and_deterministic(rng):
    m = random_model(rng, [5, 7, 3])
    X = rng.normal(size=(30, 5))
    y = rng.integers(0, 3, 30)
    cfg = AttackConfig(epsilon=0.3, clamp_min=-1.0, clamp_max=1.0)
    a, b = fgsm(m, X, y, cfg), fgsm(m, X, y, cfg)
    np.testing.assert_array_equal(a, b)
    inside = np.clip(X, -1.0, 1.0) == X
    assert np.all(np.abs(a - X)[inside] <= 0.3 + 1e-15)
