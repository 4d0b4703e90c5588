"""Fast gradient sign attacks and surrogate-to-target transfer evaluation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses
from .data import Dataset
from .exceptions import InputError
from .nn import Model, backward, forward, forward_cached


@dataclass
class AttackConfig:
    epsilon: float = 0.1
    clamp_min: float | None = None
    clamp_max: float | None = None
    loss: str = "cross_entropy"
    include_misclassified: bool = True

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise InputError(f"epsilon must be nonnegative, got {self.epsilon}")
        if (self.clamp_min is not None and self.clamp_max is not None
                and not self.clamp_min < self.clamp_max):
            raise InputError("clamp_min must be below clamp_max")
        if self.loss != "cross_entropy":
            raise InputError("FGSM attacks only support the cross_entropy loss")

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown attack keys: {sorted(unknown)}")
        return cls(**d)


def input_gradient(model: Model, X, y):
    """d(cross-entropy)/dx for every row of ``X``."""
    logits, cache = forward_cached(model, X)
    G = losses.cross_entropy_grad(logits, y)
    return backward(model, G, cache).inputs


def fgsm(surrogate: Model, X, y, config: AttackConfig | None = None):
    """``clip(x + eps * sign(grad_x CE(f(x), y)))`` against ``surrogate``.

    Zero gradient coordinates are left unperturbed.  With
    ``include_misclassified=False`` samples the surrogate already gets wrong
    are returned unchanged.
    """
    config = config or AttackConfig()
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    Xb = np.atleast_2d(X)
    yb = np.atleast_1d(np.asarray(y))
    grad = np.atleast_2d(input_gradient(surrogate, Xb, yb))
    X_adv = Xb + config.epsilon * np.sign(grad)
    if config.clamp_min is not None or config.clamp_max is not None:
        X_adv = np.clip(X_adv, config.clamp_min, config.clamp_max)
    if not config.include_misclassified:
        _, decided = losses.decision_margin(forward(surrogate, Xb))
        wrong = decided != yb
        X_adv[wrong] = Xb[wrong]
    return X_adv[0] if single else X_adv


def accuracy(model: Model, X, y) -> float:
    _, decided = losses.decision_margin(forward(model, np.atleast_2d(X)))
    return float(np.mean(decided == np.asarray(y)))


def transfer_eval(surrogate: Model, target: Model, X, y, config: AttackConfig | None = None,
                  return_adversarial=False):
    """Clean and FGSM accuracies of both models, with attacks crafted on ``surrogate``."""
    if (surrogate.input_dim, surrogate.num_classes) != (target.input_dim, target.num_classes):
        raise InputError("surrogate and target must share input and output dimensions")
    X_adv = fgsm(surrogate, X, y, config)
    result = {
        "clean_acc_target": accuracy(target, X, y),
        "adv_acc_target": accuracy(target, X_adv, y),
        "clean_acc_surrogate": accuracy(surrogate, X, y),
        "adv_acc_surrogate": accuracy(surrogate, X_adv, y),
    }
    if return_adversarial:
        return result, X_adv
    return result


def adversarial_dataset(surrogate: Model, dataset: Dataset, config: AttackConfig) -> Dataset:
    """FGSM copy of ``dataset`` (same container format) with attack provenance."""
    X_adv = fgsm(surrogate, dataset.features, dataset.labels, config)
    provenance = dict(dataset.provenance)
    provenance.update({"surrogate_model_hash": surrogate.param_hash(),
                       "epsilon": float(config.epsilon)})
    return Dataset(X_adv, dataset.labels.copy(), dataset.split.copy(), dataset.num_classes,
                   provenance)
