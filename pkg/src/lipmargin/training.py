"""Per-sample margin-constraint training with multiplicative weight growth.

The outer loop keeps one weight ``lambda_x`` per training sample.  Each outer
iteration runs a fixed budget of minibatch SGD on ``sum_x loss(x; lambda_x)``
(warm-started from the previous parameters), checks every label margin
against ``mu``, stops if none is violated, and otherwise grows the weights of
the violating samples.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses
from .exceptions import InputError
from .nn import Model, backward, forward, forward_cached, sgd_step

logger = logging.getLogger(__name__)

UPDATE_RULES = ("multiplicative", "additive", "decrease_on_satisfied", "violation_proportional")
LAMBDA_FLOOR_RATIO = 1e-6


@dataclass
class MarginRecord:
    sample_id: int
    decision_margin: float
    label_margin: float
    decided_class: int
    true_class: int | None = None
    lam: float = 1.0


def margin_records(model: Model, X, y=None, lam=None, sample_ids=None) -> list[MarginRecord]:
    logits = forward(model, np.atleast_2d(X))
    dm, dc = losses.decision_margin(logits)
    n = logits.shape[0]
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    lam = np.ones(n) if lam is None else np.broadcast_to(lam, (n,))
    lm = dm if y is None else losses.label_margin(logits, y)
    return [
        MarginRecord(int(ids[i]), float(dm[i]), float(lm[i]), int(dc[i]),
                     None if y is None else int(y[i]), float(lam[i]))
        for i in range(n)
    ]


@dataclass
class DualConfig:
    mu: float = 1.0
    delta: float = 2.0
    lambda_init: float = 1.0
    max_outer_iters: int = 50
    inner_epochs: int = 5
    lr: float = 1e-2
    batch_size: int = 32
    loss_kind: str = "dual"
    update_rule: str = "multiplicative"
    additive_step: float = 1.0
    decrease_factor: float = 0.5
    proportional_scale: float = 1.0
    pretrain_epochs: int = 0
    pretrain_lr: float | None = None
    normalize_lambda: bool = True
    max_grad_norm: float | None = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.mu > 0:
            raise InputError(f"mu must be positive, got {self.mu}")
        if not self.delta > 1:
            raise InputError(f"delta must exceed 1, got {self.delta}")
        if not self.lambda_init > 0:
            raise InputError(f"lambda_init must be positive, got {self.lambda_init}")
        if self.max_outer_iters < 1 or self.inner_epochs < 1 or self.batch_size < 1:
            raise InputError("max_outer_iters, inner_epochs and batch_size must be >= 1")
        if not self.lr > 0:
            raise InputError(f"lr must be positive, got {self.lr}")
        losses.get_loss(self.loss_kind)
        if self.update_rule not in UPDATE_RULES:
            raise InputError(f"unknown update rule {self.update_rule!r}")
        if not self.additive_step > 0 or not self.proportional_scale > 0:
            raise InputError("additive_step and proportional_scale must be positive")
        if not 0 < self.decrease_factor < 1:
            raise InputError("decrease_factor must lie in (0, 1)")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise InputError("max_grad_norm must be positive or None")

    @classmethod
    def from_dict(cls, d: dict) -> "DualConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise InputError(f"unknown margin_train keys: {sorted(unknown)}")
        return cls(**known)


@dataclass
class IterationStats:
    outer_iter: int
    n_violated: int
    min_label_margin: float
    mean_loss: float
    lambda_min: float
    lambda_max: float
    lambda_mean: float


@dataclass
class TrainHistory:
    iterations: list[IterationStats] = field(default_factory=list)
    termination_reason: str | None = None
    lambdas: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "iterations": [asdict(it) for it in self.iterations],
            "termination_reason": self.termination_reason,
        }

    def __len__(self):
        return len(self.iterations)


def _check_dataset(X, y, num_classes=None):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InputError("dataset is empty")
    if y.shape != (X.shape[0],):
        raise InputError(f"labels shape {y.shape} does not match {X.shape[0]} samples")
    if num_classes is not None and (np.any(y < 0) or np.any(y >= num_classes)):
        raise InputError("labels out of range")
    return X, y.astype(np.int64)


def check_constraints(model: Model, X, y, mu, return_margins=False):
    """Indices whose label margin is strictly below ``mu``."""
    X, y = _check_dataset(X, y, model.num_classes)
    margins = losses.label_margin(forward(model, X), y)
    violated = np.flatnonzero(margins < mu)
    if return_margins:
        return violated, margins
    return violated


def update_weights(lam, violated, rule="multiplicative", *, delta=2.0, step=1.0, factor=0.5,
                   scale=1.0, margins=None, mu=None, lam_floor=0.0):
    """New constraint weights after one outer iteration.

    ``violated`` is an index array (or boolean mask) over ``lam``.
    ``violation_proportional`` needs ``margins`` and ``mu`` and ignores
    ``violated``: every sample gains ``scale * max(0, mu - margin)``.
    """
    lam = np.array(lam, dtype=np.float64)
    mask = np.zeros(lam.shape, dtype=bool)
    violated = np.asarray(violated)
    mask[violated if violated.dtype == bool else violated.astype(np.int64)] = True
    if rule == "multiplicative":
        if not delta > 1:
            raise InputError("delta must exceed 1")
        lam[mask] *= delta
    elif rule == "additive":
        if not step > 0:
            raise InputError("additive step must be positive")
        lam[mask] += step
    elif rule == "decrease_on_satisfied":
        if not delta > 1 or not 0 < factor < 1:
            raise InputError("need delta > 1 and 0 < factor < 1")
        lam[mask] *= delta
        lam[~mask] = np.maximum(lam_floor, factor * lam[~mask])
    elif rule == "violation_proportional":
        if not scale > 0 or margins is None or mu is None:
            raise InputError("violation_proportional needs scale > 0, margins and mu")
        lam += scale * np.maximum(0.0, mu - np.asarray(margins, dtype=np.float64))
    else:
        raise InputError(f"unknown update rule {rule!r}")
    assert np.all(lam >= 0), "constraint weights went negative"
    return lam


def clip_gradient(tape, max_norm):
    """Rescale ``tape`` so its global l2 norm is at most ``max_norm``."""
    if max_norm is None:
        return tape
    norm = float(np.sqrt(sum(np.sum(a * a) for a in tape.arrays())))
    return tape.scaled(max_norm / norm) if norm > max_norm else tape


def run_epochs(model: Model, X, y, *, loss_kind, mu, lam, epochs, lr, batch_size, rng,
               max_grad_norm=None):
    """Minibatch SGD on the lambda-weighted loss; returns the last epoch's mean loss.

    The margin objectives are linear in the logits and unbounded below, so
    unclipped steps let the weights of a deep network grow geometrically;
    ``max_grad_norm`` caps each step's global gradient norm.
    """
    n = X.shape[0]
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,))
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), (n,))
    _, _, weighted = losses.get_loss(loss_kind)
    mean_loss = float("nan")
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            logits, cache = forward_cached(model, X[idx])
            if weighted:
                vals, G = losses.evaluate(loss_kind, logits, y[idx], mu[idx], lam[idx])
            else:
                vals, G = losses.evaluate(loss_kind, logits, y[idx], mu[idx])
            total += float(np.sum(vals))
            tape = clip_gradient(backward(model, G / len(idx), cache), max_grad_norm)
            sgd_step(model, tape, lr)
        mean_loss = total / n
    return mean_loss


def pretrain(model: Model, X, y, *, epochs, lr, batch_size=32, seed=0,
             loss_kind="softmax_margin", mu=0.0):
    """Plain (unweighted) training, e.g. cross-entropy before the margin loop."""
    X, y = _check_dataset(X, y, model.num_classes)
    rng = np.random.default_rng(seed)
    run_epochs(model, X, y, loss_kind=loss_kind, mu=mu, lam=1.0, epochs=epochs, lr=lr,
               batch_size=batch_size, rng=rng)
    return model


def _stats(outer_iter, violated, margins, mean_loss, lam):
    return IterationStats(
        outer_iter=outer_iter,
        n_violated=int(len(violated)),
        min_label_margin=float(np.min(margins)),
        mean_loss=float(mean_loss),
        lambda_min=float(lam.min()),
        lambda_max=float(lam.max()),
        lambda_mean=float(lam.mean()),
    )


def train(model: Model, X, y, config: DualConfig, sample_mu=None):
    """Run the constraint-weight loop on ``model`` (mutated in place).

    ``sample_mu`` optionally overrides ``config.mu`` per sample.  Returns
    ``(model, history)``; hitting ``max_outer_iters`` is reported through
    ``history.termination_reason == "max_iters"``, not raised.
    """
    X, y = _check_dataset(X, y, model.num_classes)
    mu = config.mu if sample_mu is None else np.asarray(sample_mu, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    lam = np.full(X.shape[0], float(config.lambda_init))
    lam_floor = config.lambda_init * LAMBDA_FLOOR_RATIO
    history = TrainHistory()

    if config.pretrain_epochs:
        run_epochs(model, X, y, loss_kind="softmax_margin", mu=0.0, lam=1.0,
                   epochs=config.pretrain_epochs, lr=config.pretrain_lr or config.lr,
                   batch_size=config.batch_size, rng=rng)

    violated, margins = check_constraints(model, X, y, mu, return_margins=True)
    if len(violated) == 0:
        history.iterations.append(_stats(0, violated, margins, float("nan"), lam))
        history.termination_reason = "all_satisfied"
        history.lambdas = lam
        return model, history

    for it in range(1, config.max_outer_iters + 1):
        # the weighted objective's minimizer is invariant to a common scale of
        # lambda; rescaling keeps a fixed SGD step size usable as weights grow
        step_lam = lam / lam.mean() if config.normalize_lambda else lam
        mean_loss = run_epochs(model, X, y, loss_kind=config.loss_kind, mu=mu, lam=step_lam,
                               epochs=config.inner_epochs, lr=config.lr,
                               batch_size=config.batch_size, rng=rng,
                               max_grad_norm=config.max_grad_norm)
        violated, margins = check_constraints(model, X, y, mu, return_margins=True)
        history.iterations.append(_stats(it, violated, margins, mean_loss, lam))
        logger.debug("outer iteration %d: %d violated, min margin %.4g",
                     it, len(violated), margins.min())
        if len(violated) == 0:
            history.termination_reason = "all_satisfied"
            break
        lam = update_weights(lam, violated, config.update_rule, delta=config.delta,
                             step=config.additive_step, factor=config.decrease_factor,
                             scale=config.proportional_scale, margins=margins, mu=mu,
                             lam_floor=lam_floor)
    else:
        history.termination_reason = "max_iters"
    history.lambdas = lam
    return model, history
