"""Classification margins and margin-enforcing training objectives.

All functions accept either one logit vector (C,) or a batch (m, C).  Batched
calls return one value per row.  ``mu`` and ``lam`` may be scalars or
per-sample arrays.  Every loss ``foo`` has a companion ``foo_grad`` returning
d loss / d logits with the shape of ``logits``.

Ties are resolved toward the lowest class index, both for the decided class
and for the runner-up ``max_{i != c}`` term.
"""
import warnings

import numpy as np

from .exceptions import DegenerateInputError, InputError, RectificationError


def _prep(logits, true_class=None):
    F = np.asarray(logits, dtype=np.float64)
    single = F.ndim == 1
    F = np.atleast_2d(F)
    if F.ndim != 2:
        raise InputError(f"logits must be 1-D or 2-D, got shape {np.shape(logits)}")
    C = F.shape[1]
    if C < 2:
        raise InputError("margins need at least two classes")
    if true_class is None:
        return F, None, single
    c = np.broadcast_to(np.asarray(true_class), (F.shape[0],))
    if not np.issubdtype(c.dtype, np.integer):
        if not np.all(np.equal(np.mod(c, 1), 0)):
            raise InputError("class indices must be integers")
        c = c.astype(np.int64)
    if np.any(c < 0) or np.any(c >= C):
        raise InputError(f"class index out of range for C={C}")
    return F, c, single


def _out(values, single):
    return values[0] if single else values


def _per_sample(v, n):
    return np.broadcast_to(np.asarray(v, dtype=np.float64), (n,))


def _runner_up(F, c):
    """Index and value of ``max_{i != c} f_i`` (lowest index on ties)."""
    rows = np.arange(F.shape[0])
    masked = F.copy()
    masked[rows, c] = -np.inf
    j = np.argmax(masked, axis=1)
    return j, masked[rows, j]


def decision_margin(logits):
    """Gap between the top logit and the runner-up, and the decided class.

    Returns ``(margin, decided_class)``; margin is 0 when the maximum is tied.
    """
    F, _, single = _prep(logits)
    c_hat = np.argmax(F, axis=1)
    _, second = _runner_up(F, c_hat)
    margin = F[np.arange(F.shape[0]), c_hat] - second
    return _out(margin, single), _out(c_hat, single)


def label_margin(logits, true_class):
    """``f_c - max_{i != c} f_i``; negative iff the sample is misclassified."""
    F, c, single = _prep(logits, true_class)
    _, second = _runner_up(F, c)
    return _out(F[np.arange(F.shape[0]), c] - second, single)


# ---------------------------------------------------------------------------
# hinge-free constraint objective and its normalized form

def loss_dual(logits, true_class, mu, lam=1.0):
    """``lam * (max_{i != c} f_i + mu - f_c)``; negative once the margin exceeds mu."""
    F, c, single = _prep(logits, true_class)
    n = F.shape[0]
    mu = _per_sample(mu, n)
    lam = _per_sample(lam, n)
    if np.any(lam < 0):
        raise InputError("constraint weights must be nonnegative")
    _, second = _runner_up(F, c)
    return _out(lam * (second + mu - F[np.arange(n), c]), single)


def loss_dual_grad(logits, true_class, mu, lam=1.0):
    F, c, single = _prep(logits, true_class)
    n = F.shape[0]
    lam = _per_sample(lam, n)
    rows = np.arange(n)
    j, _ = _runner_up(F, c)
    G = np.zeros_like(F)
    G[rows, j] += lam
    G[rows, c] -= lam
    return _out(G, single)


def _dual_normalized_parts(F, c, mu):
    n, C = F.shape
    rows = np.arange(n)
    j, second = _runner_up(F, c)
    num = second + mu - F[rows, c]
    # sum over all classes j, including the true one
    den = (C - 1) * mu + F.sum(axis=1)
    if np.any(den <= 0):
        raise DegenerateInputError("normalizing denominator (C-1)*mu + sum_j f_j is nonpositive")
    return rows, j, num, den


def loss_dual_normalized(logits, true_class, mu, lam=1.0):
    """``lam * (max_{i != c} f_i + mu - f_c) / ((C-1) mu + sum_j f_j)``."""
    F, c, single = _prep(logits, true_class)
    n = F.shape[0]
    mu = _per_sample(mu, n)
    lam = _per_sample(lam, n)
    if np.any(lam < 0):
        raise InputError("constraint weights must be nonnegative")
    _, _, num, den = _dual_normalized_parts(F, c, mu)
    return _out(lam * num / den, single)


def loss_dual_normalized_grad(logits, true_class, mu, lam=1.0):
    F, c, single = _prep(logits, true_class)
    n = F.shape[0]
    mu = _per_sample(mu, n)
    lam = _per_sample(lam, n)
    rows, j, num, den = _dual_normalized_parts(F, c, mu)
    G = np.zeros_like(F)
    G[rows, j] += 1.0 / den
    G[rows, c] -= 1.0 / den
    G -= (num / den**2)[:, None]
    return _out(G * lam[:, None], single)


# ---------------------------------------------------------------------------
# margin added to the non-target logits

def loss_log_ratio(logits, true_class, mu):
    """``-log(f_c / ((C-1) mu + sum_{i != c} f_i))`` for rectified logits.

    Returns ``+inf`` (with a RuntimeWarning) for rows where ``f_c == 0``.
    """
    F, c, single = _prep(logits, true_class)
    n, C = F.shape
    if np.any(F < 0):
        raise RectificationError("log-ratio loss requires nonnegative (rectified) logits")
    mu = _per_sample(mu, n)
    rows = np.arange(n)
    fc = F[rows, c]
    rest = (C - 1) * mu + F.sum(axis=1) - fc
    out = np.full(n, np.inf)
    ok = fc > 0
    if not np.all(ok):
        warnings.warn("true-class logit is 0; log-ratio loss is infinite", RuntimeWarning,
                      stacklevel=2)
    out[ok] = np.log(rest[ok]) - np.log(fc[ok])
    return _out(out, single)


_LOG_RATIO_FLOOR = 1e-12


def loss_log_ratio_grad(logits, true_class, mu):
    F, c, single = _prep(logits, true_class)
    n, C = F.shape
    if np.any(F < 0):
        raise RectificationError("log-ratio loss requires nonnegative (rectified) logits")
    mu = _per_sample(mu, n)
    rows = np.arange(n)
    fc = F[rows, c]
    rest = (C - 1) * mu + F.sum(axis=1) - fc
    G = np.repeat((1.0 / rest)[:, None], C, axis=1)
    # floor keeps the gradient finite at f_c = 0; a rectified zero logit has
    # zero downstream derivative anyway
    G[rows, c] = -1.0 / np.maximum(fc, _LOG_RATIO_FLOOR)
    return _out(G, single)


def _shifted(F, c, mu):
    Z = F + mu[:, None]
    rows = np.arange(F.shape[0])
    Z[rows, c] = F[rows, c]
    return Z


def loss_softmax_margin(logits, true_class, mu=0.0):
    """Cross-entropy after adding ``mu`` to every non-target logit.

    Evaluated as ``(m - z_c) + log1p(sum_{i != k} exp(z_i - m))`` with
    ``k = argmax z`` and ``m = z_k``, so confident rows do not lose precision.
    """
    F, c, single = _prep(logits, true_class)
    n = F.shape[0]
    mu = _per_sample(mu, n)
    Z = _shifted(F, c, mu)
    rows = np.arange(n)
    k = np.argmax(Z, axis=1)
    m = Z[rows, k]
    E = np.exp(Z - m[:, None])
    E[rows, k] = 0.0
    return _out((m - Z[rows, c]) + np.log1p(E.sum(axis=1)), single)


def loss_softmax_margin_grad(logits, true_class, mu=0.0):
    F, c, single = _prep(logits, true_class)
    n = F.shape[0]
    mu = _per_sample(mu, n)
    Z = _shifted(F, c, mu)
    Z -= Z.max(axis=1, keepdims=True)
    P = np.exp(Z)
    P /= P.sum(axis=1, keepdims=True)
    P[np.arange(n), c] -= 1.0
    return _out(P, single)


def cross_entropy(logits, true_class):
    return loss_softmax_margin(logits, true_class, 0.0)


def cross_entropy_grad(logits, true_class):
    return loss_softmax_margin_grad(logits, true_class, 0.0)


# name -> (value, grad, uses_lambda)
LOSSES = {
    "dual": (loss_dual, loss_dual_grad, True),
    "dual_normalized": (loss_dual_normalized, loss_dual_normalized_grad, True),
    "log_ratio": (loss_log_ratio, loss_log_ratio_grad, False),
    "softmax_margin": (loss_softmax_margin, loss_softmax_margin_grad, False),
}


def get_loss(kind):
    try:
        return LOSSES[kind]
    except KeyError:
        raise InputError(f"unknown loss kind {kind!r}; choose from {sorted(LOSSES)}") from None


def evaluate(kind, logits, true_class, mu, lam=1.0):
    """Per-sample loss values and logit gradients for loss ``kind``.

    ``lam`` is ignored by the objectives that carry no constraint weight.
    """
    value, grad, weighted = get_loss(kind)
    if weighted:
        return value(logits, true_class, mu, lam), grad(logits, true_class, mu, lam)
    return value(logits, true_class, mu), grad(logits, true_class, mu)
