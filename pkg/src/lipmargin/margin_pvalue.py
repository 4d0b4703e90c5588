"""Log-margin mixture models and margin p-values for low-margin detection.

A 1-D Gaussian mixture is fitted by EM to the log decision margins of
correctly classified training samples (per class or pooled), with the number
of components chosen by BIC.  A test sample with margin ``m`` gets

    p(m) = sum_i w_i * (1 - Phi(|log m - mean_i| / sigma_i))

and is flagged when ``p`` falls below a threshold calibrated on the training
p-values.  Because of the absolute value, ``p`` never exceeds 0.5.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc

from . import losses
from .exceptions import ConfigurationError, InputError, SerializationError
from .nn import Model, forward

POOLED = "pooled"
_LOG_2PI = math.log(2.0 * math.pi)


def _logsumexp_rows(a):
    m = np.max(a, axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return (m + np.log(np.sum(np.exp(a - m), axis=1, keepdims=True)))[:, 0]


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    sigmas: np.ndarray
    class_id: int | str = POOLED
    n_train: int = 0
    log_likelihood: float = float("nan")
    bic: float = float("nan")
    n_iter: int = 0
    converged: bool = False
    ll_trace: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1)
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64).reshape(-1)
        if not (self.weights.shape == self.means.shape == self.sigmas.shape):
            raise InputError("weights, means and sigmas must have equal length")
        if self.weights.size == 0:
            raise InputError("a mixture needs at least one component")
        if np.any(self.sigmas <= 0) or np.any(self.weights < 0):
            raise InputError("sigmas must be positive and weights nonnegative")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise InputError(f"weights sum to {self.weights.sum()}, not 1")

    @property
    def n_components(self) -> int:
        return self.weights.size

    def log_density(self, data):
        """Per-point log mixture density."""
        z = (np.asarray(data, dtype=np.float64)[:, None] - self.means) / self.sigmas
        with np.errstate(divide="ignore"):
            log_terms = np.log(self.weights) - np.log(self.sigmas) - 0.5 * (_LOG_2PI + z * z)
        return _logsumexp_rows(log_terms)

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "components": [
                {"w": float(w), "m": float(m), "sigma": float(s)}
                for w, m, s in zip(self.weights, self.means, self.sigmas)
            ],
            "n_train": int(self.n_train),
            "bic": float(self.bic),
            "log_likelihood": float(self.log_likelihood),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GmmModel":
        try:
            comps = d["components"]
            return cls([c["w"] for c in comps], [c["m"] for c in comps],
                       [c["sigma"] for c in comps], d["class_id"], int(d["n_train"]),
                       float(d["log_likelihood"]), float(d["bic"]))
        except (KeyError, TypeError, InputError) as exc:
            raise SerializationError(f"malformed GMM document: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text) -> "GmmModel":
        return cls.from_dict(json.loads(text))


@dataclass
class LogMargins:
    values: np.ndarray
    n_zero_margin: int = 0
    n_excluded_misclassified: int = 0


def collect_log_margins(model: Model, X, y, class_filter=POOLED) -> LogMargins:
    """Log decision margins of the samples with ``decided == true`` class.

    With an integer ``class_filter`` only that class's correctly classified
    samples are kept.  Zero-margin samples are dropped and counted.
    """
    logits = forward(model, np.atleast_2d(X))
    margin, decided = losses.decision_margin(logits)
    y = np.asarray(y)
    correct = decided == y
    keep = correct if class_filter == POOLED else correct & (y == class_filter)
    positive = margin > 0
    values = np.log(margin[keep & positive])
    if values.size == 0:
        raise InputError(f"no usable samples with positive margin for class {class_filter!r}")
    return LogMargins(values, int(np.count_nonzero(keep & ~positive)),
                      int(np.count_nonzero(~correct)))


def variance_floor(data) -> float:
    """Minimum component standard deviation for ``data``."""
    std = float(np.std(data))
    return 1e-4 * std if std > 0 else 1e-6


def _kmeanspp_means(data, K, rng):
    means = [data[rng.integers(data.size)]]
    for _ in range(1, K):
        d2 = np.min((data[:, None] - np.asarray(means)[None, :]) ** 2, axis=1)
        total = d2.sum()
        if total <= 0:
            means.append(data[rng.integers(data.size)])
        else:
            means.append(data[rng.choice(data.size, p=d2 / total)])
    return np.asarray(means, dtype=np.float64)


def _bic(log_likelihood, K, n):
    return -2.0 * log_likelihood + (3 * K - 1) * math.log(n)


def fit_gmm_em(data, K, seed=0, tol=1e-5, max_iters=1000, class_id=POOLED) -> GmmModel:
    """Fit a K-component 1-D mixture by EM.

    Means start from a k-means++ spread over the data, weights are uniform and
    every variance starts at the global variance.  Iteration stops when the
    mean per-sample log-likelihood improves by less than ``tol``.
    """
    x = np.asarray(data, dtype=np.float64).reshape(-1)
    n = x.size
    if K < 1:
        raise InputError("K must be positive")
    if K > n:
        raise InputError(f"cannot fit {K} components to {n} points")
    if not np.all(np.isfinite(x)):
        raise InputError("data must be finite")
    rng = np.random.default_rng(seed)
    floor = variance_floor(x)
    var_floor = floor * floor

    weights = np.full(K, 1.0 / K)
    means = _kmeanspp_means(x, K, rng)
    variances = np.full(K, max(np.var(x), var_floor))

    def log_terms(w, m, v):
        with np.errstate(divide="ignore"):
            return np.log(w) - 0.5 * (np.log(v) + _LOG_2PI + (x[:, None] - m) ** 2 / v)

    lt = log_terms(weights, means, variances)
    norm = _logsumexp_rows(lt)
    ll = float(norm.sum())
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        # E-step
        resp = np.exp(lt - norm[:, None])
        nk = resp.sum(axis=0)
        # M-step; a component that lost all its mass keeps its mean/variance
        alive = nk > 1e-300
        weights = nk / n
        new_means = means.copy()
        new_means[alive] = (resp[:, alive] * x[:, None]).sum(axis=0) / nk[alive]
        new_vars = variances.copy()
        new_vars[alive] = (resp[:, alive] * (x[:, None] - new_means[alive]) ** 2).sum(axis=0) \
            / nk[alive]
        means = new_means
        variances = np.maximum(new_vars, var_floor)
        lt = log_terms(weights, means, variances)
        norm = _logsumexp_rows(lt)
        new_ll = float(norm.sum())
        trace.append(new_ll)
        improvement = new_ll - ll
        ll = new_ll
        if improvement < tol * n:
            converged = True
            break

    weights = weights / weights.sum()
    return GmmModel(weights, means, np.sqrt(variances), class_id, n, ll, _bic(ll, K, n),
                    n_iter=it, converged=converged, ll_trace=trace)


def _restart_seed(seed, K, r):
    return int(np.random.SeedSequence([seed, K, r]).generate_state(1)[0])


def select_order_bic(data, K_max=10, seed=0, restarts=5, tol=1e-5, max_iters=1000,
                     class_id=POOLED) -> GmmModel:
    """Best-of-``restarts`` EM fit for each K <= K_max; returns the min-BIC model."""
    x = np.asarray(data, dtype=np.float64).reshape(-1)
    if K_max < 1 or restarts < 1:
        raise InputError("K_max and restarts must be positive")
    best = None
    for K in range(1, min(K_max, x.size) + 1):
        fits = [fit_gmm_em(x, K, _restart_seed(seed, K, r), tol, max_iters, class_id)
                for r in range(restarts)]
        fit = max(fits, key=lambda g: g.log_likelihood)
        if best is None or fit.bic < best.bic:
            best = fit
    return best


def std_normal_sf(z):
    """``1 - Phi(z)`` via ``erfc``; accurate far into the upper tail."""
    return 0.5 * erfc(np.asarray(z, dtype=np.float64) / math.sqrt(2.0))


def pvalue_from_log_margin(gmm: GmmModel, log_margin):
    lm = np.asarray(log_margin, dtype=np.float64)
    z = np.abs(lm[..., None] - gmm.means) / gmm.sigmas
    return (gmm.weights * std_normal_sf(z)).sum(axis=-1)


def pvalue(gmm: GmmModel, decision_margin, return_flag=False):
    """Margin p-value; nonpositive margins map to 0 (most anomalous).

    With ``return_flag`` also returns a boolean array marking those
    nonpositive-margin inputs.
    """
    m = np.asarray(decision_margin, dtype=np.float64)
    nonpos = m <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        p = pvalue_from_log_margin(gmm, np.log(np.where(nonpos, 1.0, m)))
    p = np.where(nonpos, 0.0, p)
    p = float(p) if p.ndim == 0 else p
    if return_flag:
        return p, nonpos
    return p


def threshold_for_fpr(gmm: GmmModel | None, training_log_margins, target_fpr,
                      training_pvalues=None) -> float:
    """Lower ``target_fpr`` quantile of the training p-values.

    Samples are flagged when ``p < threshold``, so at most ``target_fpr`` of
    the training samples are flagged.  Pass ``training_pvalues`` directly to
    skip recomputing them from ``gmm``.
    """
    if not 0 <= target_fpr <= 1:
        raise InputError("target_fpr must lie in [0, 1]")
    if training_pvalues is None:
        lm = np.asarray(training_log_margins, dtype=np.float64)
        if lm.size == 0:
            raise InputError("need at least one training margin")
        training_pvalues = pvalue_from_log_margin(gmm, lm)
    p = np.asarray(training_pvalues, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise InputError("need at least one training p-value")
    if target_fpr == 0:
        return 0.0
    return float(np.quantile(p, target_fpr, method="lower"))


@dataclass
class DetectionResult:
    sample_id: np.ndarray
    decided_class: np.ndarray
    margin: np.ndarray
    pvalue: np.ndarray
    flagged: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "decided_class", "margin", "pvalue", "flagged"])
        for row in zip(self.sample_id, self.decided_class, self.margin, self.pvalue,
                       self.flagged):
            w.writerow([int(row[0]), int(row[1]), repr(float(row[2])), repr(float(row[3])),
                        int(bool(row[4]))])
        return buf.getvalue()

    @property
    def flag_rate(self) -> float:
        return float(np.mean(self.flagged)) if len(self.flagged) else 0.0


def detect(model: Model, gmm, X, threshold, sample_ids=None) -> DetectionResult:
    """Score and flag samples by margin p-value.

    ``gmm`` is either one pooled :class:`GmmModel` or a mapping from class
    index to per-class models, looked up by the decided class.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    margin, decided = losses.decision_margin(forward(model, X))
    if isinstance(gmm, GmmModel):
        p = pvalue(gmm, margin)
    else:
        missing = sorted(set(decided.tolist()) - set(gmm))
        if missing:
            raise ConfigurationError(f"no margin model for decided classes {missing}")
        p = np.empty(margin.shape)
        for c in np.unique(decided):
            mask = decided == c
            p[mask] = pvalue(gmm[int(c)], margin[mask])
    ids = np.arange(X.shape[0]) if sample_ids is None else np.asarray(sample_ids)
    p = np.atleast_1d(p)
    return DetectionResult(ids, decided, margin, p, p < threshold)
