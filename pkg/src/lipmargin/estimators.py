"""scikit-learn compatible wrappers around the functional core.

``MarginClassifier`` and ``SoftmaxClassifier`` follow the usual
fit/predict/decision_function contract; ``LogMarginGMM`` is a density
estimator over log margins and ``MarginPValueDetector`` an outlier detector
(``predict`` returns -1 for low-margin samples, 1 otherwise).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, DensityMixin, OutlierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y, column_or_1d

from . import losses, margin_pvalue as pv
from .lipschitz import certify_dataset, lipschitz_bounds
from .nn import Model, forward
from .training import DualConfig, pretrain, train


class _NetClassifier(ClassifierMixin, BaseEstimator):
    def _encode(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need samples of at least two classes")
        self.n_features_in_ = X.shape[1]
        return X, y_idx

    def _init_model(self):
        dims = [self.n_features_in_, *self.hidden_dims, self.classes_.size]
        return Model.init(dims, seed=self.random_state, output_rectified=self.output_rectified)

    def _check_X(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def decision_function(self, X):
        """Raw network outputs (one column per class)."""
        return forward(self.model_, self._check_X(X))

    def predict(self, X):
        _, idx = losses.decision_margin(self.decision_function(X))
        return self.classes_[idx]

    def margins(self, X):
        """Decision margin of every row (top output minus runner-up)."""
        return losses.decision_margin(self.decision_function(X))[0]

    def label_margins(self, X, y):
        idx = np.searchsorted(self.classes_, column_or_1d(y))
        return losses.label_margin(self.decision_function(X), idx)

    def encode_labels(self, y):
        y = column_or_1d(y)
        idx = np.searchsorted(self.classes_, y)
        if np.any(idx >= self.classes_.size) or np.any(self.classes_[np.minimum(
                idx, self.classes_.size - 1)] != y):
            raise ValueError("y contains labels unseen during fit")
        return idx

    def certify(self, X, mc_samples=None, seed=0):
        """Certified purity radii for the rows of ``X``."""
        X = self._check_X(X)
        bound = lipschitz_bounds(self.model_, seed=seed)
        return certify_dataset(self.model_, X, bound, mc_samples=mc_samples, seed=seed)


class SoftmaxClassifier(_NetClassifier):
    """Network trained with (optionally margin-shifted) softmax cross-entropy."""

    def __init__(self, hidden_dims=(32,), output_rectified=False, margin=0.0, epochs=30,
                 lr=0.05, batch_size=32, random_state=0):
        self.hidden_dims = hidden_dims
        self.output_rectified = output_rectified
        self.margin = margin
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X, y_idx = self._encode(X, y)
        self.model_ = self._init_model()
        pretrain(self.model_, X, y_idx, epochs=self.epochs, lr=self.lr,
                 batch_size=self.batch_size, seed=self.random_state, mu=self.margin)
        return self


class MarginClassifier(_NetClassifier):
    """Network trained until every training sample's label margin reaches ``mu``.

    Parameters mirror :class:`lipmargin.training.DualConfig`.  After ``fit``,
    ``history_`` holds the outer-loop trace and ``lambdas_`` the final
    per-sample constraint weights.
    """

    def __init__(self, hidden_dims=(32,), output_rectified=True, mu=1.0, delta=2.0,
                 lambda_init=1.0, max_outer_iters=50, inner_epochs=5, lr=1e-2, batch_size=32,
                 loss_kind="dual", update_rule="multiplicative", additive_step=1.0,
                 decrease_factor=0.5, proportional_scale=1.0, pretrain_epochs=0,
                 pretrain_lr=None, normalize_lambda=True, max_grad_norm=1.0, random_state=0):
        self.hidden_dims = hidden_dims
        self.output_rectified = output_rectified
        self.mu = mu
        self.delta = delta
        self.lambda_init = lambda_init
        self.max_outer_iters = max_outer_iters
        self.inner_epochs = inner_epochs
        self.lr = lr
        self.batch_size = batch_size
        self.loss_kind = loss_kind
        self.update_rule = update_rule
        self.additive_step = additive_step
        self.decrease_factor = decrease_factor
        self.proportional_scale = proportional_scale
        self.pretrain_epochs = pretrain_epochs
        self.pretrain_lr = pretrain_lr
        self.normalize_lambda = normalize_lambda
        self.max_grad_norm = max_grad_norm
        self.random_state = random_state

    def dual_config(self) -> DualConfig:
        return DualConfig(
            mu=self.mu, delta=self.delta, lambda_init=self.lambda_init,
            max_outer_iters=self.max_outer_iters, inner_epochs=self.inner_epochs, lr=self.lr,
            batch_size=self.batch_size, loss_kind=self.loss_kind,
            update_rule=self.update_rule, additive_step=self.additive_step,
            decrease_factor=self.decrease_factor, proportional_scale=self.proportional_scale,
            pretrain_epochs=self.pretrain_epochs, pretrain_lr=self.pretrain_lr,
            normalize_lambda=self.normalize_lambda, max_grad_norm=self.max_grad_norm,
            seed=self.random_state,
        )

    def fit(self, X, y):
        config = self.dual_config()
        X, y_idx = self._encode(X, y)
        self.model_ = self._init_model()
        self.model_, self.history_ = train(self.model_, X, y_idx, config)
        self.lambdas_ = self.history_.lambdas
        return self


class LogMarginGMM(DensityMixin, BaseEstimator):
    """1-D Gaussian mixture over log margins with BIC-selected order.

    ``fit`` takes a vector of log margins.  Set ``n_components`` to fix the
    order instead of searching ``1..K_max``.
    """

    def __init__(self, K_max=10, restarts=5, n_components=None, tol=1e-5, max_iter=1000,
                 random_state=0):
        self.K_max = K_max
        self.restarts = restarts
        self.n_components = n_components
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        x = column_or_1d(check_array(np.reshape(X, (-1, 1)), dtype=np.float64))
        if self.n_components is None:
            self.gmm_ = pv.select_order_bic(x, self.K_max, self.random_state, self.restarts,
                                            self.tol, self.max_iter)
        else:
            self.gmm_ = pv.fit_gmm_em(x, self.n_components, self.random_state, self.tol,
                                      self.max_iter)
        self.weights_ = self.gmm_.weights
        self.means_ = self.gmm_.means
        self.sigmas_ = self.gmm_.sigmas
        self.n_components_ = self.gmm_.n_components
        return self

    def score_samples(self, X):
        check_is_fitted(self, "gmm_")
        return self.gmm_.log_density(np.reshape(np.asarray(X, dtype=np.float64), -1))

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))

    def bic(self, X=None):
        check_is_fitted(self, "gmm_")
        return self.gmm_.bic

    def pvalues(self, log_margins):
        check_is_fitted(self, "gmm_")
        return pv.pvalue_from_log_margin(self.gmm_, np.reshape(log_margins, -1))


def _as_model(classifier):
    if isinstance(classifier, Model):
        return classifier, None
    check_is_fitted(classifier, "model_")
    return classifier.model_, classifier


class MarginPValueDetector(OutlierMixin, BaseEstimator):
    """Flags inputs whose decision margin is atypically small.

    ``classifier`` is a fitted :class:`MarginClassifier` /
    :class:`SoftmaxClassifier` or a bare :class:`lipmargin.nn.Model` (then
    ``y`` must hold class indices).  ``mode`` is ``"pooled"`` or
    ``"per_class"``.
    """

    def __init__(self, classifier=None, mode="pooled", K_max=10, restarts=5, target_fpr=0.05,
                 random_state=0):
        self.classifier = classifier
        self.mode = mode
        self.K_max = K_max
        self.restarts = restarts
        self.target_fpr = target_fpr
        self.random_state = random_state

    def fit(self, X, y):
        if self.mode not in ("pooled", "per_class"):
            raise ValueError(f"mode must be 'pooled' or 'per_class', got {self.mode!r}")
        model, wrapper = _as_model(self.classifier)
        X, y = check_X_y(X, y, dtype=np.float64)
        y_idx = wrapper.encode_labels(y) if wrapper is not None else y.astype(np.int64)
        if self.mode == "pooled":
            lm = pv.collect_log_margins(model, X, y_idx, pv.POOLED)
            self.gmm_ = pv.select_order_bic(lm.values, self.K_max, self.random_state,
                                            self.restarts)
            train_p = pv.pvalue_from_log_margin(self.gmm_, lm.values)
        else:
            self.gmm_ = {}
            train_p = []
            for c in range(model.num_classes):
                lm = pv.collect_log_margins(model, X, y_idx, c)
                g = pv.select_order_bic(lm.values, self.K_max, self.random_state + c,
                                        self.restarts, class_id=c)
                self.gmm_[c] = g
                train_p.append(pv.pvalue_from_log_margin(g, lm.values))
            train_p = np.concatenate(train_p)
        self.train_pvalues_ = train_p
        self.threshold_ = pv.threshold_for_fpr(None, None, self.target_fpr,
                                               training_pvalues=train_p)
        self.model_ = model
        return self

    def score_samples(self, X):
        """Margin p-values (smaller means lower margin than training)."""
        return self.detect(X).pvalue

    def detect(self, X) -> pv.DetectionResult:
        check_is_fitted(self, "gmm_")
        return pv.detect(self.model_, self.gmm_, check_array(X, dtype=np.float64),
                         self.threshold_)

    def predict(self, X):
        return np.where(self.detect(X).flagged, -1, 1)
