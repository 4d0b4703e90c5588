"""Margin-constrained training, Lipschitz purity certificates and margin p-values
for small dense classifiers."""
from .attacks import AttackConfig, fgsm, transfer_eval
from .data import Dataset, generate_blobs, load_idx
from .estimators import LogMarginGMM, MarginClassifier, MarginPValueDetector, SoftmaxClassifier
from .lipschitz import (
    CertificationReport,
    LipschitzBound,
    certify_dataset,
    lipschitz_bounds,
    mc_purity_check,
    radius_prop41,
    radius_thm1,
    spectral_norm,
)
from .losses import decision_margin, label_margin
from .nn import DenseLayer, Model, backward, deserialize, forward, serialize, sgd_step
from .margin_pvalue import GmmModel, detect, fit_gmm_em, pvalue, select_order_bic, threshold_for_fpr
from .training import DualConfig, TrainHistory, check_constraints, train, update_weights

__version__ = "0.1.0"
