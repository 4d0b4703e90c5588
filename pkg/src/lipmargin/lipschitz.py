"""Lipschitz upper bounds for dense ReLU networks and certified purity radii.

Two constants are bounded by composing per-layer operator norms:

* ``L_2``   -- l2 -> l2, the product of every layer's spectral norm;
* ``L_inf`` -- l2 -> l_inf, the product of the hidden layers' spectral norms
  times the largest row norm of the output layer.

For a model with rectified outputs and decision margin ``m`` at ``x`` the
l2 ball of radius ``m / (2 L_inf)`` is class pure; without rectification the
ball of radius ``m / (sqrt(2) L_2)`` is.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .exceptions import InputError
from .nn import ACTIVATIONS, Model, forward


def spectral_norm(matrix, max_iters=10_000, tol=1e-12, seed=0, return_info=False):
    """Largest singular value of ``matrix`` by power iteration on ``M^T M``.

    Stops when the estimate changes by less than ``tol`` relative, or after
    ``max_iters``.  The result is ``|M v|`` for the final unit iterate ``v``,
    which never exceeds the true value.
    """
    M = np.asarray(matrix, dtype=np.float64)
    if M.ndim != 2 or 0 in M.shape:
        raise InputError(f"expected a nonempty matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InputError("matrix has non-finite entries")
    if not np.any(M):
        return (0.0, True, 0) if return_info else 0.0

    v = np.random.default_rng(seed).standard_normal(M.shape[1])
    v /= np.linalg.norm(v)
    sigma = np.linalg.norm(M @ v)
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        w = M.T @ (M @ v)
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            # started in the null space; restart along the largest column
            v = np.zeros(M.shape[1])
            v[np.argmax(np.linalg.norm(M, axis=0))] = 1.0
            continue
        v = w / norm_w
        new_sigma = np.linalg.norm(M @ v)
        if abs(new_sigma - sigma) <= tol * new_sigma:
            sigma = new_sigma
            converged = True
            break
        sigma = new_sigma
    sigma = float(sigma)
    return (sigma, converged, it) if return_info else sigma


def max_row_norm(matrix) -> float:
    """l2 -> l_inf operator norm: the largest Euclidean row norm."""
    return float(np.max(np.linalg.norm(np.asarray(matrix, dtype=np.float64), axis=1)))


@dataclass
class LipschitzBound:
    per_layer_spectral: list[float]
    last_layer_maxrow: float
    L_inf: float
    L_2: float
    power_iters: int
    tol: float
    seed: int = 0
    converged: list[bool] = field(default_factory=list)

    def to_dict(self):
        return {
            "per_layer_spectral": list(self.per_layer_spectral),
            "last_layer_maxrow": self.last_layer_maxrow,
            "L_inf": self.L_inf,
            "L_2": self.L_2,
            "power_iters": self.power_iters,
            "tol": self.tol,
            "seed": self.seed,
            "converged": list(self.converged),
        }


def lipschitz_bounds(model: Model, max_iters=10_000, tol=1e-12, seed=0) -> LipschitzBound:
    """Composed upper bounds on the network's ``L_inf`` and ``L_2`` constants.

    Each spectral norm is inflated by ``(1 + tol)`` to cover the power
    iteration's underestimate.  Biases and the 1-Lipschitz activations
    (including output rectification) do not enter.
    """
    for layer in model.layers:
        if layer.activation not in ACTIVATIONS:
            raise InputError(f"cannot bound activation {layer.activation!r}")
    spectral, flags = [], []
    for k, layer in enumerate(model.layers):
        s, ok, _ = spectral_norm(layer.weights, max_iters, tol, seed + k, return_info=True)
        spectral.append(s * (1.0 + tol))
        flags.append(ok)
    hidden = math.prod(spectral[:-1])
    maxrow = max_row_norm(model.layers[-1].weights)
    # sigma_max >= every row norm, so this lift is sound and gives L_inf <= L_2
    spectral[-1] = max(spectral[-1], maxrow)
    return LipschitzBound(
        per_layer_spectral=spectral,
        last_layer_maxrow=maxrow,
        L_inf=hidden * maxrow,
        L_2=hidden * spectral[-1],
        power_iters=max_iters,
        tol=tol,
        seed=seed,
        converged=flags,
    )


def radius_thm1(margin, L_inf):
    """``margin / (2 L_inf)``; needs rectified outputs.  ``inf`` if ``L_inf == 0``."""
    margin = np.asarray(margin, dtype=np.float64)
    if L_inf < 0:
        raise InputError("Lipschitz constant must be nonnegative")
    if L_inf == 0:
        out = np.where(margin > 0, np.inf, 0.0)
    else:
        out = np.maximum(margin, 0.0) / (2.0 * L_inf)
    return float(out) if out.ndim == 0 else out


def radius_prop41(margin, L_2):
    """``margin / (sqrt(2) L_2)``; valid without output rectification."""
    margin = np.asarray(margin, dtype=np.float64)
    if L_2 < 0:
        raise InputError("Lipschitz constant must be nonnegative")
    if L_2 == 0:
        out = np.where(margin > 0, np.inf, 0.0)
    else:
        out = np.maximum(margin, 0.0) / (math.sqrt(2.0) * L_2)
    return float(out) if out.ndim == 0 else out


def sample_ball(center, radius, n_samples, rng):
    """Uniform draws from the l2 ball: Gaussian direction, radius ``r * U^(1/n)``."""
    center = np.asarray(center, dtype=np.float64)
    dim = center.shape[0]
    directions = rng.standard_normal((n_samples, dim))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    radii = radius * rng.random((n_samples, 1)) ** (1.0 / dim)
    return center + directions / norms * radii


def mc_purity_check(model: Model, x, radius, n_samples=10_000, seed=0) -> int:
    """Number of uniform draws in ``B_2(x, radius)`` whose decided class differs from x's."""
    if radius < 0:
        raise InputError("radius must be nonnegative")
    if n_samples < 1:
        raise InputError("n_samples must be positive")
    x = np.asarray(x, dtype=np.float64)
    _, c = losses.decision_margin(forward(model, x))
    if radius == 0:
        return 0
    if not np.isfinite(radius):
        raise InputError("cannot sample an infinite ball")
    ys = sample_ball(x, radius, n_samples, np.random.default_rng(seed))
    _, cy = losses.decision_margin(forward(model, ys))
    return int(np.count_nonzero(cy != c))


CERT_COLUMNS = ("sample_id", "margin", "radius_thm1", "radius_prop41", "radius_best",
                "mc_violations")


@dataclass
class CertificationReport:
    sample_id: np.ndarray
    margin: np.ndarray
    radius_thm1: np.ndarray | None
    radius_prop41: np.ndarray
    radius_best: np.ndarray
    mc_violations: np.ndarray | None = None

    def rows(self):
        for i in range(len(self.sample_id)):
            yield {
                "sample_id": int(self.sample_id[i]),
                "margin": float(self.margin[i]),
                "radius_thm1": None if self.radius_thm1 is None else float(self.radius_thm1[i]),
                "radius_prop41": float(self.radius_prop41[i]),
                "radius_best": float(self.radius_best[i]),
                "mc_violations": None if self.mc_violations is None
                else int(self.mc_violations[i]),
            }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CERT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                             for k, v in row.items()})
        return buf.getvalue()

    def summary(self) -> dict:
        def stats(a):
            if a is None or len(a) == 0:
                return None
            finite = a[np.isfinite(a)]
            return {"min": float(a.min()), "median": float(np.median(a)),
                    "max": float(a.max()), "n_finite": int(finite.size)}

        return {
            "n_samples": int(len(self.sample_id)),
            "radius_thm1": stats(self.radius_thm1),
            "radius_prop41": stats(self.radius_prop41),
            "radius_best": stats(self.radius_best),
            "mc_checked": None if self.mc_violations is None
            else int(np.count_nonzero(self.mc_violations >= 0)),
            "mc_total_violations": None if self.mc_violations is None
            else int(self.mc_violations[self.mc_violations >= 0].sum()),
        }


def certify_dataset(model: Model, X, bound: LipschitzBound | None = None, mc_samples=None,
                    mc_points=None, seed=0, sample_ids=None) -> CertificationReport:
    """Certified radii for every row of ``X``, optionally spot-checked by sampling.

    ``mc_points`` limits the Monte-Carlo check to the first that many samples;
    unchecked rows get ``-1`` in ``mc_violations``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if bound is None:
        bound = lipschitz_bounds(model, seed=seed)
    margin, _ = losses.decision_margin(forward(model, X))
    r_prop = radius_prop41(margin, bound.L_2)
    r_thm = radius_thm1(margin, bound.L_inf) if model.output_rectified else None
    r_best = r_prop if r_thm is None else np.maximum(r_thm, r_prop)
    ids = np.arange(X.shape[0]) if sample_ids is None else np.asarray(sample_ids)
    mc = None
    if mc_samples:
        n_check = X.shape[0] if mc_points is None else min(mc_points, X.shape[0])
        mc = np.full(X.shape[0], -1, dtype=np.int64)
        rng = np.random.default_rng(seed)
        for i in range(n_check):
            r = r_best[i]
            if np.isfinite(r):
                mc[i] = mc_purity_check(model, X[i], r, mc_samples,
                                        int(rng.integers(2**63 - 1)))
    return CertificationReport(ids, margin, r_thm, r_prop, r_best, mc)
