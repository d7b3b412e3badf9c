"""Regularization terms: Gaussian-mixture pose prior, shape regularizer,
hinge bending penalty, plus an EM fitter to build priors for synthetic models.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import _diff
from .arrayjson import array_field, arrays_to_lists, dump_doc, int_field, load_doc


class PriorError(ValueError):
    pass


@dataclass(eq=False)
class GmmPrior:
    """Gaussian mixture over body pose (root rotation excluded).

    Stores per-component precision matrices and cached log-normalizers
    0.5 * (D log 2pi - log det precision).
    """

    means: np.ndarray        # (K, D)
    precisions: np.ndarray   # (K, D, D) symmetric positive definite
    weights: np.ndarray      # (K,) positive, sums to 1
    log_normalizers: np.ndarray = field(default=None)  # type: ignore[assignment]
    _tensors: "_diff.GmmTensors | None" = field(default=None, repr=False)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.precisions = np.asarray(self.precisions, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        k, d = self.means.shape
        if self.precisions.shape != (k, d, d):
            raise PriorError("precisions must be (K, D, D)")
        if self.weights.shape != (k,):
            raise PriorError("weights must be (K,)")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise PriorError("weights must be positive and sum to 1")
        for i in range(k):
            if not np.allclose(self.precisions[i], self.precisions[i].T, atol=1e-9):
                raise PriorError(f"precision {i} is not symmetric")
            sign, logdet = np.linalg.slogdet(self.precisions[i])
            if sign <= 0:
                raise PriorError(f"precision {i} is not positive definite")
        if self.log_normalizers is None:
            logdets = np.array([np.linalg.slogdet(p)[1] for p in self.precisions])
            self.log_normalizers = 0.5 * (d * np.log(2.0 * np.pi) - logdets)
        else:
            self.log_normalizers = np.asarray(self.log_normalizers, dtype=np.float64)

    @property
    def component_count(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def tensors(self) -> "_diff.GmmTensors":
        if self._tensors is None:
            self._tensors = _diff.GmmTensors.from_prior(self)
        return self._tensors


def gmm_nll(prior: GmmPrior, theta_body, mode: str = "min-component") -> float:
    """Negative log likelihood of a body-pose vector under the mixture.

    Default "min-component" takes the best single component (the convention
    of classical body-fitting pipelines); "log-sum-exp" evaluates the exact
    mixture NLL for ablations.
    """
    theta = np.asarray(theta_body, dtype=np.float64)
    if theta.shape != (prior.dim,):
        raise PriorError(f"pose vector must be ({prior.dim},), got {theta.shape}")
    with torch.no_grad():
        return float(_diff.gmm_nll_t(prior.tensors(), _diff.to_t(theta), mode))


def shape_reg(shape) -> float:
    """Squared L2 norm of the shape coefficients."""
    beta = np.asarray(shape, dtype=np.float64)
    return float(beta @ beta)


def bending(pose, hinge_indices, signs) -> float:
    """Sum of exp(sign * coordinate) over hinge pose coordinates."""
    flat = np.asarray(pose, dtype=np.float64).reshape(-1)
    idx = np.asarray(hinge_indices, dtype=np.int64)
    sgn = np.asarray(signs, dtype=np.float64)
    if idx.size and (idx.min() < 0 or idx.max() >= flat.size):
        raise PriorError("hinge index out of range")
    return float(np.exp(sgn * flat[idx]).sum())


# ---------------------------------------------------------------------------
# EM fitting
# ---------------------------------------------------------------------------

def fit_gmm(samples, components: int, seed: int = 0, max_iter: int = 500,
            tol: float = 1e-8, cov_floor: float = 1e-6) -> GmmPrior:
    """Fit a full-covariance Gaussian mixture by EM.

    Deterministic per seed (means initialized from distinct random samples,
    uniform responsibilities otherwise). Covariances are floored at
    cov_floor * I before inversion. Converged when the mean log-likelihood
    improves by less than tol.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise PriorError("samples must be (M, D)")
    m, d = x.shape
    if m < 10 * components:
        raise PriorError(f"need at least {10 * components} samples for K={components}, got {m}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    means = x[rng.choice(m, size=components, replace=False)].copy()
    covs = np.tile(np.cov(x.T).reshape(d, d) + cov_floor * np.eye(d), (components, 1, 1))
    weights = np.full(components, 1.0 / components)

    prev_ll = -np.inf
    for _ in range(max_iter):
        log_resp = np.empty((m, components))
        for k in range(components):
            diff = x - means[k]
            prec = np.linalg.inv(covs[k])
            _, logdet_cov = np.linalg.slogdet(covs[k])
            quad = np.einsum("md,de,me->m", diff, prec, diff)
            log_resp[:, k] = np.log(weights[k]) - 0.5 * (quad + logdet_cov + d * np.log(2.0 * np.pi))
        norm = _logsumexp(log_resp)
        ll = float(norm.mean())
        resp = np.exp(log_resp - norm[:, None])

        nk = resp.sum(axis=0)
        weights = nk / m
        means = (resp.T @ x) / nk[:, None]
        for k in range(components):
            diff = x - means[k]
            covs[k] = (resp[:, k, None] * diff).T @ diff / nk[k] + cov_floor * np.eye(d)

        if ll - prev_ll < tol:
            break
        prev_ll = ll

    precisions = np.linalg.inv(covs)
    precisions = 0.5 * (precisions + precisions.transpose(0, 2, 1))
    return GmmPrior(means=means, precisions=precisions, weights=weights / weights.sum())


def _logsumexp(a: np.ndarray) -> np.ndarray:
    hi = a.max(axis=1)
    return hi + np.log(np.exp(a - hi[:, None]).sum(axis=1))


def gmm_responsibilities(prior: GmmPrior, samples) -> np.ndarray:
    """Posterior component responsibilities (M, K) for given samples."""
    x = np.asarray(samples, dtype=np.float64)
    log_p = np.empty((x.shape[0], prior.component_count))
    for k in range(prior.component_count):
        diff = x - prior.means[k]
        quad = np.einsum("md,de,me->m", diff, prior.precisions[k], diff)
        log_p[:, k] = np.log(prior.weights[k]) - 0.5 * quad - prior.log_normalizers[k]
    return np.exp(log_p - _logsumexp(log_p)[:, None])


# ---------------------------------------------------------------------------
# File schema
# ---------------------------------------------------------------------------

def save_prior(prior: GmmPrior, path) -> None:
    doc = {"K": prior.component_count, "D": prior.dim}
    doc.update(arrays_to_lists(means=prior.means, precisions=prior.precisions,
                               weights=prior.weights))
    dump_doc(doc, path)


def load_prior(path) -> GmmPrior:
    doc = load_doc(path)
    k = int_field(doc, "K")
    d = int_field(doc, "D")
    return GmmPrior(
        means=array_field(doc, "means", (k, d)),
        precisions=array_field(doc, "precisions", (k, d, d)),
        weights=array_field(doc, "weights", (k,)),
    )
