"""Classification and regression heads adapted in the embedding space.

Classification: per-class prototype means of the labeled embeddings, class
posteriors from a softmax over negative squared distances. Regression: exact
Gaussian-process posterior per target with an RBF kernel whose log-lengthscale
and log-noise are trainable alongside the embedding network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    InvalidEpisodeError,
    InvalidShapeError,
    NumericalFailureError,
)

PROB_FLOOR = 1e-12
VARIANCE_FLOOR = 1e-8
MAX_JITTER = 1e-4


@dataclass
class Prototypes:
    means: Tensor        # (n_classes, embed_dim)
    counts: np.ndarray   # (n_classes,) labeled examples per class


@dataclass
class GpHead:
    """RBF-kernel GP hyperparameters, stored in log space so they stay
    positive under unconstrained gradient steps."""

    log_lengthscale: Tensor  # scalar
    log_noise: Tensor        # scalar, log of the observation-noise variance
    jitter: float = 1e-8


def init_gp_head(lengthscale: float = 1.0, noise_variance: float = 0.01,
                 dtype=np.float32) -> GpHead:
    return GpHead(
        log_lengthscale=Tensor(np.asarray(math.log(lengthscale), dtype=dtype),
                               requires_grad=True),
        log_noise=Tensor(np.asarray(math.log(noise_variance), dtype=dtype),
                         requires_grad=True),
    )


def compute_prototypes(z_labeled, y_labeled: np.ndarray) -> Prototypes:
    """Mean labeled embedding per class. Differentiable w.r.t. the embeddings
    (implemented as a fixed averaging matrix applied to them)."""
    z_labeled = ad.as_tensor(z_labeled)
    y = np.asarray(y_labeled, dtype=np.float64)
    counts = y.sum(axis=0)
    if np.any(counts < 1):
        empty = [int(c) for c in np.flatnonzero(counts < 1)]
        raise InvalidEpisodeError(f"classes without labeled examples: {empty}")
    averager = (y / counts).T.astype(z_labeled.dtype)  # (C, n_labeled)
    means = ad.matmul(Tensor(averager), z_labeled)
    return Prototypes(means=means, counts=counts)


def _pairwise_sqdist(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distances between the rows of two matrices; tiny
    negative values from cancellation are clamped to zero."""
    aa = ad.tsum(ad.mul(a, a), axis=1, keepdims=True)          # (n, 1)
    bb = ad.reshape(ad.tsum(ad.mul(b, b), axis=1), (1, b.shape[0]))
    cross = ad.matmul(a, ad.transpose2d(b))
    return ad.clamp_min(ad.add(ad.sub(aa, ad.mul(cross, 2.0)), bb), 0.0)


def class_posterior(z, prototypes: Prototypes) -> Tensor:
    """Softmax over negative squared distances to the class prototypes.

    Accepts one embedding (1-D) or a matrix of embeddings; the result matches
    the input's number of dimensions.
    """
    z = ad.as_tensor(z)
    single = z.ndim == 1
    if single:
        z = ad.reshape(z, (1, z.shape[0]))
    if z.ndim != 2 or z.shape[1] != prototypes.means.shape[1]:
        raise InvalidShapeError(
            f"embedding dim {z.shape} does not match prototypes "
            f"{prototypes.means.shape}"
        )
    logits = ad.neg(_pairwise_sqdist(z, prototypes.means))
    post = ad.softmax_rows(logits)
    return ad.reshape(post, (post.shape[1],)) if single else post


def classification_loss(posteriors: Tensor, y_unlabeled: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the held-out labels; probabilities are
    floored at 1e-12 so the loss never becomes infinite."""
    y = np.asarray(y_unlabeled)
    if posteriors.shape != y.shape:
        raise InvalidShapeError(
            f"posteriors {posteriors.shape} vs labels {y.shape}"
        )
    picked = ad.tsum(ad.mul(posteriors, Tensor(y.astype(posteriors.dtype))), axis=1)
    return ad.neg(ad.tmean(ad.log(ad.clamp_min(picked, PROB_FLOOR))))


def rbf_kernel(a, b, head: GpHead) -> Tensor:
    """k(z, z') = exp(-||z - z'||^2 / (2 l^2)). Vector inputs give a scalar;
    matrix inputs give the full cross-kernel matrix."""
    a = ad.as_tensor(a)
    b = ad.as_tensor(b)
    scalar = a.ndim == 1 and b.ndim == 1
    if a.ndim == 1:
        a = ad.reshape(a, (1, a.shape[0]))
    if b.ndim == 1:
        b = ad.reshape(b, (1, b.shape[0]))
    if a.shape[1] != b.shape[1]:
        raise InvalidShapeError(f"kernel inputs disagree: {a.shape} vs {b.shape}")
    lengthscale = ad.exp(head.log_lengthscale)
    denom = ad.mul(ad.mul(lengthscale, lengthscale), 2.0)
    k = ad.exp(ad.neg(ad.div(_pairwise_sqdist(a, b), denom)))
    return ad.reshape(k, ()) if scalar else k


def gp_predict(z_unlabeled, z_labeled, y_labeled: np.ndarray, head: GpHead):
    """Exact GP posterior for every query and every target column.

    Returns ``(mean, variance)`` with shapes (n_unlabeled, n_targets) and
    (n_unlabeled,); the variance is shared across targets. The linear solve
    goes through a Cholesky factorization with the learned noise variance
    plus a jitter that escalates tenfold on failure up to 1e-4.
    """
    z_unlabeled = ad.as_tensor(z_unlabeled)
    z_labeled = ad.as_tensor(z_labeled)
    y = np.asarray(y_labeled)
    if z_labeled.shape[0] < 1:
        raise InvalidEpisodeError("GP prediction needs at least one labeled example")
    targets = Tensor(y.astype(z_labeled.dtype))
    k_ll = rbf_kernel(z_labeled, z_labeled, head)
    k_lu = rbf_kernel(z_labeled, z_unlabeled, head)
    noise = ad.exp(head.log_noise)
    eye = Tensor(np.eye(z_labeled.shape[0], dtype=z_labeled.dtype))

    jitter = head.jitter
    while True:
        gram = ad.add(k_ll, ad.mul(eye, ad.add(noise, jitter)))
        try:
            solved = ad.solve_spd(gram, ad.concat([targets, k_lu], axis=1))
            break
        except NumericalFailureError:
            jitter *= 10.0
            if jitter > MAX_JITTER:
                raise
    n_targets = y.shape[1]
    s_y = solved[:, :n_targets]
    s_k = solved[:, n_targets:]
    mean = ad.matmul(ad.transpose2d(k_lu), s_y)
    explained = ad.tsum(ad.mul(k_lu, s_k), axis=0)
    variance = ad.clamp_min(ad.sub(1.0, explained), 0.0)
    return mean, variance


def regression_loss(mean: Tensor, variance: Tensor, y_unlabeled: np.ndarray) -> Tensor:
    """Mean Gaussian negative log-likelihood of the held-out targets under
    the per-target predictive distributions; variances floored at 1e-8."""
    y = np.asarray(y_unlabeled)
    if mean.shape != y.shape:
        raise InvalidShapeError(f"means {mean.shape} vs targets {y.shape}")
    var = ad.reshape(ad.clamp_min(variance, VARIANCE_FLOOR), (mean.shape[0], 1))
    resid = ad.sub(mean, Tensor(y.astype(mean.dtype)))
    quad = ad.div(ad.mul(resid, resid), var)
    return ad.mul(ad.tmean(ad.add(ad.add(ad.log(var), quad), math.log(2.0 * math.pi))), 0.5)
