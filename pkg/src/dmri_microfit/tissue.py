"""CSF/GM/WM probability maps from a T1-weighted volume.

Hidden Markov random field with Gaussian class likelihoods and a Potts
prior over the 6-neighbourhood, solved with mean-field EM. Posterior sweeps
alternate between the two checkerboard colours so every in-place update of
one colour sees a fixed neighbourhood.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from sklearn.cluster import KMeans

from .volume_io import Volume4D

log = logging.getLogger(__name__)

N_CLASSES = 3
CLASS_NAMES = ("csf", "gm", "wm")


class SegmentationError(ValueError):
    pass


@dataclass
class TissueProbMaps:
    p_csf: np.ndarray
    p_gm: np.ndarray
    p_wm: np.ndarray
    class_means: np.ndarray
    mask: np.ndarray
    class_vars: Optional[np.ndarray] = None
    converged: bool = True
    n_iter: int = 0

    @property
    def stack(self) -> np.ndarray:
        """(W, H, S, 3) in CSF, GM, WM order."""
        return np.stack([self.p_csf, self.p_gm, self.p_wm], axis=-1)

    def hard_labels(self) -> np.ndarray:
        lab = np.argmax(self.stack, axis=-1)
        return np.where(self.mask, lab, -1)

    def volumes(self, spacing=(1.0, 1.0, 1.0)):
        return {f"pve_{name}": Volume4D(p, spacing, "probability")
                for name, p in zip(CLASS_NAMES, (self.p_csf, self.p_gm, self.p_wm))}


def _kmeans_params(values: np.ndarray, seed: int, n_init: int = 10):
    km = KMeans(n_clusters=N_CLASSES, n_init=n_init, random_state=seed).fit(values[:, None])
    labels = km.labels_
    order = np.argsort(km.cluster_centers_[:, 0])
    relabel = np.empty(N_CLASSES, dtype=int)
    relabel[order] = np.arange(N_CLASSES)
    labels = relabel[labels]
    resp = np.eye(N_CLASSES)[labels]
    return resp


def _variance_floor(values: np.ndarray) -> float:
    return (1e-3 * (values.max() - values.min())) ** 2


def _m_step(values: np.ndarray, resp: np.ndarray, floor: float):
    nk = resp.sum(axis=0)
    nk_safe = np.where(nk > 0, nk, 1.0)
    weights = nk / len(values)
    means = resp.T @ values / nk_safe
    var = (resp * (values[:, None] - means) ** 2).sum(axis=0) / nk_safe
    return weights, means, np.maximum(var, floor)


def _log_likelihood(values: np.ndarray, weights, means, var) -> np.ndarray:
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    return logw - 0.5 * np.log(2 * np.pi * var) - 0.5 * (values[:, None] - means) ** 2 / var


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _neighbour_sum(q: np.ndarray) -> np.ndarray:
    """Sum of the 6 face neighbours of a (W, H, S, K) array, zero outside."""
    out = np.zeros_like(q)
    for axis in range(3):
        sl_lo = [slice(None)] * 4
        sl_hi = [slice(None)] * 4
        sl_lo[axis] = slice(1, None)
        sl_hi[axis] = slice(None, -1)
        out[tuple(sl_hi)] += q[tuple(sl_lo)]
        out[tuple(sl_lo)] += q[tuple(sl_hi)]
    return out


def segment_hmrf(t1, mask, beta: float = 1.0, max_iters: int = 100, tol: float = 1e-4,
                 seed: int = 0, callback: Optional[Callable[[int, np.ndarray], None]] = None
                 ) -> TissueProbMaps:
    """Segment a T1w volume into CSF, GM and WM probabilities.

    Parameters
    ----------
    t1 : Volume4D or ndarray
        Single-channel image.
    mask : ndarray of bool
        Voxels to classify.
    beta : float
        Potts coupling; 0 gives plain Gaussian-mixture EM.
    callback : callable, optional
        Called as ``callback(iteration, posteriors)`` after every E-step with
        the (W, H, S, 3) posterior array (zero outside the mask).
    """
    img = t1.data[..., 0] if isinstance(t1, Volume4D) else np.asarray(t1, dtype=np.float64)
    if img.ndim == 4:
        if img.shape[3] != 1:
            raise SegmentationError("T1 volume must be single-channel")
        img = img[..., 0]
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 4:
        mask = mask[..., 0]
    if mask.shape != img.shape:
        raise SegmentationError(f"mask shape {mask.shape} differs from image {img.shape}")
    if not mask.any():
        raise SegmentationError("mask is empty")
    if beta < 0:
        raise SegmentationError("beta must be non-negative")
    values = img[mask]
    if len(np.unique(values)) < N_CLASSES:
        raise SegmentationError("fewer than 3 distinct intensities inside the mask")

    floor = _variance_floor(values)
    resp = _kmeans_params(values, seed)
    weights, means, var = _m_step(values, resp, floor)

    q = np.zeros(img.shape + (N_CLASSES,))
    q[mask] = resp
    idx = np.indices(img.shape).sum(axis=0) % 2
    colours = [mask & (idx == 0), mask & (idx == 1)]

    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        prev = q[mask].copy()
        loglik = np.zeros_like(q)
        loglik[mask] = _log_likelihood(values, weights, means, var)
        if beta > 0:
            for colour in colours:
                nb = _neighbour_sum(q)
                q[colour] = _softmax(loglik[colour] + beta * nb[colour])
        else:
            q[mask] = _softmax(loglik[mask])
        if callback is not None:
            callback(it, q)
        change = float(np.abs(q[mask] - prev).max())
        weights, means, var = _m_step(values, q[mask], floor)
        if change < tol:
            converged = True
            break
    if not converged:
        log.warning("HMRF did not converge in %d iterations", max_iters)

    order = np.argsort(means)
    q = q[..., order]
    return TissueProbMaps(q[..., 0], q[..., 1], q[..., 2], means[order], mask,
                          var[order], converged, it)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    denom = a.sum() + b.sum()
    return 1.0 if denom == 0 else 2.0 * float(np.logical_and(a, b).sum()) / float(denom)
