"""Weighted least-squares diffusion tensor fitting and tensor scalars."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .volume_io import GradientTable, ParamMaps

# per-voxel quality flags
FLAG_SIGNAL_CLAMPED = 1
FLAG_EIGEN_CLAMPED = 2
FLAG_FAILED = 4


class RankDeficientError(ValueError):
    pass


class NonPositiveSignalError(ValueError):
    pass


def design_matrix(table: GradientTable) -> np.ndarray:
    """Columns: 1, -b gx^2, -b gy^2, -b gz^2, -2b gxgy, -2b gxgz, -2b gygz."""
    b = table.bvals
    gx, gy, gz = table.bvecs.T
    return np.stack([np.ones_like(b), -b * gx * gx, -b * gy * gy, -b * gz * gz,
                     -2 * b * gx * gy, -2 * b * gx * gz, -2 * b * gy * gz], axis=1)


def check_design(table: GradientTable) -> np.ndarray:
    X = design_matrix(table)
    if not np.any(table.b0_mask):
        raise RankDeficientError("protocol has no b=0 entry")
    if len(table) < 7 or np.linalg.matrix_rank(X) < 7:
        raise RankDeficientError("design matrix is rank deficient (too few or collinear directions)")
    return X


def clamp_signals(signals: np.ndarray):
    """Replace S <= 0 by 1e-3 times the smallest positive signal of the voxel.

    Returns the clamped copy and a boolean array marking voxels that were
    touched. Voxels without any positive signal are left as they are.
    """
    S = np.array(signals, dtype=np.float64, copy=True)
    bad = S <= 0
    touched = bad.any(axis=-1)
    if touched.any():
        pos = np.where(S > 0, S, np.inf).min(axis=-1)
        fill = np.where(np.isfinite(pos), pos * 1e-3, 0.0)
        S = np.where(bad, fill[..., None], S)
    return S, touched


def tensor_from_elements(d: np.ndarray) -> np.ndarray:
    """(..., 6) Dxx, Dyy, Dzz, Dxy, Dxz, Dyz -> (..., 3, 3)."""
    d = np.asarray(d)
    xx, yy, zz, xy, xz, yz = np.moveaxis(d, -1, 0)
    return np.stack([np.stack([xx, xy, xz], -1), np.stack([xy, yy, yz], -1),
                     np.stack([xz, yz, zz], -1)], -2)


def eig_sym3(d: np.ndarray):
    """Closed-form eigen-decomposition of symmetric 3x3 matrices.

    Parameters
    ----------
    d : ndarray, shape (..., 6)
        Tensor elements in (xx, yy, zz, xy, xz, yz) order.

    Returns
    -------
    evals : ndarray, shape (..., 3)
        Sorted descending.
    evec1 : ndarray, shape (..., 3)
        Unit eigenvector of the largest eigenvalue.
    """
    d = np.asarray(d, dtype=np.float64)
    xx, yy, zz, xy, xz, yz = np.moveaxis(d, -1, 0)
    q = (xx + yy + zz) / 3.0
    p1 = xy**2 + xz**2 + yz**2
    p2 = (xx - q) ** 2 + (yy - q) ** 2 + (zz - q) ** 2 + 2.0 * p1
    p = np.sqrt(p2 / 6.0)
    safe = np.where(p > 0, p, 1.0)
    bxx, byy, bzz = (xx - q) / safe, (yy - q) / safe, (zz - q) / safe
    bxy, bxz, byz = xy / safe, xz / safe, yz / safe
    det = (bxx * (byy * bzz - byz * byz) - bxy * (bxy * bzz - byz * bxz)
           + bxz * (bxy * byz - byy * bxz))
    r = np.clip(det / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    l1 = q + 2.0 * p * np.cos(phi)
    l3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    l2 = 3.0 * q - l1 - l3
    evals = np.stack([l1, l2, l3], -1)
    evals = np.where((p > 0)[..., None], evals, q[..., None])

    # eigenvector of l1: largest cross product of two rows of (A - l1 I)
    A = tensor_from_elements(d) - l1[..., None, None] * np.eye(3)
    r0, r1, r2 = A[..., 0, :], A[..., 1, :], A[..., 2, :]
    cands = np.stack([np.cross(r0, r1), np.cross(r0, r2), np.cross(r1, r2)], -2)
    norms = np.linalg.norm(cands, axis=-1)
    best = np.argmax(norms, axis=-1)
    vec = np.take_along_axis(cands, best[..., None, None], axis=-2)[..., 0, :]
    nbest = np.take_along_axis(norms, best[..., None], axis=-1)[..., 0]
    scale = np.maximum(np.abs(evals).max(axis=-1), 1e-300)
    # near-degenerate top pair: cross products collapse, fall back to LAPACK
    weak = nbest <= 1e-8 * scale**2
    evec = vec / np.where(nbest > 0, nbest, 1.0)[..., None]
    if np.any(weak):
        w, v = np.linalg.eigh(tensor_from_elements(d[weak]))
        evec[weak] = v[..., :, -1]
    evec = np.where((p > 0)[..., None], evec, np.array([1.0, 0.0, 0.0]))
    return evals, evec


@dataclass(frozen=True)
class TensorFit:
    d_elements: np.ndarray
    ln_s0: float
    eigenvalues: np.ndarray
    principal_dir: np.ndarray
    flags: int = 0

    @property
    def tensor(self) -> np.ndarray:
        return tensor_from_elements(self.d_elements)


@dataclass(frozen=True)
class DtiScalars:
    fa: float
    md: float
    ad: float
    rd: float


def _solve_wls(logS: np.ndarray, X: np.ndarray) -> np.ndarray:
    """OLS then one WLS pass with weights (predicted S)^2; logS is (V, D)."""
    beta = np.linalg.lstsq(X, logS.T, rcond=None)[0].T
    w = np.exp(2.0 * (beta @ X.T))
    XtWX = np.einsum("vd,di,dj->vij", w, X, X)
    XtWy = np.einsum("vd,di,vd->vi", w, X, logS)
    return np.linalg.solve(XtWX, XtWy[..., None])[..., 0]


def fit_tensor_batch(signals: np.ndarray, table: GradientTable):
    """Vectorized fit of (V, D) signals.

    Returns a dict of arrays: d_elements (V, 6), ln_s0 (V,), eigenvalues
    (V, 3), principal_dir (V, 3), flags (V,).
    """
    X = check_design(table)
    S = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    if S.shape[-1] != len(table):
        raise ValueError(f"signals have {S.shape[-1]} entries, table has {len(table)}")
    S, clamped = clamp_signals(S)
    flags = np.where(clamped, FLAG_SIGNAL_CLAMPED, 0)
    dead = ~np.all(S > 0, axis=1)
    flags = np.where(dead, flags | FLAG_FAILED, flags)
    S = np.where(dead[:, None], 1.0, S)

    beta = _solve_wls(np.log(S), X)
    d = beta[:, 1:]
    evals, evec = eig_sym3(d)
    neg = np.any(evals < 0, axis=1)
    flags = np.where(neg, flags | FLAG_EIGEN_CLAMPED, flags)
    evals = np.clip(evals, 0.0, None)
    for arr in (d, evals, evec):
        arr[dead] = 0.0
    return {"d_elements": d, "ln_s0": np.where(dead, 0.0, beta[:, 0]), "eigenvalues": evals,
            "principal_dir": evec, "flags": flags.astype(np.int64)}


def fit_tensor_wls(signals, table: GradientTable) -> TensorFit:
    """Fit ln S = ln S0 - b g^T D g for a single voxel."""
    out = fit_tensor_batch(np.asarray(signals, dtype=np.float64)[None, :], table)
    if out["flags"][0] & FLAG_FAILED:
        raise NonPositiveSignalError("voxel has no positive signal")
    return TensorFit(out["d_elements"][0], float(out["ln_s0"][0]), out["eigenvalues"][0],
                     out["principal_dir"][0], int(out["flags"][0]))


def scalars_from_evals(evals: np.ndarray):
    """FA, MD, AD, RD from (..., 3) descending eigenvalues."""
    evals = np.asarray(evals, dtype=np.float64)
    md = evals.mean(axis=-1)
    denom = np.sum(evals**2, axis=-1)
    num = np.sum((evals - md[..., None]) ** 2, axis=-1)
    fa = np.sqrt(1.5 * num / np.where(denom > 0, denom, 1.0))
    fa = np.where(denom > 0, np.clip(fa, 0.0, 1.0), 0.0)
    ad = evals[..., 0]
    rd = (evals[..., 1] + evals[..., 2]) / 2.0
    return fa, md, ad, rd


def dti_scalars(fit) -> DtiScalars:
    """Accepts a TensorFit or a length-3 eigenvalue sequence."""
    evals = fit.eigenvalues if isinstance(fit, TensorFit) else np.asarray(fit, dtype=np.float64)
    evals = np.sort(evals)[::-1]
    fa, md, ad, rd = scalars_from_evals(evals)
    return DtiScalars(float(fa), float(md), float(ad), float(rd))


@dataclass
class DtiVolumeFit:
    maps: ParamMaps
    d_elements: np.ndarray  # (W, H, S, 6)
    principal_dir: np.ndarray  # (W, H, S, 3)
    flags: np.ndarray


def fit_dti_volume(data: np.ndarray, table: GradientTable, mask: Optional[np.ndarray] = None,
                   spacing=(1.0, 1.0, 1.0), chunk: int = 4096) -> DtiVolumeFit:
    """Fit every voxel in ``mask``; voxels outside emit zeros."""
    data = np.asarray(data, dtype=np.float64)
    shape = data.shape[:3]
    if mask is None:
        mask = np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    idx = np.flatnonzero(mask.reshape(-1))
    flat = data.reshape(-1, data.shape[3])
    n = int(np.prod(shape))
    d = np.zeros((n, 6))
    evals = np.zeros((n, 3))
    evec = np.zeros((n, 3))
    flags = np.zeros(n, dtype=np.int64)
    for start in range(0, len(idx), chunk):
        sel = idx[start:start + chunk]
        out = fit_tensor_batch(flat[sel], table)
        d[sel], evals[sel], evec[sel], flags[sel] = (out["d_elements"], out["eigenvalues"],
                                                     out["principal_dir"], out["flags"])
    fa, md, ad, rd = scalars_from_evals(evals)
    maps = ParamMaps({k: v.reshape(shape) for k, v in
                      {"FA": fa, "MD": md, "AD": ad, "RD": rd}.items()}, spacing)
    return DtiVolumeFit(maps, d.reshape(shape + (6,)), evec.reshape(shape + (3,)),
                        flags.reshape(shape))
