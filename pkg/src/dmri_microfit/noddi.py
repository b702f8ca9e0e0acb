"""NODDI estimation by dictionary linearization.

A dictionary of coupled intra/extra-neurite responses on a (vic, kappa) grid
plus one isotropic ball is evaluated at the voxel's fibre orientation and the
mixture weights are found with ridge-regularized NNLS. Parameters are the
weight-averaged grid values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .nnls import nnls_solve
from .phantom import D_ISO, D_PAR, kappa_to_od, noddi_kernels, od_to_kappa
from .volume_io import GradientTable, ParamMaps

VIC_LEVELS = tuple(round(0.1 * i, 1) for i in range(1, 10))
OD_LEVELS = (0.04, 0.08, 0.16, 0.32, 0.5, 0.7, 0.9)
KAPPA_LEVELS = tuple(float(k) for k in od_to_kappa(np.array(OD_LEVELS)))
RIDGE_SCALE = 1e-7

FLAG_DEGENERATE = 1
FLAG_FAILED = 2
# below this share of the total weight the coupled atoms do not determine vic / OD
DEGENERATE_FRACTION = 1e-3

_DICT_MAGIC = b"DMFD"
_DICT_VERSION = 1


class ZeroWeightError(ValueError):
    pass


@dataclass(frozen=True)
class NoddiParams:
    vic: float
    viso: float
    od: float
    flags: int = 0


@dataclass
class NoddiDictionary:
    """Kernel dictionary for one protocol.

    ``atom_matrix`` holds the responses at the canonical orientation
    (0, 0, 1): one column per (vic, kappa) pair followed by the ball.
    ``atoms(mu)`` re-evaluates the forward model at another orientation.
    """

    protocol: GradientTable
    vics: np.ndarray
    kappas: np.ndarray
    d_par: float = D_PAR
    d_iso: float = D_ISO
    cache_degrees: Optional[float] = None
    atom_matrix: np.ndarray = field(init=False)
    _cache: Dict[Tuple[int, int], np.ndarray] = field(init=False, default_factory=dict, repr=False)

    def __post_init__(self):
        self.atom_matrix = self._evaluate(np.array([0.0, 0.0, 1.0]))

    @property
    def n_coupled(self) -> int:
        return len(self.vics)

    def _evaluate(self, mu) -> np.ndarray:
        coupled, ball = noddi_kernels(self.vics, self.kappas, mu, self.protocol.bvals,
                                      self.protocol.bvecs, self.d_par, self.d_iso)
        return np.column_stack([coupled, ball])

    def atoms(self, mu) -> np.ndarray:
        """Atom matrix at orientation ``mu``.

        With ``cache_degrees`` set, orientations are snapped to the centre of
        a (theta, phi) bin of that width and the matrix is computed at the
        bin centre, so cached values never depend on insertion order.
        """
        mu = np.asarray(mu, dtype=np.float64)
        mu = mu / np.linalg.norm(mu)
        if mu[2] < 0:
            mu = -mu
        if not self.cache_degrees:
            return self._evaluate(mu)
        step = np.deg2rad(self.cache_degrees)
        theta = np.arccos(np.clip(mu[2], -1.0, 1.0))
        phi = np.arctan2(mu[1], mu[0]) % (2 * np.pi)
        key = (int(theta // step), int(phi // step))
        hit = self._cache.get(key)
        if hit is None:
            tc, pc = (key[0] + 0.5) * step, (key[1] + 0.5) * step
            centre = np.array([np.sin(tc) * np.cos(pc), np.sin(tc) * np.sin(pc), np.cos(tc)])
            hit = self._evaluate(centre)
            self._cache[key] = hit
        return hit

    def save(self, path) -> None:
        """Binary dump: magic, version, rows, cols, then float64 atoms row-major."""
        m = np.ascontiguousarray(self.atom_matrix, dtype="<f8")
        with open(path, "wb") as fh:
            fh.write(_DICT_MAGIC + struct.pack("<III", _DICT_VERSION, *m.shape))
            fh.write(m.tobytes())


def load_dictionary_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _DICT_MAGIC:
        raise ValueError("not a dictionary dump")
    version, rows, cols = struct.unpack("<III", raw[4:16])
    if version != _DICT_VERSION:
        raise ValueError(f"unsupported dictionary version {version}")
    return np.frombuffer(raw, dtype="<f8", count=rows * cols, offset=16).reshape(rows, cols)


def build_dictionary(protocol: GradientTable, vic_levels: Sequence[float] = VIC_LEVELS,
                     kappa_levels: Sequence[float] = KAPPA_LEVELS, d_par: float = D_PAR,
                     d_iso: float = D_ISO, cache_degrees: Optional[float] = None) -> NoddiDictionary:
    if len(protocol) == 0:
        raise ValueError("protocol is empty")
    if not protocol.shells:
        raise ValueError("protocol has no diffusion-weighted shell")
    vic_levels = np.asarray(vic_levels, dtype=np.float64)
    kappa_levels = np.asarray(kappa_levels, dtype=np.float64)
    if vic_levels.size == 0 or kappa_levels.size == 0:
        raise ValueError("grid levels must be non-empty")
    if np.any((vic_levels < 0) | (vic_levels > 1)) or np.any(kappa_levels < 0):
        raise ValueError("vic levels must lie in [0, 1] and kappa levels be non-negative")
    vv, kk = np.meshgrid(vic_levels, kappa_levels, indexing="ij")
    return NoddiDictionary(protocol, vv.ravel(), kk.ravel(), d_par, d_iso, cache_degrees)


def fit_noddi_voxel(signal, dictionary: NoddiDictionary, mu, ridge: Optional[float] = None) -> NoddiParams:
    """Fit one b0-normalized signal vector.

    ``ridge`` defaults to RIDGE_SCALE * ||signal||^2.
    """
    y = np.asarray(signal, dtype=np.float64)
    if len(y) != len(dictionary.protocol):
        raise ValueError(f"signal has {len(y)} entries, protocol has {len(dictionary.protocol)}")
    if not np.any(y != 0):
        raise ZeroWeightError("all-zero signal")
    if ridge is None:
        ridge = RIDGE_SCALE * float(y @ y)
    A = dictionary.atoms(mu)
    w = nnls_solve(A, y, ridge)
    return params_from_weights(w, dictionary)


def params_from_weights(w: np.ndarray, dictionary: NoddiDictionary) -> NoddiParams:
    n = dictionary.n_coupled
    total = float(w.sum())
    if not total > 0:
        raise ZeroWeightError("all dictionary weights are zero")
    coupled = float(w[:n].sum())
    viso = float(w[n]) / total
    if coupled <= 0:
        return NoddiParams(0.0, viso, 0.0, FLAG_DEGENERATE)
    vic = float(w[:n] @ dictionary.vics) / coupled
    kappa = float(w[:n] @ dictionary.kappas) / coupled
    flags = FLAG_DEGENERATE if coupled / total < DEGENERATE_FRACTION else 0
    return NoddiParams(vic, viso, kappa_to_od(kappa), flags)


def normalize_by_b0(data: np.ndarray, table: GradientTable):
    """Divide each voxel by its mean b0; voxels with mean b0 <= 0 give zeros."""
    b0 = data[..., table.b0_mask].mean(axis=-1)
    ok = b0 > 0
    out = np.where(ok[..., None], data / np.where(ok, b0, 1.0)[..., None], 0.0)
    return out, b0


def fit_noddi_volume(data: np.ndarray, table: GradientTable, principal_dir: np.ndarray,
                     mask: Optional[np.ndarray] = None, dictionary: Optional[NoddiDictionary] = None,
                     ridge_scale: float = RIDGE_SCALE, spacing=(1.0, 1.0, 1.0)):
    """Fit Vic, Viso, OD over ``mask`` of unnormalized 4D ``data``.

    Returns (ParamMaps, flags). Voxels that cannot be fitted are zero and
    carry FLAG_FAILED.
    """
    data = np.asarray(data, dtype=np.float64)
    shape = data.shape[:3]
    if mask is None:
        mask = np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if dictionary is None:
        dictionary = build_dictionary(table)
    norm, _ = normalize_by_b0(data, table)
    out = {name: np.zeros(shape) for name in ("Vic", "Viso", "OD")}
    flags = np.zeros(shape, dtype=np.int64)
    for ijk in zip(*np.nonzero(mask)):
        y = norm[ijk]
        mu = principal_dir[ijk]
        if not np.any(y != 0) or not np.linalg.norm(mu) > 0:
            flags[ijk] = FLAG_FAILED
            continue
        try:
            p = fit_noddi_voxel(y, dictionary, mu, ridge_scale * float(y @ y))
        except ZeroWeightError:
            flags[ijk] = FLAG_FAILED
            continue
        out["Vic"][ijk], out["Viso"][ijk], out["OD"][ijk] = p.vic, p.viso, p.od
        flags[ijk] = p.flags
    return ParamMaps(out, spacing), flags
