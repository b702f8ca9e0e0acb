"""Synthetic phantoms and forward signal models.

Signals follow the Gaussian tensor model or the three-compartment NODDI
model (Watson-dispersed sticks, tortuous zeppelin, free-water ball). Watson
averages are computed with a fixed 321-point quadrature over the hemisphere
expressed in the fibre frame, so no confluent hypergeometric functions are
needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import legendre

from .volume_io import GradientTable, ParamMaps, Volume4D

D_PAR = 1.7e-3  # mm^2/s
D_ISO = 3.0e-3  # mm^2/s

TISSUES = ("csf", "gm", "wm")
BACKGROUND = -1

N_POLAR = 17  # Gauss-Radau nodes in cos(theta), pole included
N_AZIMUTH = 20


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def hemisphere_quadrature() -> Tuple[np.ndarray, np.ndarray]:
    """Antipodally symmetric 321-point rule on the upper hemisphere.

    Gauss-Radau in t = cos(theta) on [0, 1] with the node t=1 fixed (the
    pole, a single point) times 20 equispaced azimuths. Weights sum to 2*pi.
    Integrands must be even in n; the rule then integrates over the full
    sphere up to a factor two.
    """
    n = N_POLAR
    # Radau nodes on [-1, 1] with fixed node -1: roots of (P_{n-1} + P_n)/(1+x)
    c = np.zeros(n + 1)
    c[n - 1] = c[n] = 1.0
    roots = np.sort(np.real(legendre.legroots(c)))
    roots = roots[np.abs(roots + 1.0) > 1e-12]
    pn1 = np.zeros(n)
    pn1[n - 1] = 1.0
    w_inner = (1.0 - roots) / (n**2 * legendre.legval(roots, pn1) ** 2)
    x = np.concatenate([[-1.0], roots])
    w = np.concatenate([[2.0 / n**2], w_inner])
    # mirror so the fixed node sits at t=1, then map [-1, 1] -> [0, 1]
    t = (1.0 - x) / 2.0
    wt = w / 2.0

    phi = (np.arange(N_AZIMUTH) + 0.5) * 2.0 * np.pi / N_AZIMUTH
    pts = [np.array([[0.0, 0.0, 1.0]])]
    wts = [np.array([wt[0] * 2.0 * np.pi])]
    for tj, wj in zip(t[1:], wt[1:]):
        s = np.sqrt(max(0.0, 1.0 - tj * tj))
        pts.append(np.stack([s * np.cos(phi), s * np.sin(phi), np.full_like(phi, tj)], axis=1))
        wts.append(np.full(N_AZIMUTH, wj * 2.0 * np.pi / N_AZIMUTH))
    points = np.concatenate(pts)
    weights = np.concatenate(wts)
    points.flags.writeable = False
    weights.flags.writeable = False
    return points, weights


def fibre_frame(mu) -> np.ndarray:
    """Orthonormal matrix whose third column is ``mu``."""
    mu = np.asarray(mu, dtype=np.float64)
    mu = mu / np.linalg.norm(mu)
    helper = np.array([1.0, 0.0, 0.0]) if abs(mu[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(helper, mu)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(mu, e1)
    return np.stack([e1, e2, mu], axis=1)


def watson_weights(kappas) -> np.ndarray:
    """Normalized Watson density times quadrature weight, shape (K, 321)."""
    pts, w = hemisphere_quadrature()
    kappas = np.atleast_1d(np.asarray(kappas, dtype=np.float64))
    # exp(kappa*(t^2 - 1)) avoids overflow for large kappa
    dens = np.exp(kappas[:, None] * (pts[None, :, 2] ** 2 - 1.0)) * w[None, :]
    return dens / dens.sum(axis=1, keepdims=True)


def watson_cos2(kappas) -> np.ndarray:
    """Mean of (n . mu)^2 under the Watson distribution."""
    pts, _ = hemisphere_quadrature()
    return watson_weights(kappas) @ (pts[:, 2] ** 2)


# ---------------------------------------------------------------------------
# forward models
# ---------------------------------------------------------------------------

def dti_signal(tensor, b: float, g, s0: float = 1.0) -> float:
    """S = s0 * exp(-b g^T D g)."""
    tensor = np.asarray(tensor, dtype=np.float64)
    if b < 0:
        raise ValueError("b-value must be non-negative")
    if not np.all(np.isfinite(tensor)):
        raise ValueError("tensor has non-finite entries")
    if b == 0:
        return float(s0)
    g = np.asarray(g, dtype=np.float64)
    return float(s0 * np.exp(-b * (g @ tensor @ g)))


def tensor_signals(tensor, table: GradientTable, s0: float = 1.0) -> np.ndarray:
    tensor = np.asarray(tensor, dtype=np.float64)
    if not np.all(np.isfinite(tensor)):
        raise ValueError("tensor has non-finite entries")
    q = np.einsum("ni,ij,nj->n", table.bvecs, tensor, table.bvecs)
    return s0 * np.exp(-table.bvals * q)


def noddi_kernels(vics, kappas, mu, bvals, bvecs, d_par=D_PAR, d_iso=D_ISO):
    """Coupled intra+extra responses and the ball response.

    Parameters
    ----------
    vics, kappas : array_like, shape (K,)
        Paired intra-neurite fractions and Watson concentrations.
    mu : array_like, shape (3,)
        Fibre orientation.
    bvals, bvecs : ndarray
        Protocol, shapes (M,) and (M, 3).

    Returns
    -------
    coupled : ndarray, shape (M, K)
        ``vic * A_ic + (1 - vic) * A_ec`` for each pair.
    ball : ndarray, shape (M,)
    """
    vics = np.atleast_1d(np.asarray(vics, dtype=np.float64))
    kappas = np.atleast_1d(np.asarray(kappas, dtype=np.float64))
    bvals = np.asarray(bvals, dtype=np.float64)
    pts, _ = hemisphere_quadrature()
    frame = fibre_frame(mu)
    g_local = np.asarray(bvecs, dtype=np.float64) @ frame  # (M, 3) in fibre frame
    proj2 = (g_local @ pts.T) ** 2  # (M, 321)
    stick = np.exp(-bvals[:, None] * d_par * proj2)

    uk, inverse = np.unique(kappas, return_inverse=True)
    wk = watson_weights(uk)  # (U, 321)
    a_ic = (stick @ wk.T)[:, inverse]  # (M, K)

    # extra-cellular: Watson-averaged tensor, axially symmetric about mu
    c = watson_cos2(uk)[inverse]
    cos2 = g_local[:, 2] ** 2
    d_perp = d_par * (1.0 - vics)
    along = (1.0 - c) / 2.0 + (3.0 * c - 1.0) / 2.0 * cos2[:, None]
    a_ec = np.exp(-bvals[:, None] * (d_perp + (d_par - d_perp) * along))

    coupled = vics * a_ic + (1.0 - vics) * a_ec
    coupled[bvals == 0] = 1.0  # normalized Watson weights sum to 1 only up to rounding
    ball = np.exp(-bvals * d_iso)
    return coupled, ball


def kappa_to_od(kappa):
    """Orientation dispersion index (2/pi) arctan(1/kappa); OD(0) = 1."""
    k = np.asarray(kappa, dtype=np.float64)
    if np.any(k < 0) or np.any(np.isnan(k)):
        raise ValueError("kappa must be non-negative")
    with np.errstate(divide="ignore"):
        od = np.arctan(1.0 / k) / (np.pi / 2.0)
    return float(od) if od.ndim == 0 else od


def od_to_kappa(od):
    od = np.asarray(od, dtype=np.float64)
    if np.any(od <= 0) or np.any(od > 1):
        raise ValueError("OD must lie in (0, 1]")
    k = 1.0 / np.tan(np.pi / 2.0 * od)
    return float(k) if k.ndim == 0 else k


@dataclass(frozen=True)
class VoxelMicrostructure:
    """Microstructure of one voxel (or one phantom region)."""

    tensor: np.ndarray
    vic: float = 0.0
    viso: float = 0.0
    kappa: float = 0.0
    mu: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    s0: float = 1.0

    def __post_init__(self):
        tensor = np.array(self.tensor, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(tensor)):
            raise ValueError("tensor has non-finite entries")
        if not np.allclose(tensor, tensor.T, atol=1e-15):
            raise ValueError("tensor is not symmetric")
        if np.linalg.eigvalsh(tensor)[0] < -1e-15:
            raise ValueError("tensor is not positive semi-definite")
        for name in ("vic", "viso"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if not self.kappa >= 0:
            raise ValueError("kappa must be non-negative")
        mu = np.asarray(self.mu, dtype=np.float64)
        if abs(np.linalg.norm(mu) - 1.0) > 1e-9:
            raise ValueError("mu must be a unit vector")
        if not self.s0 > 0:
            raise ValueError("s0 must be positive")
        tensor.flags.writeable = False
        object.__setattr__(self, "tensor", tensor)
        object.__setattr__(self, "mu", tuple(float(m) for m in mu))

    @classmethod
    def from_noddi(cls, vic, viso, kappa, mu=(0.0, 0.0, 1.0), s0=1.0,
                   d_par=D_PAR, d_iso=D_ISO) -> "VoxelMicrostructure":
        mu = np.asarray(mu, dtype=np.float64)
        mu = mu / np.linalg.norm(mu)
        tensor = noddi_apparent_tensor(vic, viso, kappa, mu, d_par, d_iso)
        return cls(tensor, vic, viso, kappa, tuple(mu), s0)

    @classmethod
    def from_eigen(cls, evals, mu=(0.0, 0.0, 1.0), s0=1.0) -> "VoxelMicrostructure":
        mu = np.asarray(mu, dtype=np.float64)
        mu = mu / np.linalg.norm(mu)
        frame = fibre_frame(mu)
        l1, l2, l3 = evals
        # frame columns (e1, e2, mu): principal eigenvalue along mu
        tensor = frame @ np.diag([l2, l3, l1]) @ frame.T
        tensor = 0.5 * (tensor + tensor.T)
        return cls(tensor, 0.0, 0.0, 0.0, tuple(mu), s0)

    @property
    def od(self) -> float:
        return kappa_to_od(self.kappa)


def noddi_apparent_tensor(vic, viso, kappa, mu, d_par=D_PAR, d_iso=D_ISO) -> np.ndarray:
    """Low-b apparent diffusion tensor of the three-compartment mixture."""
    c = float(watson_cos2([kappa])[0])
    frame = fibre_frame(mu)
    second = frame @ np.diag([(1 - c) / 2, (1 - c) / 2, c]) @ frame.T
    d_perp = d_par * (1 - vic)
    d_ec = d_perp * np.eye(3) + (d_par - d_perp) * second
    tensor = (1 - viso) * (vic * d_par * second + (1 - vic) * d_ec) + viso * d_iso * np.eye(3)
    return 0.5 * (tensor + tensor.T)


def noddi_signal(micro: VoxelMicrostructure, protocol: GradientTable,
                 d_par=D_PAR, d_iso=D_ISO) -> np.ndarray:
    """Normalized NODDI signal for every protocol entry (b=0 entries give 1)."""
    if len(protocol) == 0:
        raise ValueError("protocol is empty")
    coupled, ball = noddi_kernels([micro.vic], [micro.kappa], micro.mu,
                                  protocol.bvals, protocol.bvecs, d_par, d_iso)
    return (1.0 - micro.viso) * coupled[:, 0] + micro.viso * ball


def add_rician_noise(signal, sigma: float, seed) -> np.ndarray:
    """Magnitude of the signal plus complex Gaussian noise of std ``sigma``.

    ``seed`` may be an int or a sequence of ints (mixed by SeedSequence).
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    signal = np.asarray(signal, dtype=np.float64)
    if sigma == 0:
        return signal.copy()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n1 = rng.normal(0.0, sigma, size=signal.shape)
    n2 = rng.normal(0.0, sigma, size=signal.shape)
    return np.sqrt((signal + n1) ** 2 + n2**2)


# ---------------------------------------------------------------------------
# phantom construction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Region:
    """Axis-aligned box ``[lo, hi)`` or sphere; later regions paint over earlier ones."""

    shape: str
    tissue: str
    micro: VoxelMicrostructure
    model: str = "noddi"
    lo: Tuple[float, float, float] = (0, 0, 0)
    hi: Tuple[float, float, float] = (0, 0, 0)
    center: Tuple[float, float, float] = (0, 0, 0)
    radius: float = 0.0

    def __post_init__(self):
        if self.shape not in ("box", "sphere"):
            raise ValueError(f"unknown region shape {self.shape!r}")
        if self.tissue not in TISSUES:
            raise ValueError(f"unknown tissue {self.tissue!r}")
        if self.model not in ("noddi", "dti"):
            raise ValueError(f"unknown model {self.model!r}")

    def contains(self, grid) -> np.ndarray:
        x, y, z = grid
        if self.shape == "box":
            return ((x >= self.lo[0]) & (x < self.hi[0]) & (y >= self.lo[1]) & (y < self.hi[1])
                    & (z >= self.lo[2]) & (z < self.hi[2]))
        cx, cy, cz = self.center
        return (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2 <= self.radius**2

    def to_dict(self) -> dict:
        m = self.micro
        d = {"shape": self.shape, "tissue": self.tissue, "model": self.model, "s0": m.s0,
             "mu": list(m.mu)}
        if self.shape == "box":
            d.update(lo=list(self.lo), hi=list(self.hi))
        else:
            d.update(center=list(self.center), radius=self.radius)
        if self.model == "noddi":
            d.update(vic=m.vic, viso=m.viso, kappa=m.kappa)
        else:
            d.update(tensor=m.tensor.tolist())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Region":
        model = d.get("model", "noddi")
        mu = d.get("mu", (0.0, 0.0, 1.0))
        s0 = d.get("s0", 1.0)
        if model == "noddi":
            kappa = d["kappa"] if "kappa" in d else od_to_kappa(d["od"])
            micro = VoxelMicrostructure.from_noddi(d["vic"], d["viso"], kappa, mu, s0)
        else:
            if "tensor" in d:
                micro = VoxelMicrostructure(np.array(d["tensor"]), mu=tuple(mu), s0=s0)
            else:
                micro = VoxelMicrostructure.from_eigen(d["evals"], mu, s0)
        kwargs = {}
        if d["shape"] == "box":
            kwargs = dict(lo=tuple(d["lo"]), hi=tuple(d["hi"]))
        else:
            kwargs = dict(center=tuple(d["center"]), radius=float(d["radius"]))
        return cls(d["shape"], d["tissue"], micro, model, **kwargs)


@dataclass(frozen=True)
class PhantomSpec:
    dims: Tuple[int, int, int]
    regions: Tuple[Region, ...]
    noise_sigma: float = 0.0
    seed: int = 0
    spacing: Tuple[float, float, float] = (1.25, 1.25, 1.25)

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(n) < 1 for n in self.dims):
            raise ValueError(f"bad phantom dims {self.dims}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not self.regions:
            raise ValueError("phantom needs at least one region")
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "regions", tuple(self.regions))

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "noise_sigma": self.noise_sigma, "seed": self.seed,
                "spacing": list(self.spacing), "regions": [r.to_dict() for r in self.regions]}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(tuple(d["dims"]), tuple(Region.from_dict(r) for r in d["regions"]),
                   float(d.get("noise_sigma", 0.0)), int(d.get("seed", 0)),
                   tuple(d.get("spacing", (1.25, 1.25, 1.25))))

    def region_index(self) -> np.ndarray:
        """Index of the region owning each voxel, -1 where none does."""
        grid = np.meshgrid(*(np.arange(n) + 0.5 for n in self.dims), indexing="ij")
        owner = np.full(self.dims, -1, dtype=np.int64)
        for i, region in enumerate(self.regions):
            owner[region.contains(grid)] = i
        return owner


def _fa(evals: np.ndarray) -> float:
    denom = np.sum(evals**2)
    if denom <= 0:
        return 0.0
    md = evals.mean()
    return float(np.sqrt(1.5 * np.sum((evals - md) ** 2) / denom))


def region_truth(region: Region) -> dict:
    evals = np.sort(np.linalg.eigvalsh(region.micro.tensor))[::-1]
    evals = np.clip(evals, 0.0, None)
    truth = {"FA": _fa(evals), "MD": float(evals.mean()), "AD": float(evals[0]),
             "RD": float((evals[1] + evals[2]) / 2)}
    if region.model == "noddi":
        truth.update(Vic=region.micro.vic, Viso=region.micro.viso, OD=region.micro.od)
    else:
        truth.update(Vic=0.0, Viso=0.0, OD=0.0)
    return truth


def region_signal(region: Region, protocol: GradientTable) -> np.ndarray:
    """Noiseless unnormalized signal of a region."""
    m = region.micro
    if region.model == "noddi":
        return m.s0 * noddi_signal(m, protocol)
    return tensor_signals(m.tensor, protocol, m.s0)


PARAM_NAMES = ("FA", "MD", "AD", "RD", "Vic", "Viso", "OD")


def build_phantom(spec: PhantomSpec, protocol: GradientTable):
    """Construct signals, ground-truth maps and tissue labels.

    Returns
    -------
    signals : Volume4D
        Unnormalized magnitude signals, D = len(protocol).
    truth : ParamMaps
        FA, MD, AD, RD from each region's tensor; Vic, Viso, OD from its
        NODDI parameters (zero for tensor-only regions and background).
    labels : Volume4D
        0 = CSF, 1 = GM, 2 = WM, -1 = background.
    """
    owner = spec.region_index()
    shape = spec.dims
    signals = np.zeros(shape + (len(protocol),))
    truth = {name: np.zeros(shape) for name in PARAM_NAMES}
    labels = np.full(shape, BACKGROUND, dtype=np.float64)

    for i, region in enumerate(spec.regions):
        sel = owner == i
        if not sel.any():
            continue
        signals[sel] = region_signal(region, protocol)
        for name, value in region_truth(region).items():
            truth[name][sel] = value
        labels[sel] = TISSUES.index(region.tissue)

    if spec.noise_sigma > 0:
        # per-voxel streams keyed on (seed, linear index): independent of
        # traversal order or partitioning
        flat = signals.reshape(-1, len(protocol))
        for lin in np.flatnonzero(owner.reshape(-1) >= 0):
            flat[lin] = add_rician_noise(flat[lin], spec.noise_sigma, [spec.seed, int(lin)])

    return (Volume4D(signals, spec.spacing, "signal"),
            ParamMaps(truth, spec.spacing),
            Volume4D(labels, spec.spacing, "label"))


T1_MEANS = (0.25, 0.55, 0.85)  # CSF, GM, WM on a T1-weighted scale


def synthesize_t1(labels, sigma: float, seed: int, class_means: Sequence[float] = T1_MEANS,
                  spacing=(1.25, 1.25, 1.25)) -> Volume4D:
    """Piecewise-constant T1w image from a label volume plus Gaussian noise."""
    labels = np.asarray(labels)
    if labels.ndim == 4:
        labels = labels[..., 0]
    img = np.zeros(labels.shape)
    for k, m in enumerate(class_means):
        img[labels == k] = m
    if sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        noise = rng.normal(0.0, sigma, size=labels.shape)
        img = np.where(labels >= 0, img + noise, 0.0)
    return Volume4D(img, spacing, "signal")


def _random_direction(rng) -> Tuple[float, float, float]:
    v = rng.normal(size=3)
    v /= np.linalg.norm(v)
    return tuple(float(x) for x in v)


def _tissue_region(rng, tissue: str, shape: str, **geom) -> Region:
    # class-typical parameter ranges
    if tissue == "csf":
        vic, viso, od = rng.uniform(0.2, 0.4), rng.uniform(0.85, 0.95), rng.uniform(0.4, 0.8)
        s0 = rng.uniform(1.3, 1.6)
    elif tissue == "gm":
        vic, viso, od = rng.uniform(0.25, 0.45), rng.uniform(0.05, 0.2), rng.uniform(0.4, 0.7)
        s0 = rng.uniform(0.95, 1.1)
    else:
        vic, viso, od = rng.uniform(0.5, 0.8), rng.uniform(0.0, 0.08), rng.uniform(0.04, 0.3)
        s0 = rng.uniform(0.8, 0.95)
    micro = VoxelMicrostructure.from_noddi(float(vic), float(viso), float(od_to_kappa(od)),
                                           _random_direction(rng), float(s0))
    return Region(shape, tissue, micro, "noddi", **geom)


def random_phantom_spec(dims=(16, 16, 16), seed: int = 0, noise_sigma: float = 0.0,
                        n_wm: int = 3) -> PhantomSpec:
    """Brain-like layout: CSF rim, GM shell, WM blocks, a ventricle and a deep-GM blob."""
    rng = np.random.default_rng(seed)
    dims = tuple(int(n) for n in dims)
    c = tuple(n / 2.0 for n in dims)
    r = 0.5 * min(dims) - 0.25
    regions: List[Region] = [
        _tissue_region(rng, "csf", "sphere", center=c, radius=r),
        _tissue_region(rng, "gm", "sphere", center=c, radius=r - 1.5),
    ]
    inner = r - 3.0
    for _ in range(n_wm):
        lo = [float(ci - inner + rng.integers(0, max(1, int(inner)))) for ci in c]
        size = [float(rng.integers(3, max(4, int(1.4 * inner)))) for _ in dims]
        hi = [min(l + s, ci + inner) for l, s, ci in zip(lo, size, c)]
        regions.append(_tissue_region(rng, "wm", "box", lo=tuple(lo), hi=tuple(hi)))
    blob_c = tuple(float(ci + rng.uniform(-inner / 2, inner / 2)) for ci in c)
    regions.append(_tissue_region(rng, "gm", "sphere", center=blob_c, radius=float(rng.uniform(1.5, 2.5))))
    v_lo = tuple(float(ci - rng.integers(1, 3)) for ci in c)
    v_hi = tuple(float(l + rng.integers(2, 4)) for l in v_lo)
    regions.append(_tissue_region(rng, "csf", "box", lo=v_lo, hi=v_hi))
    return PhantomSpec(dims, tuple(regions), noise_sigma, seed)


def hcp_like_protocol(n_dirs: int = 90, bvalues=(1000.0, 2000.0, 3000.0), n_b0: int = 18,
                      seed: int = 0) -> GradientTable:
    """Multi-shell table with b0s interleaved up front and per-shell direction sets.

    Directions per shell come from a rotated Fibonacci hemisphere so shells
    do not share directions.
    """
    rng = np.random.default_rng(seed)
    bvals = [0.0] * n_b0
    bvecs = [np.zeros(3)] * n_b0
    for b in bvalues:
        dirs = fibonacci_hemisphere(n_dirs)
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        dirs = dirs @ q.T
        bvals.extend([b] * n_dirs)
        bvecs.extend(dirs)
    return GradientTable(np.array(bvals), np.array(bvecs))


def fibonacci_hemisphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - i / n  # z in (0, 1)
    phi = np.pi * (1.0 + 5**0.5) * i
    s = np.sqrt(1.0 - z**2)
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)
