"""Patch-based learned estimator of parametric maps.

Inputs are 4x4x4 patches with channels [DWI_1..DWI_k, b0, p_csf, p_gm, p_wm]
(prior channels optional); outputs are 4x4x4 patches of P parameters. The
backbone is a fully connected network on flattened patches trained with a
summed squared error and Adam. Whole-volume prediction averages overlapping
patch outputs.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .volume_io import ParamMaps, Volume4D

PATCH = 4
DEFAULT_PARAMS = ("FA", "MD", "AD", "Vic", "Viso", "OD")
DIFFUSIVITY_PARAMS = ("MD", "AD", "RD")
DIFFUSIVITY_SCALE = 1e3
DWI_CLIP = 1.5
LEAK = 0.01

WEIGHTS_MAGIC = b"DMFW"
WEIGHTS_VERSION = 1


class EstimatorError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

@dataclass
class PatchDataset:
    inputs: np.ndarray  # (N, C_in, 4, 4, 4)
    targets: Optional[np.ndarray]  # (N, P, 4, 4, 4)
    origins: np.ndarray  # (N, 3)
    channel_names: Tuple[str, ...]
    param_names: Tuple[str, ...]
    normalization: Dict[str, object] = field(default_factory=dict)

    def __len__(self):
        return len(self.inputs)

    @property
    def n_channels(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "PatchDataset":
        return PatchDataset(self.inputs[idx], None if self.targets is None else self.targets[idx],
                            self.origins[idx], self.channel_names, self.param_names, self.normalization)

    @staticmethod
    def concat(parts: Sequence["PatchDataset"]) -> "PatchDataset":
        first = parts[0]
        for p in parts[1:]:
            if p.channel_names != first.channel_names or p.param_names != first.param_names:
                raise EstimatorError("cannot concatenate datasets with different layouts")
        targets = None if first.targets is None else np.concatenate([p.targets for p in parts])
        return PatchDataset(np.concatenate([p.inputs for p in parts]), targets,
                            np.concatenate([p.origins for p in parts]), first.channel_names,
                            first.param_names, first.normalization)


KNOWN_PARAMS = ("FA", "MD", "AD", "RD", "Vic", "Viso", "OD")


def target_scales(param_names: Sequence[str]) -> np.ndarray:
    unknown = [n for n in param_names if n not in KNOWN_PARAMS]
    if unknown:
        raise EstimatorError(f"unknown parameters {unknown}")
    return np.array([DIFFUSIVITY_SCALE if n in DIFFUSIVITY_PARAMS else 1.0 for n in param_names])


def _spatial(arr) -> np.ndarray:
    if isinstance(arr, Volume4D):
        return arr.data
    return np.asarray(arr, dtype=np.float64)


def input_channels(sparse_dwi, b0, priors, mask) -> Tuple[np.ndarray, Tuple[str, ...]]:
    """Normalized channel stack (C, W, H, S) and channel names.

    DWIs are divided by the voxel b0 and clipped to [0, 1.5]; the b0
    channel is rescaled to unit mean over the mask; prior channels pass
    through untouched. ``priors`` may be None to drop the prior channels.
    """
    dwi = _spatial(sparse_dwi)
    b0v = _spatial(b0)
    if b0v.ndim == 4:
        b0v = b0v.mean(axis=3)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 4:
        mask = mask[..., 0]
    shape = dwi.shape[:3]
    if b0v.shape != shape or mask.shape != shape:
        raise EstimatorError(f"dims mismatch: dwi {shape}, b0 {b0v.shape}, mask {mask.shape}")
    if not mask.any():
        raise EstimatorError("mask is empty")
    ok = b0v > 0
    norm = np.where(ok[..., None], dwi / np.where(ok, b0v, 1.0)[..., None], 0.0)
    norm = np.clip(norm, 0.0, DWI_CLIP)
    scale = float(b0v[mask].mean())
    if not scale > 0:
        raise EstimatorError("mean b0 over the mask is not positive")
    chans = [norm[..., i] for i in range(norm.shape[3])]
    names = [f"dwi{i + 1}" for i in range(norm.shape[3])]
    chans.append(b0v / scale)
    names.append("b0")
    if priors is not None:
        stack = priors.stack if hasattr(priors, "stack") else np.asarray(priors)
        if stack.shape[:3] != shape:
            raise EstimatorError(f"dims mismatch: priors {stack.shape[:3]} vs {shape}")
        for i, n in enumerate(("p_csf", "p_gm", "p_wm")):
            chans.append(stack[..., i])
            names.append(n)
    return np.stack(chans), tuple(names)


def patch_origins(shape, mask: np.ndarray, stride: int) -> np.ndarray:
    """Lattice origins (step ``stride``) whose window fits the volume and touches the mask."""
    if not 1 <= stride <= PATCH:
        raise EstimatorError(f"stride must be in 1..{PATCH}")
    axes = [np.arange(0, n - PATCH + 1, stride) for n in shape]
    if any(len(a) == 0 for a in axes):
        raise EstimatorError(f"volume {shape} is smaller than one patch")
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    keep = [mask[x:x + PATCH, y:y + PATCH, z:z + PATCH].any() for x, y, z in grid]
    return grid[np.array(keep, dtype=bool)]


def _cut(arr: np.ndarray, origins: np.ndarray) -> np.ndarray:
    """(C, W, H, S) -> (N, C, 4, 4, 4)."""
    return np.stack([arr[:, x:x + PATCH, y:y + PATCH, z:z + PATCH] for x, y, z in origins])


def extract_patches(sparse_dwi, b0, priors, targets: Optional[ParamMaps], mask, stride: int = 2,
                    param_names: Sequence[str] = DEFAULT_PARAMS) -> PatchDataset:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 4:
        mask = mask[..., 0]
    chans, names = input_channels(sparse_dwi, b0, priors, mask)
    origins = patch_origins(mask.shape, mask, stride)
    inputs = _cut(chans, origins)
    tgt = None
    param_names = tuple(param_names)
    if targets is not None:
        missing = [n for n in param_names if n not in targets]
        if missing:
            raise EstimatorError(f"targets lack {missing}")
        if targets.shape != mask.shape:
            raise EstimatorError(f"dims mismatch: targets {targets.shape} vs {mask.shape}")
        scales = target_scales(param_names)
        stack = np.stack([targets[n] * s for n, s in zip(param_names, scales)])
        tgt = _cut(stack, origins)
        if not np.all(np.isfinite(tgt)):
            raise EstimatorError("non-finite targets")
    norm = {"target_scale": target_scales(param_names).tolist(), "dwi_clip": DWI_CLIP}
    return PatchDataset(inputs, tgt, origins, names, param_names, norm)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

@dataclass
class EstimatorWeights:
    layers: List[Tuple[np.ndarray, np.ndarray]]  # (out, in) weights and (out,) biases
    activation: str = "leaky_relu"
    seed: int = 0
    metadata: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        for i, (W, b) in enumerate(self.layers):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise EstimatorError(f"layer {i}: weight {W.shape} and bias {b.shape} disagree")
            if i and W.shape[1] != self.layers[i - 1][0].shape[0]:
                raise EstimatorError(f"layer {i} expects {W.shape[1]} inputs, previous gives "
                                     f"{self.layers[i - 1][0].shape[0]}")
        if self.activation not in ("leaky_relu", "linear"):
            raise EstimatorError(f"unknown activation {self.activation!r}")

    @property
    def widths(self) -> List[int]:
        return [self.layers[0][0].shape[1]] + [W.shape[0] for W, _ in self.layers]

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in self.layers)

    def copy(self) -> "EstimatorWeights":
        return EstimatorWeights([(W.copy(), b.copy()) for W, b in self.layers], self.activation,
                                self.seed, dict(self.metadata))


def init_weights(widths: Sequence[int], seed: int = 0, activation: str = "leaky_relu") -> EstimatorWeights:
    """He-normal hidden layers, 1/fan_in head, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == len(widths) - 2
        std = np.sqrt((1.0 if last else 2.0) / n_in)
        layers.append((rng.normal(0.0, std, size=(n_out, n_in)), np.zeros(n_out)))
    return EstimatorWeights(layers, activation, seed)


def _act(z, kind):
    if kind == "linear":
        return z
    return np.where(z > 0, z, LEAK * z)


def _act_grad(z, kind):
    if kind == "linear":
        return np.ones_like(z)
    return np.where(z > 0, 1.0, LEAK)


def _flatten(batch: np.ndarray, weights: EstimatorWeights) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64).reshape(len(batch), -1)
    if x.shape[1] != weights.layers[0][0].shape[1]:
        raise EstimatorError(f"input has {x.shape[1]} features, network expects "
                             f"{weights.layers[0][0].shape[1]}")
    return x


def _forward_trace(weights: EstimatorWeights, x: np.ndarray):
    acts = [x]
    pre = []
    h = x
    n = len(weights.layers)
    for i, (W, b) in enumerate(weights.layers):
        z = h @ W.T + b
        pre.append(z)
        h = z if i == n - 1 else _act(z, weights.activation)
        acts.append(h)
    return pre, acts


def forward(weights: EstimatorWeights, batch: np.ndarray) -> np.ndarray:
    """Predictions shaped (N, P, 4, 4, 4) when the output is P*64 wide, else (N, out)."""
    x = _flatten(batch, weights)
    _, acts = _forward_trace(weights, x)
    out = acts[-1]
    if out.shape[1] % PATCH**3 == 0 and np.asarray(batch).ndim == 5:
        return out.reshape(len(out), -1, PATCH, PATCH, PATCH)
    return out


def loss(pred: np.ndarray, gt: np.ndarray) -> float:
    """Squared L2 norm of the residual per sample, averaged over the batch."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise EstimatorError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(gt))):
        raise EstimatorError("non-finite values in loss")
    r = (gt - pred).reshape(len(pred), -1)
    return float(np.sum(r * r) / len(pred))


def loss_gradient(weights: EstimatorWeights, batch: np.ndarray, targets: np.ndarray,
                  return_loss: bool = False):
    """Reverse-mode gradient of loss(forward(weights, batch), targets).

    Returns a list of (dW, db) matching ``weights.layers``.
    """
    x = _flatten(batch, weights)
    y = np.asarray(targets, dtype=np.float64).reshape(len(x), -1)
    pre, acts = _forward_trace(weights, x)
    if acts[-1].shape != y.shape:
        raise EstimatorError(f"targets shape {y.shape} vs output {acts[-1].shape}")
    n = len(x)
    delta = 2.0 * (acts[-1] - y) / n
    grads = [None] * len(weights.layers)
    for i in range(len(weights.layers) - 1, -1, -1):
        W, _ = weights.layers[i]
        grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
        if i:
            delta = (delta @ W) * _act_grad(pre[i - 1], weights.activation)
    if return_loss:
        r = acts[-1] - y
        with np.errstate(over="ignore", invalid="ignore"):  # caller checks finiteness
            return grads, float(np.sum(r * r) / n)
    return grads


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    hidden: Tuple[int, ...] = (512, 512)
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.2
    activation: str = "leaky_relu"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise EstimatorError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if not 0 <= self.val_fraction < 1:
            raise EstimatorError("val_fraction must lie in [0, 1)")


@dataclass
class TrainHistory:
    epochs: List[int] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)

    def append(self, epoch, tr, va):
        self.epochs.append(epoch)
        self.train_loss.append(tr)
        self.val_loss.append(va)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for row in zip(self.epochs, self.train_loss, self.val_loss):
                w.writerow([row[0], repr(row[1]), repr(row[2])])


def _dataset_loss(weights, inputs, targets, batch=512) -> float:
    if len(inputs) == 0:
        return float("nan")
    total = 0.0
    for s in range(0, len(inputs), batch):
        p = forward(weights, inputs[s:s + batch]).reshape(len(inputs[s:s + batch]), -1)
        r = p - targets[s:s + batch].reshape(len(p), -1)
        with np.errstate(over="ignore", invalid="ignore"):
            total += float(np.sum(r * r))
    return total / len(inputs)


def train(dataset: PatchDataset, config: TrainConfig = TrainConfig(),
          val_dataset: Optional[PatchDataset] = None):
    """Fit a network to ``dataset``; returns (weights, history).

    Without ``val_dataset`` a seeded ``val_fraction`` of the patches is held
    out. History entry 0 is the untrained network.
    """
    if len(dataset) == 0 or dataset.targets is None:
        raise EstimatorError("training needs a non-empty dataset with targets")
    rng = np.random.default_rng(config.seed)
    if val_dataset is None and config.val_fraction > 0 and len(dataset) > 1:
        perm = rng.permutation(len(dataset))
        n_val = max(1, int(round(config.val_fraction * len(dataset))))
        val_dataset = dataset.subset(np.sort(perm[:n_val]))
        dataset = dataset.subset(np.sort(perm[n_val:]))
    n_in = dataset.inputs[0].size
    n_out = dataset.targets[0].size
    weights = init_weights([n_in, *config.hidden, n_out], config.seed, config.activation)
    X, Y = dataset.inputs, dataset.targets
    Xv = val_dataset.inputs if val_dataset is not None else X[:0]
    Yv = val_dataset.targets if val_dataset is not None else Y[:0]

    m = [(np.zeros_like(W), np.zeros_like(b)) for W, b in weights.layers]
    v = [(np.zeros_like(W), np.zeros_like(b)) for W, b in weights.layers]
    history = TrainHistory()
    history.append(0, _dataset_loss(weights, X, Y), _dataset_loss(weights, Xv, Yv))
    step = 0
    b1, b2 = config.beta1, config.beta2
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(X))
        running = 0.0
        for s in range(0, len(X), config.batch_size):
            idx = order[s:s + config.batch_size]
            grads, batch_loss = loss_gradient(weights, X[idx], Y[idx], return_loss=True)
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(epoch)
            running += batch_loss * len(idx)
            step += 1
            corr1 = 1.0 - b1**step
            corr2 = 1.0 - b2**step
            new_layers = []
            for i, ((W, b), (gW, gb)) in enumerate(zip(weights.layers, grads)):
                mW, mb = m[i]
                vW, vb = v[i]
                mW = b1 * mW + (1 - b1) * gW
                mb = b1 * mb + (1 - b1) * gb
                vW = b2 * vW + (1 - b2) * gW * gW
                vb = b2 * vb + (1 - b2) * gb * gb
                m[i], v[i] = (mW, mb), (vW, vb)
                W = W - config.lr * (mW / corr1) / (np.sqrt(vW / corr2) + config.eps)
                b = b - config.lr * (mb / corr1) / (np.sqrt(vb / corr2) + config.eps)
                new_layers.append((W, b))
            weights.layers = new_layers
        tr = running / len(X)
        va = _dataset_loss(weights, Xv, Yv)
        if not (np.isfinite(tr) and (np.isfinite(va) or len(Xv) == 0)):
            raise TrainingDivergedError(epoch)
        history.append(epoch, tr, va)

    weights.metadata = {
        "config": asdict(config),
        "channel_names": list(dataset.channel_names),
        "param_names": list(dataset.param_names),
        "normalization": dataset.normalization,
        "history": {"train_loss": history.train_loss, "val_loss": history.val_loss},
    }
    return weights, history


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def predict_volume(weights: EstimatorWeights, sparse_dwi, b0, priors, mask, stride: int = 2,
                   param_names: Optional[Sequence[str]] = None, batch: int = 512,
                   spacing=(1.0, 1.0, 1.0)) -> ParamMaps:
    """Average the patch predictions over every voxel they cover.

    Voxels outside the mask or covered by no patch are zero.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 4:
        mask = mask[..., 0]
    if param_names is None:
        param_names = weights.metadata.get("param_names", DEFAULT_PARAMS)
    param_names = tuple(param_names)
    chans, _ = input_channels(sparse_dwi, b0, priors, mask)
    origins = patch_origins(mask.shape, mask, stride)
    P = len(param_names)
    total = np.zeros((P,) + mask.shape)
    count = np.zeros(mask.shape)
    for s in range(0, len(origins), batch):
        org = origins[s:s + batch]
        pred = forward(weights, _cut(chans, org))
        if pred.ndim != 5 or pred.shape[1] != P:
            raise EstimatorError(f"network outputs {pred.shape[1:]} for {P} parameters")
        for (x, y, z), p in zip(org, pred):
            total[:, x:x + PATCH, y:y + PATCH, z:z + PATCH] += p
            count[x:x + PATCH, y:y + PATCH, z:z + PATCH] += 1
    covered = (count > 0) & mask
    avg = np.where(covered, total / np.where(count > 0, count, 1.0), 0.0)
    scales = target_scales(param_names)
    return ParamMaps({n: avg[i] / scales[i] for i, n in enumerate(param_names)}, spacing)


def coverage_counts(shape, mask, stride: int) -> np.ndarray:
    origins = patch_origins(shape, np.asarray(mask, dtype=bool), stride)
    count = np.zeros(shape, dtype=np.int64)
    for x, y, z in origins:
        count[x:x + PATCH, y:y + PATCH, z:z + PATCH] += 1
    return count


# ---------------------------------------------------------------------------
# weights file
# ---------------------------------------------------------------------------

def save_weights(weights: EstimatorWeights, path) -> None:
    """Binary layout: magic, version, layer count, per-layer (rows, cols,
    float64 weights row-major, float64 biases), activation tag, seed, JSON
    metadata. All little-endian."""
    parts = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(weights.layers))]
    for W, b in weights.layers:
        parts.append(struct.pack("<II", *W.shape))
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    tag = weights.activation.encode("utf-8")
    parts.append(struct.pack("<I", len(tag)) + tag)
    parts.append(struct.pack("<Q", int(weights.seed) & 0xFFFFFFFFFFFFFFFF))
    meta = json.dumps(weights.metadata, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    Path(path).write_bytes(b"".join(parts))


def load_weights(path) -> EstimatorWeights:
    raw = Path(path).read_bytes()
    if raw[:4] != WEIGHTS_MAGIC:
        raise EstimatorError("not a weights file (bad magic)")
    version, n_layers = struct.unpack_from("<II", raw, 4)
    if version != WEIGHTS_VERSION:
        raise EstimatorError(f"unsupported weights version {version}")
    pos = 12
    layers = []
    for _ in range(n_layers):
        rows, cols = struct.unpack_from("<II", raw, pos)
        pos += 8
        W = np.frombuffer(raw, "<f8", rows * cols, pos).reshape(rows, cols).astype(np.float64)
        pos += 8 * rows * cols
        b = np.frombuffer(raw, "<f8", rows, pos).astype(np.float64)
        pos += 8 * rows
        layers.append((W, b))
    (n_tag,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    activation = raw[pos:pos + n_tag].decode("utf-8")
    pos += n_tag
    (seed,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    (n_meta,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    metadata = json.loads(raw[pos:pos + n_meta].decode("utf-8"))
    return EstimatorWeights(layers, activation, int(seed), metadata)
