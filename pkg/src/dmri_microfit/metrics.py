"""Masked PSNR and SSIM for 3D parametric maps, and table-style reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .volume_io import ParamMaps, Volume4D

PSNR_INF = math.inf
SSIM_WINDOW = 7
TABLE_PARAMS = ("FA", "MD", "AD", "Vic", "Viso", "OD")


class MetricsError(ValueError):
    pass


def _as3d(x) -> np.ndarray:
    arr = x.data if isinstance(x, Volume4D) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 4 and arr.shape[3] == 1:
        arr = arr[..., 0]
    return np.asarray(arr, dtype=np.float64)


def _prepare(gt, pred, mask, data_range):
    gt, pred = _as3d(gt), _as3d(pred)
    mask = np.asarray(_as3d(mask), dtype=bool)
    if gt.shape != pred.shape or gt.shape != mask.shape:
        raise MetricsError(f"shape mismatch: {gt.shape}, {pred.shape}, mask {mask.shape}")
    if not mask.any():
        raise MetricsError("mask is empty")
    if data_range is None:
        vals = gt[mask]
        data_range = float(vals.max() - vals.min())
    if not data_range > 0:
        raise MetricsError("ground truth has zero dynamic range inside the mask")
    return gt, pred, mask, data_range


def psnr(gt, pred, mask, data_range: Optional[float] = None) -> float:
    """10 log10(L^2 / MSE) over the mask; L defaults to the masked range of ``gt``.

    Returns ``math.inf`` when the maps agree exactly.
    """
    gt, pred, mask, L = _prepare(gt, pred, mask, data_range)
    mse = float(np.mean((gt[mask] - pred[mask]) ** 2))
    if mse == 0:
        return PSNR_INF
    return 10.0 * math.log10(L * L / mse)


def _box_mean(x: np.ndarray, window: int) -> np.ndarray:
    """Mean over a cubic window clipped to the volume."""
    r = window // 2
    out = x
    count = np.ones(x.shape)
    for axis in range(3):
        n = x.shape[axis]
        cs = np.cumsum(np.insert(out, 0, 0.0, axis=axis), axis=axis)
        cc = np.cumsum(np.insert(count, 0, 0.0, axis=axis), axis=axis)
        hi = np.minimum(np.arange(n) + r + 1, n)
        lo = np.maximum(np.arange(n) - r, 0)
        out = np.take(cs, hi, axis=axis) - np.take(cs, lo, axis=axis)
        count = np.take(cc, hi, axis=axis) - np.take(cc, lo, axis=axis)
    return out / count


def ssim_map(gt, pred, window: int = SSIM_WINDOW, data_range: float = 1.0) -> np.ndarray:
    x, y = _as3d(gt), _as3d(pred)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx, my = _box_mean(x, window), _box_mean(y, window)
    sxx = _box_mean(x * x, window) - mx * mx
    syy = _box_mean(y * y, window) - my * my
    sxy = _box_mean(x * y, window) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(gt, pred, mask, window: int = SSIM_WINDOW, data_range: Optional[float] = None) -> float:
    """Mean local SSIM over the mask with a uniform window**3 neighbourhood."""
    if window < 3 or window % 2 == 0:
        raise MetricsError("window must be an odd integer >= 3")
    gt, pred, mask, L = _prepare(gt, pred, mask, data_range)
    return float(np.mean(ssim_map(gt, pred, window, L)[mask]))


@dataclass
class MetricsReport:
    method: str
    protocol: str
    parameters: List[str]
    psnr: Dict[str, float]
    ssim: Dict[str, float]
    psnr_std: Dict[str, float] = field(default_factory=dict)
    ssim_std: Dict[str, float] = field(default_factory=dict)
    n_units: int = 1
    per_unit: List[Dict[str, Dict[str, float]]] = field(default_factory=list)

    @property
    def psnr_average(self) -> float:
        return float(np.mean([self.psnr[p] for p in self.parameters]))

    @property
    def ssim_average(self) -> float:
        return float(np.mean([self.ssim[p] for p in self.parameters]))

    def rows(self):
        """CSV rows: method, protocol, metric, parameter, mean, std, n_units."""
        for metric, vals, stds in (("psnr", self.psnr, self.psnr_std), ("ssim", self.ssim, self.ssim_std)):
            for p in self.parameters:
                yield [self.method, self.protocol, metric, p, vals[p], stds.get(p, 0.0), self.n_units]
            avg = self.psnr_average if metric == "psnr" else self.ssim_average
            yield [self.method, self.protocol, metric, "Average", avg, stds.get("Average", 0.0), self.n_units]


def evaluate(gt_maps, pred_maps, mask, parameters: Sequence[str] = TABLE_PARAMS,
             method: str = "method", protocol: str = "", window: int = SSIM_WINDOW) -> MetricsReport:
    """Per-parameter PSNR/SSIM.

    ``gt_maps``, ``pred_maps`` and ``mask`` may each be a list (one entry per
    evaluation unit, e.g. subject); the report then holds the across-unit
    mean and sample standard deviation (ddof=1) of each value and of the
    per-unit Average column.
    """
    if isinstance(gt_maps, (ParamMaps, dict)):
        gt_maps, pred_maps, mask = [gt_maps], [pred_maps], [mask]
    if not (len(gt_maps) == len(pred_maps) == len(mask)) or not gt_maps:
        raise MetricsError("need matching, non-empty lists of maps and masks")
    parameters = list(parameters)
    units = []
    for g, p, m in zip(gt_maps, pred_maps, mask):
        for name in parameters:
            if name not in g or name not in p:
                raise MetricsError(f"parameter {name!r} missing from a map set")
        unit = {"psnr": {}, "ssim": {}}
        for name in parameters:
            unit["psnr"][name] = psnr(g[name], p[name], m)
            unit["ssim"][name] = ssim(g[name], p[name], m, window)
        unit["psnr"]["Average"] = float(np.mean([unit["psnr"][n] for n in parameters]))
        unit["ssim"]["Average"] = float(np.mean([unit["ssim"][n] for n in parameters]))
        units.append(unit)

    def agg(metric):
        mean, std = {}, {}
        for name in parameters + ["Average"]:
            vals = np.array([u[metric][name] for u in units])
            mean[name] = float(vals.mean())
            std[name] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        return mean, std

    pm, ps = agg("psnr")
    sm, ss = agg("ssim")
    pm.pop("Average")
    sm.pop("Average")
    return MetricsReport(method, protocol, parameters, pm, sm, ps, ss, len(units), units)


def write_reports_csv(reports: Sequence[MetricsReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "protocol", "metric", "parameter", "mean", "std", "n_units"])
        for rep in reports:
            for row in rep.rows():
                w.writerow([row[0], row[1], row[2], row[3], repr(float(row[4])), repr(float(row[5])), row[6]])


def format_table(reports: Sequence[MetricsReport]) -> str:
    """Aligned text table: one PSNR block and one SSIM block, rows = methods."""
    if not reports:
        return ""
    params = reports[0].parameters
    protocol = reports[0].protocol
    cols = params + ["Average"]
    width = max(12, max(len(r.method) for r in reports) + 2)
    lines = []
    for metric, fmt in (("PSNR", "{:.4f}"), ("SSIM", "{:.4f}")):
        lines.append(f"{'Methods':<{width}}| {metric}")
        lines.append(f"{'(' + protocol + ')':<{width}}| " + " ".join(f"{c:>16}" for c in cols))
        lines.append("-" * (width + 2 + 17 * len(cols)))
        for r in reports:
            vals = r.psnr if metric == "PSNR" else r.ssim
            stds = r.psnr_std if metric == "PSNR" else r.ssim_std
            avg = r.psnr_average if metric == "PSNR" else r.ssim_average
            cells = [fmt.format(vals[p]) for p in params]
            cells.append(fmt.format(avg) + "±" + fmt.format(stds.get("Average", 0.0)))
            lines.append(f"{r.method:<{width}}| " + " ".join(f"{c:>16}" for c in cells))
        lines.append("")
    lines.append(f"± is the standard deviation across {reports[0].n_units} evaluation unit(s).")
    return "\n".join(lines) + "\n"
