"""Config-driven experiment pipeline with per-stage manifests.

Stages (in dependency order): phantom, subsample, fit-dti, fit-noddi,
segment, train, predict, evaluate. Each stage records the digests of its
inputs and outputs plus the config it ran with; a rerun with matching
digests is skipped.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import dti, estimator, metrics, noddi, phantom, sampling, tissue
from .volume_io import (GradientTable, ParamMaps, Volume4D, read_gradient_table, read_nifti,
                        write_gradient_table, write_nifti)

log = logging.getLogger(__name__)

STAGES = ("phantom", "subsample", "fit-dti", "fit-noddi", "segment", "train", "predict", "evaluate")
DTI_NAMES = ("FA", "MD", "AD", "RD")
NODDI_NAMES = ("Vic", "Viso", "OD")
SPLITS = ("train", "val", "test")

DEFAULTS = {
    "seed": 0,
    "output_dir": "dmri_microfit_run",
    "data": {
        "source": "phantom",
        "phantom": {
            "dims": [16, 16, 16],
            "noise_sigma": 0.03,
            "t1_noise": 0.03,
            "n_wm": 3,
            "subjects": {"train": list(range(1, 13)), "val": [13], "test": [14, 15]},
            "protocol": {"n_dirs": 90, "bvalues": [1000.0, 2000.0, 3000.0], "n_b0": 18, "seed": 0},
            "regions": None,
        },
        "files": {"subjects": []},
    },
    "subsample": {"k_per_shell": 6, "n_b0": 1},
    "fit": {
        "vic_levels": list(noddi.VIC_LEVELS),
        "od_levels": list(noddi.OD_LEVELS),
        "ridge_scale": noddi.RIDGE_SCALE,
        "d_par": phantom.D_PAR,
        "d_iso": phantom.D_ISO,
        "b0_threshold": 50.0,
        "shell_tolerance": 50.0,
    },
    "segment": {"beta": 1.0, "max_iters": 100, "tol": 1e-4},
    "train": {
        "hidden": [512, 512],
        "epochs": 60,
        "batch_size": 128,
        "lr": 1e-3,
        "stride": 2,
        "prior_channels": True,
        "ablation": True,
        "parameters": list(estimator.DEFAULT_PARAMS),
    },
    "predict": {"stride": 2},
    "evaluate": {"window": metrics.SSIM_WINDOW, "parameters": list(metrics.TABLE_PARAMS)},
}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class DependencyError(RuntimeError):
    def __init__(self, stage: str, missing: Sequence[str]):
        shown = ", ".join(str(m) for m in list(missing)[:3])
        super().__init__(f"missing inputs ({shown}); run stage '{stage}' first")
        self.stage = stage
        self.missing = list(missing)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def _merge(defaults, override, path=""):
    if not isinstance(override, dict):
        raise ConfigError(path or "<root>", "expected a mapping")
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        sub = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(sub, "unknown option")
        if isinstance(defaults[key], dict) and value is not None:
            out[key] = _merge(defaults[key], value, sub)
        else:
            out[key] = value
    return out


def _require(cond, path, message):
    if not cond:
        raise ConfigError(path, message)


def _int(value, path) -> int:
    _require(isinstance(value, int) and not isinstance(value, bool), path, "must be an integer")
    return value


def _num(value, path) -> float:
    _require(isinstance(value, (int, float)) and not isinstance(value, bool), path, "must be a number")
    return float(value)


def validate_config(cfg: dict, base_dir: Path = Path(".")) -> None:
    _require(isinstance(cfg["seed"], int) and cfg["seed"] >= 0, "seed", "must be a non-negative integer")
    data = cfg["data"]
    _require(data["source"] in ("phantom", "files"), "data.source", "must be 'phantom' or 'files'")
    if data["source"] == "phantom":
        ph = data["phantom"]
        _require(len(ph["dims"]) == 3 and all(_int(n, "data.phantom.dims") >= 4 for n in ph["dims"]),
                 "data.phantom.dims", "three integers >= 4 required")
        _require(_num(ph["noise_sigma"], "data.phantom.noise_sigma") >= 0, "data.phantom.noise_sigma", "must be >= 0")
        _require(_num(ph["t1_noise"], "data.phantom.t1_noise") >= 0, "data.phantom.t1_noise", "must be >= 0")
        subj = ph["subjects"]
        for split in SPLITS:
            _require(isinstance(subj.get(split, []), list), f"data.phantom.subjects.{split}", "must be a list")
        _require(subj.get("train"), "data.phantom.subjects.train", "at least one training phantom required")
        _require(subj.get("test"), "data.phantom.subjects.test", "at least one test phantom required")
    else:
        subjects = data["files"]["subjects"]
        _require(subjects, "data.files.subjects", "at least one subject required")
        for i, s in enumerate(subjects):
            for key in ("id", "split", "dwi", "bvals", "bvecs", "t1", "mask"):
                _require(key in s, f"data.files.subjects[{i}].{key}", "required")
            _require(s["split"] in SPLITS, f"data.files.subjects[{i}].split", f"must be one of {SPLITS}")
            for key in ("dwi", "bvals", "bvecs", "t1", "mask"):
                _require((base_dir / s[key]).is_file(), f"data.files.subjects[{i}].{key}",
                         f"file not found: {s[key]}")
    _require(_int(cfg["subsample"]["k_per_shell"], "subsample.k_per_shell") >= 1, "subsample.k_per_shell", "must be >= 1")
    _require(_int(cfg["subsample"]["n_b0"], "subsample.n_b0") >= 1, "subsample.n_b0", "must be >= 1")
    fit = cfg["fit"]
    _require(fit["vic_levels"] and all(0 <= v <= 1 for v in fit["vic_levels"]), "fit.vic_levels",
             "non-empty values in [0, 1] required")
    _require(fit["od_levels"] and all(0 < v <= 1 for v in fit["od_levels"]), "fit.od_levels",
             "non-empty values in (0, 1] required")
    _require(_num(fit["ridge_scale"], "fit.ridge_scale") >= 0, "fit.ridge_scale", "must be >= 0")
    seg = cfg["segment"]
    _require(_num(seg["beta"], "segment.beta") >= 0, "segment.beta", "must be >= 0")
    _require(_int(seg["max_iters"], "segment.max_iters") >= 1, "segment.max_iters", "must be >= 1")
    tr = cfg["train"]
    _require(_int(tr["epochs"], "train.epochs") >= 0, "train.epochs", "must be >= 0")
    _require(_int(tr["batch_size"], "train.batch_size") >= 1, "train.batch_size", "must be >= 1")
    _require(_num(tr["lr"], "train.lr") > 0, "train.lr", "must be > 0")
    _require(1 <= _int(tr["stride"], "train.stride") <= 4, "train.stride", "must be in 1..4")
    _require(1 <= _int(cfg["predict"]["stride"], "predict.stride") <= 4, "predict.stride", "must be in 1..4")
    _require(isinstance(tr["hidden"], list) and all(isinstance(h, int) and h >= 1 for h in tr["hidden"]),
             "train.hidden", "list of positive integers required")
    _require(tr["parameters"] and len(tr["parameters"]) <= 11, "train.parameters", "1 to 11 names required")
    known = set(DTI_NAMES) | set(NODDI_NAMES)
    for name in tr["parameters"]:
        _require(name in known, "train.parameters", f"unknown parameter {name!r}")
    for name in cfg["evaluate"]["parameters"]:
        _require(name in tr["parameters"], "evaluate.parameters", f"{name!r} is not estimated")
    w = _int(cfg["evaluate"]["window"], "evaluate.window")
    _require(w >= 3 and w % 2 == 1, "evaluate.window", "odd integer >= 3 required")


def load_config(path, overrides: Optional[dict] = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"cannot parse: {exc}")
    cfg = _merge(DEFAULTS, raw)
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    cfg["_base_dir"] = str(path.resolve().parent)
    validate_config(cfg, Path(cfg["_base_dir"]))
    return cfg


def bundled_config_path(name: str = "phantom16.yaml") -> Path:
    return Path(__file__).parent / "configs" / name


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _params_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class StageResult:
    stage: str
    skipped: bool
    outputs: List[str]


# ---------------------------------------------------------------------------
# layout helpers
# ---------------------------------------------------------------------------

class Layout:
    def __init__(self, cfg: dict, out: Path):
        self.cfg = cfg
        self.out = Path(out)

    def subjects(self) -> List[Tuple[str, str]]:
        data = self.cfg["data"]
        if data["source"] == "phantom":
            return [(f"phantom_{int(s):03d}", split) for split in SPLITS
                    for s in data["phantom"]["subjects"].get(split, [])]
        return [(s["id"], s["split"]) for s in data["files"]["subjects"]]

    def split(self, name: str) -> List[str]:
        return [sid for sid, sp in self.subjects() if sp == name]

    def subj(self, sid: str) -> Path:
        return self.out / "subjects" / sid

    def manifest(self, stage: str) -> Path:
        return self.out / "manifests" / f"{stage}.json"

    def model_dir(self, priors: bool) -> Path:
        return self.out / ("model" if priors else "model_noprior")

    def pred_dir(self, sid: str, priors: bool) -> Path:
        return self.subj(sid) / ("pred" if priors else "pred_noprior")

    def metrics_dir(self) -> Path:
        return self.out / "metrics"


def _maps_files(d: Path, names) -> List[Path]:
    return [d / f"{n.lower()}.nii" for n in names]


def _table(path_dir: Path, prefix: str, cfg) -> GradientTable:
    return read_gradient_table(path_dir / f"{prefix}.bvals", path_dir / f"{prefix}.bvecs",
                               cfg["fit"]["b0_threshold"], cfg["fit"]["shell_tolerance"])


def _mask(d: Path) -> np.ndarray:
    return read_nifti(d / "mask.nii").data[..., 0] > 0


def _protocol(cfg) -> GradientTable:
    p = cfg["data"]["phantom"]["protocol"]
    return phantom.hcp_like_protocol(int(p["n_dirs"]), tuple(p["bvalues"]), int(p["n_b0"]), int(p["seed"]))


def _phantom_spec(cfg, seed: int) -> phantom.PhantomSpec:
    ph = cfg["data"]["phantom"]
    if ph.get("regions"):
        d = {"dims": ph["dims"], "regions": ph["regions"], "noise_sigma": ph["noise_sigma"], "seed": seed}
        return phantom.PhantomSpec.from_dict(d)
    return phantom.random_phantom_spec(tuple(ph["dims"]), seed, float(ph["noise_sigma"]), int(ph["n_wm"]))


def _dictionary(cfg, table: GradientTable) -> noddi.NoddiDictionary:
    f = cfg["fit"]
    return noddi.build_dictionary(table, f["vic_levels"], phantom.od_to_kappa(np.array(f["od_levels"])),
                                  f["d_par"], f["d_iso"])


# ---------------------------------------------------------------------------
# stages: each returns (inputs, outputs, runner)
# ---------------------------------------------------------------------------

def _stage_phantom(L: Layout):
    cfg = L.cfg
    outputs = []
    for sid, _ in L.subjects():
        d = L.subj(sid)
        outputs += [d / "dwi.nii", d / "dwi.bvals", d / "dwi.bvecs", d / "t1.nii", d / "mask.nii"]
    inputs = []
    if cfg["data"]["source"] == "files":
        base = Path(cfg["_base_dir"])
        inputs = [base / s[k] for s in cfg["data"]["files"]["subjects"]
                  for k in ("dwi", "bvals", "bvecs", "t1", "mask")]

    def run(workers):
        if cfg["data"]["source"] == "files":
            base = Path(cfg["_base_dir"])
            for s in cfg["data"]["files"]["subjects"]:
                d = L.subj(s["id"])
                d.mkdir(parents=True, exist_ok=True)
                write_nifti(read_nifti(base / s["dwi"]), d / "dwi.nii")
                write_gradient_table(read_gradient_table(base / s["bvals"], base / s["bvecs"]),
                                     d / "dwi.bvals", d / "dwi.bvecs")
                write_nifti(read_nifti(base / s["t1"]), d / "t1.nii")
                m = read_nifti(base / s["mask"])
                write_nifti(Volume4D(m.data > 0, m.spacing, "label"), d / "mask.nii")
            return
        ph = cfg["data"]["phantom"]
        table = _protocol(cfg)
        for sid, _ in L.subjects():
            seed = int(sid.split("_")[1])
            spec = _phantom_spec(cfg, seed)
            signals, truth, labels = phantom.build_phantom(spec, table)
            d = L.subj(sid)
            d.mkdir(parents=True, exist_ok=True)
            write_nifti(signals, d / "dwi.nii")
            write_gradient_table(table, d / "dwi.bvals", d / "dwi.bvecs")
            lab = labels.data[..., 0]
            write_nifti(Volume4D(lab >= 0, spec.spacing, "label"), d / "mask.nii")
            write_nifti(labels, d / "labels.nii")
            write_nifti(phantom.synthesize_t1(lab, float(ph["t1_noise"]), seed, spacing=spec.spacing),
                        d / "t1.nii")
            truth.save(d / "truth")
            (d / "phantom.yaml").write_text(yaml.safe_dump(spec.to_dict(), sort_keys=True))

    return inputs, outputs, run


def _stage_subsample(L: Layout):
    cfg = L.cfg
    inputs, outputs = [], []
    for sid, _ in L.subjects():
        d = L.subj(sid)
        inputs += [d / "dwi.nii", d / "dwi.bvals", d / "dwi.bvecs"]
        outputs += [d / "plan.txt", d / "sparse.nii", d / "sparse.bvals", d / "sparse.bvecs"]

    def run(workers):
        for sid, _ in L.subjects():
            d = L.subj(sid)
            table = _table(d, "dwi", cfg)
            plan = sampling.make_plan(table, int(cfg["subsample"]["k_per_shell"]), int(cfg["subsample"]["n_b0"]))
            sparse, sparse_table = sampling.apply_plan(read_nifti(d / "dwi.nii"), table, plan)
            plan.save(d / "plan.txt")
            write_nifti(sparse, d / "sparse.nii")
            write_gradient_table(sparse_table, d / "sparse.bvals", d / "sparse.bvecs")

    return inputs, outputs, run


def _stage_fit_dti(L: Layout):
    cfg = L.cfg
    inputs, outputs = [], []
    for sid, _ in L.subjects():
        d = L.subj(sid)
        inputs += [d / "dwi.nii", d / "dwi.bvals", d / "dwi.bvecs", d / "mask.nii",
                   d / "sparse.nii", d / "sparse.bvals", d / "sparse.bvecs"]
        for kind in ("gt", "mf"):
            outputs += _maps_files(d / kind, DTI_NAMES) + [d / kind / "tensor.nii", d / kind / "v1.nii"]

    def run(workers):
        for sid, _ in L.subjects():
            d = L.subj(sid)
            mask = _mask(d)
            for kind, prefix in (("gt", "dwi"), ("mf", "sparse")):
                vol = read_nifti(d / f"{prefix}.nii")
                fit = dti.fit_dti_volume(vol.data, _table(d, prefix, cfg), mask, vol.spacing)
                fit.maps.save(d / kind)
                write_nifti(Volume4D(fit.d_elements, vol.spacing, "parameter"), d / kind / "tensor.nii")
                write_nifti(Volume4D(fit.principal_dir, vol.spacing, "parameter"), d / kind / "v1.nii")

    return inputs, outputs, run


def _noddi_job(args):
    data, table_arrays, mu, mask, fitcfg = args
    with threadpool_limits(limits=1):
        return _noddi_fit(data, table_arrays, mu, mask, fitcfg)


def _noddi_fit(data, table_arrays, mu, mask, fitcfg):
    table = GradientTable(*table_arrays)
    dictionary = noddi.build_dictionary(table, fitcfg["vic_levels"],
                                        phantom.od_to_kappa(np.array(fitcfg["od_levels"])),
                                        fitcfg["d_par"], fitcfg["d_iso"])
    maps, _ = noddi.fit_noddi_volume(data, table, mu, mask, dictionary, fitcfg["ridge_scale"])
    return {k: maps[k] for k in NODDI_NAMES}


def _fit_noddi_parallel(data, table, mu, mask, cfg, workers: int) -> Dict[str, np.ndarray]:
    """Split the mask into ``workers`` interleaved voxel sets; results do not
    depend on the split because voxel fits are independent."""
    args = (table.bvals, table.bvecs, table.b0_threshold, table.shell_tolerance)
    if workers <= 1:
        return _noddi_job((data, args, mu, mask, cfg["fit"]))
    lin = np.flatnonzero(mask.reshape(-1))
    jobs = []
    for w in range(workers):
        sub = np.zeros(mask.size, dtype=bool)
        sub[lin[w::workers]] = True
        jobs.append((data, args, mu, sub.reshape(mask.shape), cfg["fit"]))
    out = {k: np.zeros(mask.shape) for k in NODDI_NAMES}
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for part, job in zip(pool.map(_noddi_job, jobs), jobs):
            for k in NODDI_NAMES:
                out[k][job[3]] = part[k][job[3]]
    return out


def _stage_fit_noddi(L: Layout):
    cfg = L.cfg
    inputs, outputs = [], []
    for sid, _ in L.subjects():
        d = L.subj(sid)
        inputs += [d / "dwi.nii", d / "dwi.bvals", d / "dwi.bvecs", d / "mask.nii", d / "sparse.nii",
                   d / "sparse.bvals", d / "sparse.bvecs", d / "gt" / "v1.nii", d / "mf" / "v1.nii"]
        for kind in ("gt", "mf"):
            outputs += _maps_files(d / kind, NODDI_NAMES)

    def run(workers):
        for sid, _ in L.subjects():
            d = L.subj(sid)
            mask = _mask(d)
            for kind, prefix in (("gt", "dwi"), ("mf", "sparse")):
                vol = read_nifti(d / f"{prefix}.nii")
                mu = read_nifti(d / kind / "v1.nii").data
                maps = _fit_noddi_parallel(vol.data, _table(d, prefix, cfg), mu, mask, cfg, workers)
                ParamMaps(maps, vol.spacing).save(d / kind)

    return inputs, outputs, run


def _stage_segment(L: Layout):
    cfg = L.cfg
    inputs, outputs = [], []
    for sid, _ in L.subjects():
        d = L.subj(sid)
        inputs += [d / "t1.nii", d / "mask.nii"]
        outputs += [d / f"pve_{c}.nii" for c in tissue.CLASS_NAMES]

    def run(workers):
        seg = cfg["segment"]
        for sid, _ in L.subjects():
            d = L.subj(sid)
            t1 = read_nifti(d / "t1.nii")
            probs = tissue.segment_hmrf(t1, _mask(d), float(seg["beta"]), int(seg["max_iters"]),
                                        float(seg["tol"]), seed=int(cfg["seed"]))
            for name, vol in probs.volumes(t1.spacing).items():
                write_nifti(vol, d / f"{name}.nii")

    return inputs, outputs, run


def _load_priors(d: Path):
    stack = np.stack([read_nifti(d / f"pve_{c}.nii").data[..., 0] for c in tissue.CLASS_NAMES], -1)
    return stack


def _sparse_inputs(d: Path, cfg):
    vol = read_nifti(d / "sparse.nii")
    table = _table(d, "sparse", cfg)
    return vol.data[..., ~table.b0_mask], vol.data[..., table.b0_mask], vol.spacing


def _subject_dataset(L: Layout, sid: str, priors: bool) -> estimator.PatchDataset:
    cfg = L.cfg
    d = L.subj(sid)
    dwi, b0, _ = _sparse_inputs(d, cfg)
    names = cfg["train"]["parameters"]
    targets = ParamMaps.load(d / "gt", names)
    return estimator.extract_patches(dwi, b0, _load_priors(d) if priors else None, targets, _mask(d),
                                     int(cfg["train"]["stride"]), names)


def _variants(cfg) -> List[bool]:
    primary = bool(cfg["train"]["prior_channels"])
    return [primary, not primary] if cfg["train"]["ablation"] else [primary]


def _stage_train(L: Layout):
    cfg = L.cfg
    inputs = []
    names = cfg["train"]["parameters"]
    for sid in L.split("train") + L.split("val"):
        d = L.subj(sid)
        inputs += [d / "sparse.nii", d / "sparse.bvals", d / "sparse.bvecs", d / "mask.nii"]
        inputs += [d / f"pve_{c}.nii" for c in tissue.CLASS_NAMES] + _maps_files(d / "gt", names)
    outputs = []
    for pri in _variants(cfg):
        outputs += [L.model_dir(pri) / "weights.dmfw", L.model_dir(pri) / "history.csv"]
    if cfg["train"]["ablation"]:
        outputs.append(L.out / "model" / "ablation.csv")

    def run(workers):
        tr = cfg["train"]
        tconf = estimator.TrainConfig(hidden=tuple(tr["hidden"]), epochs=int(tr["epochs"]),
                                      batch_size=int(tr["batch_size"]), lr=float(tr["lr"]),
                                      seed=int(cfg["seed"]))
        finals = {}
        for pri in _variants(cfg):
            ds = estimator.PatchDataset.concat([_subject_dataset(L, s, pri) for s in L.split("train")])
            val = None
            if L.split("val"):
                val = estimator.PatchDataset.concat([_subject_dataset(L, s, pri) for s in L.split("val")])
            weights, history = estimator.train(ds, tconf, val)
            md = L.model_dir(pri)
            md.mkdir(parents=True, exist_ok=True)
            estimator.save_weights(weights, md / "weights.dmfw")
            history.to_csv(md / "history.csv")
            finals[pri] = history.val_loss[-1]
        if cfg["train"]["ablation"]:
            (L.out / "model").mkdir(parents=True, exist_ok=True)
            with open(L.out / "model" / "ablation.csv", "w") as fh:
                fh.write("configuration,final_val_loss\n")
                fh.write(f"DWIs,{finals[False]!r}\n")
                fh.write(f"DWIs+T1w tissue,{finals[True]!r}\n")

    return inputs, outputs, run


def _stage_predict(L: Layout):
    cfg = L.cfg
    names = cfg["train"]["parameters"]
    inputs, outputs = [], []
    for pri in _variants(cfg):
        inputs.append(L.model_dir(pri) / "weights.dmfw")
    for sid in L.split("test"):
        d = L.subj(sid)
        inputs += [d / "sparse.nii", d / "sparse.bvals", d / "sparse.bvecs", d / "mask.nii"]
        inputs += [d / f"pve_{c}.nii" for c in tissue.CLASS_NAMES]
        for pri in _variants(cfg):
            outputs += _maps_files(L.pred_dir(sid, pri), names)

    def run(workers):
        for pri in _variants(cfg):
            weights = estimator.load_weights(L.model_dir(pri) / "weights.dmfw")
            for sid in L.split("test"):
                d = L.subj(sid)
                dwi, b0, spacing = _sparse_inputs(d, cfg)
                maps = estimator.predict_volume(weights, dwi, b0, _load_priors(d) if pri else None, _mask(d),
                                                int(cfg["predict"]["stride"]), names, spacing=spacing)
                maps.save(L.pred_dir(sid, pri))

    return inputs, outputs, run


def _stage_evaluate(L: Layout):
    cfg = L.cfg
    names = cfg["evaluate"]["parameters"]
    inputs = []
    for sid in L.split("test"):
        d = L.subj(sid)
        inputs += [d / "mask.nii"] + _maps_files(d / "gt", names) + _maps_files(d / "mf", names)
        for pri in _variants(cfg):
            inputs += _maps_files(L.pred_dir(sid, pri), names)
    outputs = [L.metrics_dir() / "metrics.csv", L.metrics_dir() / "table.txt"]

    def run(workers):
        tests = L.split("test")
        gts = [ParamMaps.load(L.subj(s) / "gt", names) for s in tests]
        masks = [_mask(L.subj(s)) for s in tests]
        k = int(cfg["subsample"]["k_per_shell"])
        n_shells = len(_table(L.subj(tests[0]), "dwi", cfg).shells)
        protocol = f"{k * n_shells} DWIs"
        window = int(cfg["evaluate"]["window"])
        reports = [metrics.evaluate(gts, [ParamMaps.load(L.subj(s) / "mf", names) for s in tests], masks,
                                    names, "MF", protocol, window)]
        labels = {False: "DWIs", True: "DWIs+T1w tissue"}
        for pri in sorted(_variants(cfg)):
            preds = [ParamMaps.load(L.pred_dir(s, pri), names) for s in tests]
            reports.append(metrics.evaluate(gts, preds, masks, names, labels[pri], protocol, window))
        L.metrics_dir().mkdir(parents=True, exist_ok=True)
        metrics.write_reports_csv(reports, L.metrics_dir() / "metrics.csv")
        (L.metrics_dir() / "table.txt").write_text(metrics.format_table(reports))

    return inputs, outputs, run


STAGE_BUILDERS: Dict[str, Callable] = {
    "phantom": _stage_phantom,
    "subsample": _stage_subsample,
    "fit-dti": _stage_fit_dti,
    "fit-noddi": _stage_fit_noddi,
    "segment": _stage_segment,
    "train": _stage_train,
    "predict": _stage_predict,
    "evaluate": _stage_evaluate,
}

def _first_producer(L: Layout, missing: Sequence[Path]) -> str:
    """Earliest stage whose outputs include one of the missing paths."""
    missing = {Path(p) for p in missing}
    for stage in STAGES:
        _, outputs, _ = STAGE_BUILDERS[stage](L)
        if missing & {Path(o) for o in outputs}:
            return stage
    return "phantom"


def _stage_params(cfg: dict, stage: str) -> dict:
    keys = {
        "phantom": ["data"],
        "subsample": ["subsample", "fit"],
        "fit-dti": ["fit"],
        "fit-noddi": ["fit"],
        "segment": ["segment", "seed"],
        "train": ["train", "seed"],
        "predict": ["predict", "train"],
        "evaluate": ["evaluate", "subsample"],
    }[stage]
    return {k: cfg[k] for k in keys}


def run_stage(cfg: dict, stage: str, out, workers: int = 1) -> StageResult:
    L = Layout(cfg, Path(out))
    inputs, outputs, runner = STAGE_BUILDERS[stage](L)
    missing = [p for p in inputs if not Path(p).is_file()]
    if missing:
        raise DependencyError(_first_producer(L, missing), missing)
    params = _params_digest(_stage_params(cfg, stage))
    in_digests = {str(Path(p).relative_to(L.out)) if Path(p).is_relative_to(L.out) else str(p): file_digest(p)
                  for p in inputs}
    man_path = L.manifest(stage)
    if man_path.is_file():
        try:
            man = json.loads(man_path.read_text())
        except json.JSONDecodeError:
            man = {}
        if (man.get("params") == params and man.get("inputs") == in_digests
                and all((L.out / rel).is_file() and file_digest(L.out / rel) == dig
                        for rel, dig in man.get("outputs", {}).items())
                and len(man.get("outputs", {})) == len(outputs)):
            log.info("stage %s up to date, skipping", stage)
            return StageResult(stage, True, [str(o) for o in outputs])

    log.info("running stage %s", stage)
    runner(workers)
    out_digests = {str(Path(p).relative_to(L.out)): file_digest(p) for p in outputs}
    man_path.parent.mkdir(parents=True, exist_ok=True)
    man_path.write_text(json.dumps({"stage": stage, "params": params, "inputs": in_digests,
                                    "outputs": out_digests}, indent=1, sort_keys=True))
    return StageResult(stage, False, [str(o) for o in outputs])


def run(cfg: dict, stage: str, out=None, workers: int = 1) -> List[StageResult]:
    """Run one stage, or every stage in order for ``stage='all'``."""
    if stage != "all" and stage not in STAGES:
        raise ConfigError("stage", f"unknown stage {stage!r}")
    out = Path(out or cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    # BLAS stays single-threaded so results do not depend on ``workers``
    with threadpool_limits(limits=1):
        return [run_stage(cfg, s, out, workers) for s in (STAGES if stage == "all" else [stage])]
