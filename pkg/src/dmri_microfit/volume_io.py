"""Volumes, gradient tables and parameter maps on disk.

Only the single-file, uncompressed NIfTI-1 variant (magic ``n+1``) is
handled. Data are kept in memory as float64 arrays of shape (W, H, S, D);
flattening with ``order="F"`` yields the on-disk x-fastest ordering.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352
B0_THRESHOLD = 50.0
SHELL_TOLERANCE = 50.0

INTENTS = ("signal", "parameter", "probability", "label")

# field order of the 348-byte header, little/big endian prefix added at use
_HEADER_FMT = (
    "i10s18sihcB"  # sizeof_hdr .. dim_info
    "8h"  # dim
    "3f"  # intent_p1..3
    "hhhh"  # intent_code, datatype, bitpix, slice_start
    "8f"  # pixdim
    "fff"  # vox_offset, scl_slope, scl_inter
    "hBB"  # slice_end, slice_code, xyzt_units
    "ffff"  # cal_max, cal_min, slice_duration, toffset
    "ii"  # glmax, glmin
    "80s24s"  # descrip, aux_file
    "hh"  # qform_code, sform_code
    "6f"  # quatern_b/c/d, qoffset_x/y/z
    "12f"  # srow_x, srow_y, srow_z
    "16s4s"  # intent_name, magic
)
assert struct.calcsize("<" + _HEADER_FMT) == HEADER_SIZE

_DTYPES = {
    2: np.dtype("u1"),
    4: np.dtype("i2"),
    16: np.dtype("f4"),
    64: np.dtype("f8"),
    256: np.dtype("i1"),
    512: np.dtype("u2"),
}


class NiftiError(ValueError):
    """Base class for volume-file problems; ``field`` names the culprit."""

    def __init__(self, message: str, field: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class HeaderSizeError(NiftiError):
    pass


class BadMagicError(NiftiError):
    pass


class UnsupportedVariantError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class TruncatedDataError(NiftiError):
    pass


class DimensionOverflowError(NiftiError):
    pass


class GradientTableError(ValueError):
    def __init__(self, message: str, field: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class Orientation:
    """Orientation fields carried through unchanged; never interpreted."""

    qform_code: int = 0
    sform_code: int = 0
    quatern: Tuple[float, ...] = (0.0,) * 6
    srow: Tuple[float, ...] = (0.0,) * 12


@dataclass(frozen=True, eq=False)
class Volume4D:
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    intent: str = "signal"
    orientation: Optional[Orientation] = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim == 3:
            data = data[..., None]
        if data.ndim != 4:
            raise ValueError(f"volume data must be 3D or 4D, got shape {data.shape}")
        if any(n < 1 for n in data.shape):
            raise ValueError("all dimensions must be positive")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(not s > 0 for s in spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if self.intent not in INTENTS:
            raise ValueError(f"unknown intent {self.intent!r}")
        if self.intent == "probability" and (np.any(data < 0) or np.any(data > 1)):
            raise ValueError("probability volume has values outside [0, 1]")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> Tuple[int, int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def spatial_shape(self) -> Tuple[int, int, int]:
        return self.dims[:3]

    def volume(self, index: int = 0) -> np.ndarray:
        return self.data[..., index]

    def take(self, indices: Sequence[int]) -> "Volume4D":
        return Volume4D(self.data[..., list(indices)], self.spacing, self.intent, self.orientation)


def _decode_str(raw: bytes) -> str:
    return raw.split(b"\0", 1)[0].decode("ascii", errors="replace")


def read_nifti(path) -> Volume4D:
    """Read a single-file NIfTI-1 volume.

    3D files are promoted to D=1. Integer payloads are converted to float and
    scaled by ``scl_slope``/``scl_inter`` when the slope is set.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such volume file: {path}")
    raw = path.read_bytes()
    if len(raw) < HEADER_SIZE:
        raise TruncatedDataError(f"file has {len(raw)} bytes, header needs {HEADER_SIZE}", "header")

    if struct.unpack("<i", raw[:4])[0] == HEADER_SIZE:
        endian = "<"
    elif struct.unpack(">i", raw[:4])[0] == HEADER_SIZE:
        endian = ">"
    else:
        raise HeaderSizeError("header length is not 348 in either byte order", "sizeof_hdr")

    fields = struct.unpack(endian + _HEADER_FMT, raw[:HEADER_SIZE])
    dim = fields[7:15]
    datatype = fields[19]
    pixdim = fields[22:30]
    vox_offset, scl_slope, scl_inter = fields[30:33]
    qform_code, sform_code = fields[44], fields[45]
    quatern = fields[46:52]
    srow = fields[52:64]
    intent_name = _decode_str(fields[64])
    magic = fields[65]

    if magic == b"ni1\0":
        raise UnsupportedVariantError("detached header/image pair is not supported", "magic")
    if magic != b"n+1\0":
        raise BadMagicError(f"unexpected magic {magic!r}", "magic")
    if datatype not in _DTYPES:
        raise UnsupportedDatatypeError(f"datatype code {datatype} not supported", "datatype")
    ndim = dim[0]
    if ndim not in (3, 4):
        raise NiftiError(f"dim[0]={ndim}, only 3 or 4 supported", "dim")
    shape = tuple(int(n) for n in dim[1 : ndim + 1])
    if ndim == 3:
        shape = shape + (1,)
    if any(n < 1 for n in shape):
        raise NiftiError(f"non-positive dimension in {shape}", "dim")

    dtype = _DTYPES[datatype].newbyteorder(endian)
    offset = int(vox_offset)
    count = int(np.prod(shape))
    needed = offset + count * dtype.itemsize
    if len(raw) < needed:
        raise TruncatedDataError(f"data section needs {needed} bytes, file has {len(raw)}", "data")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).astype(np.float64)
    if scl_slope not in (0.0, 1.0) and np.isfinite(scl_slope):
        flat = flat * scl_slope + scl_inter
    elif scl_slope == 1.0 and scl_inter != 0.0:
        flat = flat + scl_inter
    data = flat.reshape(shape, order="F")

    intent = "signal"
    if intent_name.startswith("dmf:") and intent_name[4:] in INTENTS:
        intent = intent_name[4:]
    spacing = tuple(abs(p) if p != 0 else 1.0 for p in pixdim[1:4])
    orientation = Orientation(int(qform_code), int(sform_code), tuple(quatern), tuple(srow))
    return Volume4D(data, spacing, intent, orientation)


def write_nifti(volume: Volume4D, path) -> None:
    """Write ``volume`` as little-endian float32 single-file NIfTI-1."""
    dims = volume.dims
    if any(n > 32767 for n in dims):
        raise DimensionOverflowError(f"dims {dims} exceed the 16-bit field limit 32767", "dim")
    orient = volume.orientation
    if orient is None:
        sx, sy, sz = volume.spacing
        orient = Orientation(0, 2, (0.0,) * 6, (sx, 0, 0, 0, 0, sy, 0, 0, 0, 0, sz, 0))

    header = struct.pack(
        "<" + _HEADER_FMT,
        HEADER_SIZE, b"", b"", 0, 0, b"r", 0,
        4, *dims, 1, 1, 1,
        0.0, 0.0, 0.0,
        0, 16, 32, 0,
        1.0, *volume.spacing, 1.0, 0.0, 0.0, 0.0,
        float(VOX_OFFSET), 0.0, 0.0,
        0, 0, 10,  # xyzt_units: mm + s
        0.0, 0.0, 0.0, 0.0,
        0, 0,
        b"dmri_microfit", b"",
        orient.qform_code, orient.sform_code,
        *orient.quatern,
        *orient.srow,
        f"dmf:{volume.intent}".encode("ascii"), b"n+1\0",
    )
    payload = np.asarray(volume.data, dtype="<f4").ravel(order="F").tobytes()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"\0\0\0\0")  # no extensions
        fh.write(payload)


@dataclass(frozen=True)
class Shell:
    bvalue: float
    indices: Tuple[int, ...]

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True, eq=False)
class GradientTable:
    """b-values (s/mm^2) and unit directions, one entry per acquired volume.

    Entries at or below ``b0_threshold`` are stored as b=0 with a zero
    direction; the remaining directions are normalized.
    """

    bvals: np.ndarray
    bvecs: np.ndarray
    b0_threshold: float = B0_THRESHOLD
    shell_tolerance: float = SHELL_TOLERANCE
    shells: Tuple[Shell, ...] = field(init=False, repr=False)

    def __post_init__(self):
        bvals = np.array(self.bvals, dtype=np.float64).reshape(-1)
        bvecs = np.array(self.bvecs, dtype=np.float64).reshape(-1, 3)
        if len(bvals) != len(bvecs):
            raise GradientTableError(f"{len(bvals)} b-values but {len(bvecs)} directions", "length")
        if not (np.all(np.isfinite(bvals)) and np.all(np.isfinite(bvecs))):
            raise GradientTableError("non-finite entry", "value")
        if np.any(bvals < 0):
            raise GradientTableError("negative b-value", "bvals")
        b0 = bvals <= self.b0_threshold
        bvals[b0] = 0.0
        bvecs[b0] = 0.0
        norms = np.linalg.norm(bvecs[~b0], axis=1)
        if np.any(norms < 1e-8):
            bad = np.flatnonzero(~b0)[norms < 1e-8][0]
            raise GradientTableError(f"entry {bad} has b>0 and a zero-norm direction", "bvecs")
        bvecs[~b0] /= norms[:, None]
        bvals.flags.writeable = False
        bvecs.flags.writeable = False
        object.__setattr__(self, "bvals", bvals)
        object.__setattr__(self, "bvecs", bvecs)
        object.__setattr__(self, "shells", _partition_shells(bvals, self.shell_tolerance))

    def __len__(self):
        return len(self.bvals)

    @property
    def b0_mask(self) -> np.ndarray:
        return self.bvals == 0

    @property
    def b0_indices(self) -> np.ndarray:
        return np.flatnonzero(self.b0_mask)

    def subset(self, indices: Sequence[int]) -> "GradientTable":
        idx = list(indices)
        return GradientTable(self.bvals[idx], self.bvecs[idx], self.b0_threshold, self.shell_tolerance)


def _partition_shells(bvals: np.ndarray, tol: float) -> Tuple[Shell, ...]:
    # sweep sorted b-values; a new shell opens once a value is more than
    # ``tol`` above the first member of the current shell
    nz = np.flatnonzero(bvals > 0)
    if len(nz) == 0:
        return ()
    order = nz[np.lexsort((nz, bvals[nz]))]
    groups: List[List[int]] = [[int(order[0])]]
    for i in order[1:]:
        if bvals[i] - bvals[groups[-1][0]] > tol:
            groups.append([])
        groups[-1].append(int(i))
    return tuple(Shell(float(np.mean(bvals[g])), tuple(sorted(g))) for g in groups)


def _read_numeric_rows(path, what: str) -> List[List[float]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such {what} file: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        tokens = line.split()
        if not tokens:
            continue
        try:
            rows.append([float(t) for t in tokens])
        except ValueError:
            raise GradientTableError(f"non-numeric token on line {lineno}: {line.strip()!r}", what)
    return rows


def read_gradient_table(bvals_path, bvecs_path, b0_threshold: float = B0_THRESHOLD,
                        shell_tolerance: float = SHELL_TOLERANCE) -> GradientTable:
    """Parse FSL-style bvals (one row) and bvecs (three rows) files."""
    bval_rows = _read_numeric_rows(bvals_path, "bvals")
    bvec_rows = _read_numeric_rows(bvecs_path, "bvecs")
    bvals = [v for row in bval_rows for v in row]
    if len(bvec_rows) != 3:
        raise GradientTableError(f"expected 3 rows, found {len(bvec_rows)}", "bvecs")
    lengths = {len(r) for r in bvec_rows}
    if len(lengths) != 1:
        raise GradientTableError(f"rows have unequal lengths {sorted(lengths)}", "bvecs")
    n = lengths.pop()
    if n != len(bvals):
        raise GradientTableError(f"bvals has {len(bvals)} entries, bvecs rows have {n}", "length")
    return GradientTable(np.array(bvals), np.array(bvec_rows).T, b0_threshold, shell_tolerance)


def write_gradient_table(table: GradientTable, bvals_path, bvecs_path) -> None:
    with open(bvals_path, "w") as fh:
        fh.write(" ".join(f"{b:.10g}" for b in table.bvals) + "\n")
    with open(bvecs_path, "w") as fh:
        for row in table.bvecs.T:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


class ParamMaps(Mapping):
    """Named scalar maps sharing one spatial grid (e.g. FA, MD, Vic)."""

    def __init__(self, maps: Mapping[str, np.ndarray], spacing=(1.0, 1.0, 1.0)):
        self._maps: Dict[str, np.ndarray] = {}
        shape = None
        for name, arr in maps.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim == 4 and arr.shape[3] == 1:
                arr = arr[..., 0]
            if arr.ndim != 3:
                raise ValueError(f"map {name!r} is not 3D: {arr.shape}")
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise ValueError(f"map {name!r} shape {arr.shape} differs from {shape}")
            self._maps[name] = arr
        self.shape = shape
        self.spacing = tuple(float(s) for s in spacing)

    def __getitem__(self, name):
        return self._maps[name]

    def __iter__(self):
        return iter(self._maps)

    def __len__(self):
        return len(self._maps)

    def subset(self, names: Iterable[str]) -> "ParamMaps":
        return ParamMaps({n: self._maps[n] for n in names}, self.spacing)

    def save(self, directory, names: Optional[Iterable[str]] = None) -> List[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for name in names or self._maps:
            p = directory / f"{name.lower()}.nii"
            write_nifti(Volume4D(self._maps[name], self.spacing, "parameter"), p)
            written.append(p)
        return written

    @classmethod
    def load(cls, directory, names: Iterable[str]) -> "ParamMaps":
        directory = Path(directory)
        maps = {}
        spacing = (1.0, 1.0, 1.0)
        for name in names:
            vol = read_nifti(directory / f"{name.lower()}.nii")
            maps[name] = vol.data[..., 0]
            spacing = vol.spacing
        return cls(maps, spacing)


def mask_volume(mask: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> Volume4D:
    return Volume4D(np.asarray(mask, dtype=np.float64), spacing, "label")


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
