"""File formats: a NIfTI-1 subset, landmark CSV and JSON config/report documents.

NIfTI subset
------------
Single-file ``.nii``, little-endian, float32 (datatype 16, bitpix 32), data at
byte 352. Only ``sizeof_hdr``, ``dim``, ``datatype``, ``bitpix``,
``pixdim[1..3]`` (voxel spacing), ``vox_offset`` and ``magic`` are written;
every other header byte is zero. Volumes use ``dim[0] = 3`` for one channel
and ``dim[0] = 4`` with ``dim[4] = C`` otherwise. Displacement fields always use
``dim[0] = 4, dim[4] = 3`` with components x, y, z in voxel units. Values
are cast to float32 on write, so round trips are bitwise only for
float32-representable data and spacing.
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
import struct
from pathlib import Path

import numpy as np

from .core import (METRIC_KINDS, DisplacementField, Landmark, LandmarkSet, LossSpec, OptimConfig,
                   Volume)
from .errors import (FormatError, MmregError, NonFiniteDataError, ShapeError, TruncatedDataError,
                     UnsupportedDatatypeError, UnsupportedFormatError, ValidationError)

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"
FLOAT32 = 16
LANDMARK_HEADER = ["id", "fx", "fy", "fz", "mx", "my", "mz"]


class WriteError(MmregError, OSError):
    pass


class NiftiShapeError(FormatError, ShapeError):
    pass


# -- NIfTI ---------------------------------------------------------------------------

def _header(dims: list[int], spacing) -> bytes:
    hdr = bytearray(VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    dim = [len(dims)] + list(dims) + [0] * (7 - len(dims))
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<hh", hdr, 70, FLOAT32, 32)
    struct.pack_into("<8f", hdr, 76, 0.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    hdr[344:348] = MAGIC
    return bytes(hdr)


def _write_nifti(path, data: np.ndarray, spacing, dims: list[int]) -> None:
    for n in dims:
        if n > 32767:
            raise ValidationError(f"dimension {n} exceeds the NIfTI-1 limit of 32767")
    payload = _header(dims, spacing) + np.ascontiguousarray(data, dtype="<f4").tobytes()
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise WriteError(f"{path}: cannot write: {exc.strerror or exc}") from exc


def _read_nifti(path):
    """Parse the header subset; returns ``(array (C, nz, ny, nx) float32, spacing, dim)``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read: {exc.strerror or exc}", path=path) from exc
    if len(raw) < HEADER_SIZE:
        raise TruncatedDataError(f"header is {len(raw)} bytes, need {HEADER_SIZE}", path=path,
                                 field="header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
            raise UnsupportedFormatError("big-endian NIfTI is not supported", path=path,
                                         field="sizeof_hdr")
        raise FormatError(f"sizeof_hdr is {sizeof_hdr}, expected {HEADER_SIZE}", path=path,
                          field="sizeof_hdr")
    magic = raw[344:348]
    if magic != MAGIC:
        if magic == b"ni1\x00":
            raise UnsupportedFormatError("two-file NIfTI (.hdr/.img) is not supported", path=path,
                                         field="magic")
        raise UnsupportedFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", path=path,
                                     field="magic")
    dim = list(struct.unpack_from("<8h", raw, 40))
    datatype, bitpix = struct.unpack_from("<hh", raw, 70)
    if datatype != FLOAT32:
        raise UnsupportedDatatypeError(datatype, path=path)
    if bitpix != 32:
        raise FormatError(f"bitpix is {bitpix}, expected 32", path=path, field="bitpix")
    ndim = dim[0]
    if ndim not in (3, 4):
        raise NiftiShapeError(f"dim[0] is {ndim}, expected 3 or 4", path=path, field="dim")
    sizes = dim[1:ndim + 1]
    if any(n < 1 for n in sizes):
        raise NiftiShapeError(f"non-positive dimension in {sizes}", path=path, field="dim")
    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = tuple(float(s) for s in pixdim[1:4])
    if not all(math.isfinite(s) and s > 0 for s in spacing):
        raise FormatError(f"pixdim[1..3] must be positive, got {spacing}", path=path, field="pixdim")
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    if not (math.isfinite(vox_offset) and vox_offset == int(vox_offset) and vox_offset >= VOX_OFFSET):
        raise FormatError(f"vox_offset {vox_offset} invalid", path=path, field="vox_offset")
    offset = int(vox_offset)
    nx, ny, nz = sizes[:3]
    channels = sizes[3] if ndim == 4 else 1
    count = nx * ny * nz * channels
    if len(raw) < offset + 4 * count:
        raise TruncatedDataError(f"data needs {4 * count} bytes at offset {offset}, file has "
                                 f"{max(len(raw) - offset, 0)}", path=path, field="data")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    if not np.all(np.isfinite(data)):
        raise NonFiniteDataError("data contains NaN or infinite values", path=path, field="data")
    data = data.astype(np.float32).reshape(channels, nz, ny, nx)
    return data, spacing, dim


def write_volume(path, v: Volume) -> None:
    nx, ny, nz = v.dims
    dims = [nx, ny, nz] if v.channels == 1 else [nx, ny, nz, v.channels]
    _write_nifti(path, v.data, v.spacing, dims)


def read_volume(path) -> Volume:
    data, spacing, _ = _read_nifti(path)
    return Volume(data, spacing)


def write_field(path, u: DisplacementField, spacing=(1.0, 1.0, 1.0)) -> None:
    nx, ny, nz = u.dims
    _write_nifti(path, u.data, spacing, [nx, ny, nz, 3])


def read_field(path) -> DisplacementField:
    data, _, dim = _read_nifti(path)
    if dim[0] != 4 or dim[4] != 3:
        raise NiftiShapeError(f"displacement field needs dim[0]=4 and dim[4]=3, got "
                              f"dim[0]={dim[0]}, dim[4]={dim[4] if dim[0] == 4 else '-'}",
                              path=path, field="dim")
    return DisplacementField(data)


def read_field_spacing(path) -> tuple[float, float, float]:
    return _read_nifti(path)[1]


# -- landmarks -----------------------------------------------------------------------

def _fmt(v: float) -> str:
    return format(v, ".17g")


def write_landmarks(path, landmarks: LandmarkSet) -> None:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LANDMARK_HEADER)
    for e in landmarks:
        w.writerow([e.id, *(_fmt(v) for v in e.fixed), *(_fmt(v) for v in e.moving)])
    try:
        Path(path).write_text(buf.getvalue(), encoding="utf-8")
    except OSError as exc:
        raise WriteError(f"{path}: cannot write: {exc.strerror or exc}") from exc


def parse_landmarks(text: str, path=None) -> LandmarkSet:
    lines = text.splitlines()
    if not lines or lines[0].strip() != ",".join(LANDMARK_HEADER):
        raise FormatError(f"missing header line {','.join(LANDMARK_HEADER)!r}", path=path, line=1,
                          field="header")
    entries = []
    seen = set()
    try:
        rows = list(csv.reader(lines[1:]))
    except csv.Error as exc:
        raise FormatError(f"malformed CSV: {exc}", path=path) from exc
    for lineno, row in enumerate(rows, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(LANDMARK_HEADER):
            raise FormatError(f"expected {len(LANDMARK_HEADER)} columns, got {len(row)}", path=path,
                              line=lineno, field="columns")
        lid = row[0].strip()
        if not lid:
            raise FormatError("empty landmark id", path=path, line=lineno, field="id")
        if lid in seen:
            raise FormatError(f"duplicate landmark id {lid!r}", path=path, line=lineno, field="id")
        seen.add(lid)
        values = []
        for name, cell in zip(LANDMARK_HEADER[1:], row[1:]):
            try:
                v = float(cell)
            except ValueError:
                raise FormatError(f"cannot parse {name}={cell!r} as a number", path=path, line=lineno,
                                  field=name) from None
            if not math.isfinite(v):
                raise FormatError(f"{name}={cell!r} is not finite", path=path, line=lineno, field=name)
            values.append(v)
        entries.append(Landmark(lid, tuple(values[:3]), tuple(values[3:])))
    return LandmarkSet(tuple(entries))


def read_landmarks(path) -> LandmarkSet:
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read: {exc.strerror or exc}", path=path) from exc
    except UnicodeDecodeError as exc:
        raise FormatError(f"not UTF-8 text: {exc.reason}", path=path) from exc
    return parse_landmarks(text, path)


# -- config and reports ----------------------------------------------------------------

_CONFIG_KEYS = {"metrics", "lambda", "learning_rate", "iterations", "levels", "ncc_window",
                "ncc_epsilon", "adam_beta1", "adam_beta2", "adam_eps"}


def _number(doc: dict, key: str, path, integer: bool = False):
    v = doc[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise FormatError(f"{key} must be a number, got {v!r}", path=path, field=key)
    if integer and int(v) != v:
        raise FormatError(f"{key} must be an integer, got {v!r}", path=path, field=key)
    return int(v) if integer else float(v)


def _metrics(items, path) -> tuple[tuple[str, float], ...]:
    if not isinstance(items, list) or not items:
        raise FormatError("metrics must be a non-empty list", path=path, field="metrics")
    names, weights = [], []
    for i, item in enumerate(items):
        where = f"metrics[{i}]"
        if not isinstance(item, dict) or "name" not in item:
            raise FormatError("each metric needs a 'name'", path=path, field=where)
        extra = set(item) - {"name", "weight"}
        if extra:
            raise FormatError(f"unknown keys {sorted(extra)}", path=path, field=where)
        name = item["name"]
        if not isinstance(name, str) or name.lower() not in METRIC_KINDS:
            raise FormatError(f"unknown metric name {name!r}; expected one of {METRIC_KINDS}",
                              path=path, field=f"{where}.name")
        names.append(name.lower())
        if "weight" in item:
            w = item["weight"]
            if isinstance(w, bool) or not isinstance(w, (int, float)) or not math.isfinite(w):
                raise FormatError(f"weight must be a number, got {w!r}", path=path,
                                  field=f"{where}.weight")
            if w < 0:
                raise FormatError(f"weight must be >= 0, got {w}", path=path, field=f"{where}.weight")
            weights.append(float(w))
        else:
            weights.append(None)
    if all(w is None for w in weights):
        weights = [1.0 / len(names)] * len(names)
    elif any(w is None for w in weights):
        raise FormatError("give a weight for every metric or for none", path=path, field="metrics")
    return tuple(zip(names, weights))


def parse_config(doc, path=None) -> tuple[LossSpec, OptimConfig]:
    """Resolve a config document; omitted keys take the defaults."""
    if not isinstance(doc, dict):
        raise FormatError("config must be a JSON object", path=path)
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise FormatError(f"unknown config keys {sorted(unknown)}", path=path, field=sorted(unknown)[0])
    loss_kw, optim_kw = {}, {}
    if "metrics" in doc:
        loss_kw["metrics"] = _metrics(doc["metrics"], path)
    if "lambda" in doc:
        loss_kw["lam"] = _number(doc, "lambda", path)
    if "ncc_window" in doc:
        loss_kw["ncc_window"] = _number(doc, "ncc_window", path, integer=True)
    if "ncc_epsilon" in doc:
        loss_kw["ncc_epsilon"] = _number(doc, "ncc_epsilon", path)
    for key in ("learning_rate", "adam_beta1", "adam_beta2", "adam_eps"):
        if key in doc:
            optim_kw[key] = _number(doc, key, path)
    for key in ("iterations", "levels"):
        if key in doc:
            optim_kw[key] = _number(doc, key, path, integer=True)
    try:
        return LossSpec(**loss_kw), OptimConfig(**optim_kw)
    except ValidationError as exc:
        raise FormatError(str(exc), path=path) from exc


def read_config(path) -> tuple[LossSpec, OptimConfig]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read: {exc.strerror or exc}", path=path) from exc
    except UnicodeDecodeError as exc:
        raise FormatError(f"not UTF-8 text: {exc.reason}", path=path) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed JSON: {exc.msg}", path=path, line=exc.lineno) from exc
    return parse_config(doc, path)


def config_document(spec: LossSpec, cfg: OptimConfig) -> dict:
    """The fully resolved config in the same schema ``parse_config`` reads."""
    doc = spec.to_dict()
    doc.update(cfg.to_dict())
    return doc


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "to_dict"):
        return _jsonable(obj.to_dict())
    return obj


def dumps_report(doc) -> str:
    return json.dumps(_jsonable(doc), indent=2, allow_nan=False) + "\n"


def write_report(path, doc) -> None:
    """Write a report (a dict or an object with ``to_dict``) as deterministic JSON."""
    text = dumps_report(doc)
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise WriteError(f"{path}: cannot write: {exc.strerror or exc}") from exc
