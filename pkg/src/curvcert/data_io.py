"""IDX datasets, JSON model manifests and csv / json-lines result tables."""

from __future__ import annotations

import csv
import dataclasses
import gzip
import io
import json
import math
import os
import struct
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .activation import ActivationKind
from .network import DenseLayer, Mlp

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
MODEL_FORMAT = "curvcert-mlp"
MODEL_VERSION = 1
PIXEL_SCALE = "x/255"


class DataError(Exception):
    """Base class for malformed input files."""


class IdxFormatError(DataError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class ModelFormatError(DataError):
    pass


class UnknownActivationError(ModelFormatError):
    pass


class ChainMismatchError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Images as rows of a (n, D) float array in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int = 10

    def __post_init__(self):
        X = np.asarray(self.images, dtype=np.float64)
        y = np.asarray(self.labels).astype(np.int64).reshape(-1)
        if X.ndim != 2:
            X = X.reshape(len(y), -1) if X.size else np.zeros((len(y), 0))
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} images but {y.shape[0]} labels")
        if X.size and (X.min() < 0.0 or X.max() > 1.0):
            raise ValueError("pixels must lie in [0, 1]")
        if y.size and (y.min() < 0 or y.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        object.__setattr__(self, "images", X)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_count)


# ---------------------------------------------------------------- IDX

def _read_bytes(path) -> bytes:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise TruncatedError(f"{path}: corrupt gzip stream ({exc})") from None
    return raw


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedError(f"{path}: file too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedError(f"{path}: header declares {ndim} dimensions but file ends early")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < need:
        raise TruncatedError(f"{path}: expected {need} payload bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_idx(images_path, labels_path, class_count: int = 10) -> Dataset:
    """Read an IDX image/label pair (optionally gzip-compressed).

    Pixels are scaled by 1/255; each image is flattened to a row.
    """
    imgs = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, images_path)
    labs = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, labels_path)
    if imgs.shape[0] != labs.shape[0]:
        raise CountMismatchError(
            f"{images_path} has {imgs.shape[0]} images but {labels_path} has {labs.shape[0]} labels"
        )
    if labs.size and labs.max() >= class_count:
        raise IdxFormatError(f"{labels_path}: label {labs.max()} outside [0, {class_count})")
    X = imgs.reshape(imgs.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(X, labs.astype(np.int64), class_count)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path, rows: int = 28):
    """Write uint8 images (n, rows*cols) and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n = images.shape[0]
    cols = images.shape[1] // rows if images.ndim == 2 else images.shape[2]
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, n))
        fh.write(labels.tobytes())


# ---------------------------------------------------------------- models

def model_to_dict(net: Mlp) -> dict:
    # float -> Python float keeps json's shortest round-trip repr
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "activation": net.activation.value,
        "widths": net.widths,
        "pixel_scale": PIXEL_SCALE,
        "metadata": net.metadata,
        "layers": [
            {"W": l.W.tolist(), "b": l.b.tolist()} for l in net.layers
        ],
    }


def model_from_dict(doc: Mapping) -> Mlp:
    if doc.get("format") != MODEL_FORMAT:
        raise ModelFormatError(f"not a model manifest (format={doc.get('format')!r})")
    if doc.get("version") != MODEL_VERSION:
        raise VersionMismatchError(f"model version {doc.get('version')!r}, expected {MODEL_VERSION}")
    try:
        kind = ActivationKind.parse(doc["activation"])
    except ValueError as exc:
        raise UnknownActivationError(str(exc)) from None
    widths = list(doc["widths"])
    layers = doc["layers"]
    if len(widths) != len(layers) + 1:
        raise ChainMismatchError(f"{len(layers)} layers but {len(widths)} widths")
    built = []
    for I, entry in enumerate(layers):
        W = np.asarray(entry["W"], dtype=np.float64)
        b = np.asarray(entry["b"], dtype=np.float64)
        if W.ndim != 2 or W.shape != (widths[I + 1], widths[I]) or b.shape != (widths[I + 1],):
            raise ChainMismatchError(
                f"layer {I + 1}: W {W.shape}, b {b.shape} do not match widths "
                f"{widths[I]} -> {widths[I + 1]}"
            )
        built.append(DenseLayer(W, b))
    try:
        return Mlp(tuple(built), kind, dict(doc.get("metadata", {})))
    except ValueError as exc:
        raise ChainMismatchError(str(exc)) from None


def save_model(net: Mlp, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(net), fh, allow_nan=False)
        fh.write("\n")


def load_model(path) -> Mlp:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"{path}: not valid JSON ({exc})") from None
    return model_from_dict(doc)


# ---------------------------------------------------------------- reports

CERT_FIELDS = ("input_id", "y", "t", "radius", "eta", "margin_at_x", "flag", "wall_time")


def fmt_value(v) -> str:
    """Six significant digits for floats; integers and strings as-is."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.6g}"
    return str(v)


def _json_value(v):
    if v is None or isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        # json has no nan/inf; keep the 6-digit text so parse-back is uniform
        return float(f"{v:.6g}") if math.isfinite(v) else fmt_value(v)
    return str(v)


def _as_rows(report) -> tuple[list, list]:
    if dataclasses.is_dataclass(report) and not isinstance(report, type):
        d = dataclasses.asdict(report)
        return list(d.keys()), [d]
    if isinstance(report, Mapping):
        return list(report.keys()), [dict(report)]
    rows = [dataclasses.asdict(r) if dataclasses.is_dataclass(r) else dict(r) for r in report]
    return (list(rows[0].keys()) if rows else list(CERT_FIELDS)), rows


def write_report(report, path, format: str = "csv", fields: Sequence[str] | None = None,
                 header: Mapping | None = None) -> None:
    """Write an EvalReport-like object or a list of records.

    ``header`` (the run configuration) goes into ``#`` comment lines for csv
    and a leading ``{"meta": ...}`` line for json-lines.
    """
    if format not in ("csv", "jsonl"):
        raise ValueError(f"unknown report format {format!r}")
    keys, rows = _as_rows(report)
    if fields is not None:
        keys = list(fields)
    buf = io.StringIO()
    if format == "csv":
        for k, v in (header or {}).items():
            buf.write(f"# {k}: {v}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([fmt_value(r.get(k)) for k in keys])
    else:
        if header:
            buf.write(json.dumps({"meta": {k: _json_value(v) for k, v in header.items()}}) + "\n")
        for r in rows:
            buf.write(json.dumps({k: _json_value(r.get(k)) for k in keys}) + "\n")
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(buf.getvalue())
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc.strerror or exc}") from exc


def read_report(path) -> list[dict]:
    """Parse a report written by :func:`write_report` back into string/number dicts."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if str(path).endswith(".jsonl") or text.lstrip().startswith("{"):
        out = []
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if "meta" in rec and len(rec) == 1:
                continue
            out.append(rec)
        return out
    lines = [l for l in text.splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


def append_jsonl(path, record: Mapping) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps({k: _json_value(v) for k, v in record.items()}) + "\n")
