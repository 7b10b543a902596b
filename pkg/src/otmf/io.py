"""Deterministic on-disk formats for checkpoints, datasets, and reports.

Checkpoints are a self-describing container: a UTF-8 text header carrying
the format version, the model spec, and the full shape signature, followed
by the raw little-endian float64 payload of every declared array in order.
Datasets and feature clouds are delimited numeric matrices with a one-line
header. Reports are sorted-key JSON. Every writer is byte-deterministic:
identical inputs produce identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeMismatchError
from .models import Batch, ModelSpec, ToyModel
from .params import ParamVector

_CKPT_MAGIC = "otmf-checkpoint"
_CKPT_VERSION = 1
_FLOAT_FMT = "%.17g"  # shortest round-trip decimal for float64


# ---------------------------------------------------------------------------
# checkpoints


def _header_lines(model: ToyModel) -> list[str]:
    lines = [
        f"{_CKPT_MAGIC} v{_CKPT_VERSION}",
        "layer_dims " + " ".join(str(d) for d in model.spec.layer_dims),
        f"activation {model.spec.activation}",
    ]
    for name, shape in model.backbone.signature():
        lines.append("array backbone/" + name + " " + " ".join(str(s) for s in shape))
    for task in sorted(model.heads):
        for name, shape in model.heads[task].signature():
            lines.append(
                f"array head/{task}/{name} " + " ".join(str(s) for s in shape)
            )
    lines.append("data")
    return lines


def save_checkpoint(path: str | Path, model: ToyModel) -> None:
    path = Path(path)
    payload = bytearray()
    for _, arr in model.backbone.entries.items():
        payload += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    for task in sorted(model.heads):
        for _, arr in model.heads[task].entries.items():
            payload += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    header = "\n".join(_header_lines(model)) + "\n"
    path.write_bytes(header.encode("utf-8") + bytes(payload))


def load_checkpoint(path: str | Path) -> ToyModel:
    raw = Path(path).read_bytes()
    sep = raw.find(b"\ndata\n")
    if not raw.startswith(_CKPT_MAGIC.encode()) or sep < 0:
        raise DataError(f"{path}: not a checkpoint file")
    header = raw[: sep + 5].decode("utf-8").splitlines()
    payload = raw[sep + 6 :]

    version = header[0].split()[-1]
    if version != f"v{_CKPT_VERSION}":
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    layer_dims = tuple(int(t) for t in header[1].split()[1:])
    activation = header[2].split()[1]
    spec = ModelSpec(layer_dims=layer_dims, activation=activation)

    arrays: list[tuple[str, tuple[int, ...]]] = []
    for line in header[3:]:
        if line == "data":
            break
        _, name, *dims = line.split()
        arrays.append((name, tuple(int(d) for d in dims)))

    expected = sum(int(np.prod(s)) for _, s in arrays) * 8
    if len(payload) != expected:
        raise DataError(
            f"{path}: payload has {len(payload)} bytes, header declares {expected}"
        )

    backbone: dict[str, np.ndarray] = {}
    heads: dict[str, dict[str, np.ndarray]] = {}
    ofs = 0
    for name, shape in arrays:
        size = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=ofs).reshape(shape)
        ofs += size * 8
        kind, rest = name.split("/", 1)
        if kind == "backbone":
            backbone[rest] = arr
        elif kind == "head":
            task, pname = rest.split("/", 1)
            heads.setdefault(task, {})[pname] = arr
        else:
            raise DataError(f"{path}: unknown array group '{kind}'")
    if not backbone:
        raise DataError(f"{path}: checkpoint declares no backbone arrays")
    return ToyModel(
        spec=spec,
        backbone=ParamVector(backbone),
        heads={t: ParamVector(e) for t, e in heads.items()},
    )


# ---------------------------------------------------------------------------
# delimited numeric matrices


def save_matrix(path: str | Path, matrix: np.ndarray, columns: list[str]) -> None:
    """Comma-delimited numeric matrix with a one-line column header."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatchError(f"matrix must be 2-D, got shape {m.shape}")
    if len(columns) != m.shape[1]:
        raise ShapeMismatchError(
            f"{len(columns)} column names for {m.shape[1]} columns"
        )
    lines = [",".join(columns)]
    for row in m:
        lines.append(",".join(_FLOAT_FMT % v for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_matrix(path: str | Path) -> tuple[np.ndarray, list[str]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataError(f"{path}: empty matrix file")
    columns = lines[0].split(",")
    if len(lines) == 1:
        return np.empty((0, len(columns))), columns
    rows = [[float(v) for v in line.split(",")] for line in lines[1:] if line]
    m = np.array(rows, dtype=np.float64)
    if m.shape[1] != len(columns):
        raise DataError(f"{path}: row width does not match header")
    return m, columns


def save_batch(path: str | Path, batch: Batch) -> None:
    """Labeled batch as one matrix: feature columns then an integer label."""
    d = batch.inputs.shape[1]
    matrix = np.column_stack([batch.inputs, batch.labels.astype(np.float64)])
    save_matrix(path, matrix, [f"x{i}" for i in range(d)] + ["label"])


def load_batch(path: str | Path) -> Batch:
    m, columns = load_matrix(path)
    if not columns or columns[-1] != "label":
        raise DataError(f"{path}: expected a trailing 'label' column")
    return Batch(m[:, :-1], m[:, -1].astype(np.int64))


def save_features(path: str | Path, features: np.ndarray, source: str) -> None:
    """Feature cloud dump: one row per sample, dims plus a source-model tag."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise ShapeMismatchError(f"features must be 2-D, got shape {f.shape}")
    header = ",".join([f"f{i}" for i in range(f.shape[1])] + ["source"])
    lines = [header]
    for row in f:
        lines.append(",".join(_FLOAT_FMT % v for v in row) + "," + source)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# reports


def save_report(path: str | Path, report: dict) -> None:
    """Structured key-value report; sorted keys keep the bytes reproducible."""
    text = json.dumps(report, indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
