"""File formats.

Tables are stored as sparse CSV triples ``row,col,value`` next to a JSON
envelope (same stem, ``.json``) carrying the metadata.  Floats are written
with ``repr`` so a round trip is exact and reruns produce identical bytes.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .detector import DetectorModel, PovmMatrix
from .errors import DomainError, FileFormatError
from .moments import IntensityMomentSet
from .states import PHOTOCOUNT, PHOTON, JointHistogram, JointPhotonDistribution

FORMAT_VERSION = 1


def fmt(value) -> str:
    """Shortest exact text form of a number; NaN and infinities spelled out."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(value)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        # JSON has no NaN/inf; keep them readable as strings
        return value if math.isfinite(value) else fmt(value)
    return obj


def write_json(path, data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_jsonable(data), indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n")
    return path


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: malformed JSON ({exc})") from exc


def write_rows(path, header, rows) -> Path:
    """Plain CSV with a header line; numbers formatted by :func:`fmt`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    return path


def envelope_path(path) -> Path:
    return Path(path).with_suffix(".json")


def _write_triples(path, table, header):
    rows, cols = np.nonzero(table)
    return write_rows(path, header, zip(rows, cols, table[rows, cols]))


def _read_triples(path):
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        data = [row for row in reader if row]
    if header is None or len(header) != 3:
        raise FileFormatError(f"{path}: expected a header with three columns")
    try:
        idx = np.array([[int(r[0]), int(r[1])] for r in data], dtype=np.int64).reshape(-1, 2)
        vals = np.array([float(r[2]) for r in data])
    except (ValueError, IndexError) as exc:
        raise FileFormatError(f"{path}: malformed row ({exc})") from exc
    if idx.size and idx.min() < 0:
        raise FileFormatError(f"{path}: negative index")
    return header, idx, vals


def _dense(idx, vals, shape=None):
    if shape is None:
        shape = (int(idx[:, 0].max()) + 1, int(idx[:, 1].max()) + 1) if idx.size else (1, 1)
    if idx.size and (idx[:, 0].max() >= shape[0] or idx[:, 1].max() >= shape[1]):
        raise FileFormatError(f"indices exceed the declared shape {tuple(shape)}")
    table = np.zeros(shape)
    np.add.at(table, (idx[:, 0], idx[:, 1]), vals)
    return table


def _axis_names(labels):
    return ("n_s", "n_i") if labels == PHOTON else ("c_s", "c_i")


def save_distribution(path, dist: JointPhotonDistribution) -> Path:
    a, b = _axis_names(dist.axis_labels)
    path = _write_triples(path, dist.table, [a, b, "probability"])
    write_json(envelope_path(path), {
        "kind": "distribution", "format": FORMAT_VERSION, "shape": list(dist.shape),
        "axis_labels": dist.axis_labels, "tail_mass": dist.tail_mass,
        "metadata": dist.metadata,
    })
    return path


def save_histogram(path, hist: JointHistogram) -> Path:
    path = _write_triples(path, hist.counts, ["c_s", "c_i", "frames"])
    write_json(envelope_path(path), {
        "kind": "histogram", "format": FORMAT_VERSION, "shape": list(hist.shape),
        "frames": hist.frames, "metadata": hist.metadata,
    })
    return path


def _envelope(path):
    env = envelope_path(path)
    return read_json(env) if env.exists() else {}


def load_table(path):
    """Read a distribution or histogram CSV.

    The third header column decides the type: ``frames`` gives a
    :class:`JointHistogram`, anything else a :class:`JointPhotonDistribution`.
    A histogram whose counts sum to zero is rejected.
    """
    header, idx, vals = _read_triples(path)
    env = _envelope(path)
    shape = tuple(env["shape"]) if "shape" in env else None
    if header[2] == "frames":
        if np.any(vals != np.round(vals)):
            raise FileFormatError(f"{path}: counts must be integers")
        counts = _dense(idx, vals, shape).astype(np.int64)
        if counts.sum() == 0:
            raise DomainError(f"{path}: histogram holds zero frames")
        return JointHistogram(counts, int(counts.sum()), env.get("metadata", {}))
    labels = env.get("axis_labels", PHOTOCOUNT if header[0].startswith("c") else PHOTON)
    return JointPhotonDistribution(_dense(idx, vals, shape), float(env.get("tail_mass", 0.0)),
                                   labels, env.get("metadata", {}))


def load_histogram(path) -> JointHistogram:
    table = load_table(path)
    if not isinstance(table, JointHistogram):
        raise DomainError(f"{path}: not a histogram (third column must be 'frames')")
    return table


def save_povm(path, povm: PovmMatrix) -> Path:
    path = _write_triples(path, povm.entries, ["c", "n", "probability"])
    write_json(envelope_path(path), {
        "kind": "povm", "format": FORMAT_VERSION, "shape": list(povm.entries.shape),
        "model": povm.model.to_dict() if povm.model is not None else None,
        "captured": povm.captured, "uncaptured": povm.uncaptured,
        "clamped": povm.clamped, "metadata": povm.metadata,
    })
    return path


def load_povm(path) -> PovmMatrix:
    _, idx, vals = _read_triples(path)
    env = _envelope(path)
    if not env:
        return PovmMatrix.from_entries(_dense(idx, vals))
    entries = _dense(idx, vals, tuple(env["shape"]))
    model = DetectorModel(**env["model"]) if env.get("model") else None
    return PovmMatrix(entries, model, env["captured"], env["uncaptured"],
                      int(env.get("clamped", 0)), env.get("metadata", {}))


def save_moments(path, m: IntensityMomentSet) -> Path:
    return write_json(path, {"kind": "moments", "format": FORMAT_VERSION, **m.to_dict()})


def load_moments(path) -> IntensityMomentSet:
    return IntensityMomentSet.from_json_dict(read_json(path))
