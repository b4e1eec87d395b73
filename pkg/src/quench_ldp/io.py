"""Deterministic artifact I/O: CSV tables, binary dumps, JSON reports.

All floats are emitted with 17 significant digits so every artifact
round-trips bit-exactly; JSON objects are written with sorted keys and no
timestamps, which makes reruns byte-identical.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np


def fmt_float(x) -> str:
    return format(float(x), ".17g")


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return fmt_float(v)
    return str(v)


def write_csv(path, header, rows) -> None:
    path = Path(path)
    lines = [",".join(header)]
    lines += [",".join(_cell(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def write_json(path, obj) -> None:
    Path(path).write_text(canonical_json(obj) + "\n")


def canonical_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def dump_array(path_base, array: np.ndarray) -> None:
    """Raw little-endian float64 dump (C order) with a JSON shape sidecar."""
    base = Path(path_base)
    data = np.ascontiguousarray(array, dtype="<f8")
    bin_path = base.with_suffix(".bin")
    bin_path.write_bytes(data.tobytes())
    write_json(
        base.with_suffix(".json"),
        {
            "file": bin_path.name,
            "dtype": "float64",
            "byteorder": "little",
            "order": "C",
            "shape": list(array.shape),
        },
    )


def load_array(sidecar_path) -> np.ndarray:
    side = json.loads(Path(sidecar_path).read_text())
    raw = (Path(sidecar_path).parent / side["file"]).read_bytes()
    return np.frombuffer(raw, dtype="<f8").reshape(side["shape"]).copy()


def write_path_csv(path, sample, replica: int = 0) -> None:
    """Dump one replica of a stored trajectory as (t, X..., Y...) columns."""
    X = sample.X[replica]
    Y = sample.Y[replica] if sample.Y is not None else None
    m = X.shape[1]
    header = ["t"] + [f"x{i}" for i in range(m)]
    if Y is not None:
        header += [f"y{i}" for i in range(Y.shape[1])]
    rows = []
    for k, t in enumerate(sample.times):
        row = [t] + list(X[k])
        if Y is not None:
            row += list(Y[k])
        rows.append(row)
    write_csv(path, header, rows)
