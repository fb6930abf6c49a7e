"""Artifact writers: deterministic CSV/JSON and the KFPF field snapshot format.

Floats are written with ``repr`` so identical runs give identical bytes.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .fields import Domain, PhaseField

PF_MAGIC = b"KFPF"
PF_VERSION = 1
_PF_HEADER = struct.Struct("<4sIIIIddddd")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        if math.isnan(x):
            return "nan"
        return x
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n")


def _cell(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return str(int(x))
    return x


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(x) for x in row])
    return buf.getvalue()


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    Path(path).write_text(csv_text(header, rows))


def field_to_bytes(f: PhaseField) -> bytes:
    dom = f.domain
    head = _PF_HEADER.pack(PF_MAGIC, PF_VERSION, dom.d, dom.n_x, dom.n_v, dom.L, dom.v_max,
                           dom.dx, dom.dv, float(f.t))
    return head + np.ascontiguousarray(f.values, dtype="<f8").tobytes()


def field_from_bytes(data: bytes) -> PhaseField:
    if len(data) < _PF_HEADER.size:
        raise ValueError("truncated field header")
    magic, version, d, n_x, n_v, L, v_max, dx, dv, t = _PF_HEADER.unpack_from(data)
    if magic != PF_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != PF_VERSION:
        raise ValueError(f"unsupported field format version {version}")
    dom = Domain(d, L, n_x, v_max, n_v)
    count = int(np.prod(dom.shape))
    vals = np.frombuffer(data, dtype="<f8", count=count, offset=_PF_HEADER.size)
    return PhaseField(dom, vals.reshape(dom.shape).astype(float), t)


def save_field(f: PhaseField, path) -> None:
    Path(path).write_bytes(field_to_bytes(f))


def load_field(path) -> PhaseField:
    return field_from_bytes(Path(path).read_bytes())


def field_slice_rows(f: PhaseField, axis: int = 0) -> list:
    """(x_axis, v_axis, value) rows of the (x_axis, v_axis) plane through the
    grid centre in all other directions."""
    dom = f.domain
    d = dom.d
    idx = [dom.n_x // 2] * d + [dom.n_v // 2] * d
    idx[axis] = slice(None)
    idx[d + axis] = slice(None)
    plane = f.values[tuple(idx)]
    rows = []
    for i, x in enumerate(dom.x_nodes):
        for j, v in enumerate(dom.v_nodes):
            rows.append((float(x), float(v), float(plane[i, j])))
    return rows
