"""File formats: reports as JSON, datasets as per-record CSV plus a manifest.

Floats are always written with 17 significant digits, which round-trips
every IEEE-754 double exactly.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .domain import PerturbationSequence, TrajectoryRecord, group_dataset

FLOAT_FMT = ".17g"


def fmt_float(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    s = format(x, FLOAT_FMT)
    # keep JSON readers from turning integral floats into ints
    if "." not in s and "e" not in s and "n" not in s:
        s += ".0"
    return s


def _plain(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, tuple):
        return list(obj)
    return obj


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """Deterministic JSON with 17-significant-digit floats and sorted-as-given keys."""
    obj = _plain(obj)
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return fmt_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k), ensure_ascii=False)}: {dumps(v, indent, _level + 1)}"
                 for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        if all(isinstance(_plain(v), (int, float, bool)) or _plain(v) is None for v in obj):
            return "[" + ", ".join(dumps(v, indent, _level + 1) for v in obj) + "]"
        items = [pad + dumps(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj) + "\n", encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ------------------------------------------------------------------ datasets


def write_record_csv(path, record: TrajectoryRecord) -> None:
    U, Y = record.inputs.values, record.outputs
    m = U.shape[1]
    p = record.output_dim
    T = record.horizon
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"u_{j}" for j in range(m)] + [f"y_{j}" for j in range(p)])
        for t in range(T + 1):
            u = [fmt_float(v) for v in U[t]] if t < T else [""] * m
            if record.is_discrete:
                y = [str(int(Y[t]))]
            else:
                y = [fmt_float(v) for v in Y[t]]
            w.writerow([t] + u + y)


def read_record_csv(path, discrete: bool, policy_id: str = "", seed: int = 0,
                    sequence_seed: int = 0, truth_tag=None) -> TrajectoryRecord:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    m = sum(1 for h in header if h.startswith("u_"))
    T = len(body) - 1
    U = np.array([[float(v) for v in r[1:1 + m]] for r in body[:T]]).reshape(T, m)
    if discrete:
        Y = np.array([int(r[1 + m]) for r in body], dtype=np.int64)
    else:
        Y = np.array([[float(v) for v in r[1 + m:]] for r in body])
    seq = PerturbationSequence(U, policy_id=policy_id, seed=sequence_seed)
    return TrajectoryRecord(inputs=seq, outputs=Y, truth_tag=truth_tag, seed=seed)


def write_dataset(directory, data) -> Path:
    """Write ``record_XXXX.csv`` files and ``manifest.json`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, rec in enumerate(data.records):
        name = f"record_{i:05d}.csv"
        write_record_csv(d / name, rec)
        entries.append({
            "file": name,
            "policy_id": rec.inputs.policy_id,
            "seed": int(rec.seed),
            "sequence_seed": int(rec.inputs.seed),
            "truth_tag": rec.truth_tag,
            "horizon": rec.horizon,
        })
    manifest = {
        "input_dim": data.input_dim if len(data) else 0,
        "output_dim": data.output_dim if len(data) else 0,
        "output_kind": "discrete" if data.is_discrete else "continuous",
        "n_records": len(data),
        "groups": [list(g) for g in data.groups],
        "records": entries,
    }
    write_json(d / "manifest.json", manifest)
    return d / "manifest.json"


def read_dataset(directory):
    d = Path(directory)
    manifest = read_json(d / "manifest.json")
    discrete = manifest["output_kind"] == "discrete"
    recs = [
        read_record_csv(d / e["file"], discrete, e["policy_id"], e["seed"], e["sequence_seed"],
                        e.get("truth_tag"))
        for e in manifest["records"]
    ]
    return group_dataset(recs)
