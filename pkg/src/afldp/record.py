"""Per-iteration run trajectories and their CSV/JSON serialization."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

COLUMNS = ("t", "stage", "gamma", "sensitivity", "grad_norm", "loss", "accuracy",
           "edge_id", "staleness")
_INT_COLUMNS = {"t", "stage", "edge_id", "staleness"}
# metadata that legitimately differs between replays of one trajectory
VOLATILE_KEYS = ("mode", "config", "config_hash", "delay", "wall_time_s", "arrival_trace",
                 "net")


class RowBuffer:
    def __init__(self, capacity: int):
        self.n = 0
        self.cols = {c: np.empty(capacity, dtype=np.int64 if c in _INT_COLUMNS else np.float64)
                     for c in COLUMNS}

    def append(self, *values):
        i = self.n
        for c, v in zip(COLUMNS, values):
            self.cols[c][i] = v
        self.n += 1

    def arrays(self):
        return {c: a[:self.n].copy() for c, a in self.cols.items()}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


@dataclass(eq=False)
class RunRecord:
    t: np.ndarray
    stage: np.ndarray
    gamma: np.ndarray
    sensitivity: np.ndarray
    grad_norm: np.ndarray
    loss: np.ndarray
    accuracy: np.ndarray
    edge: np.ndarray
    staleness: np.ndarray
    final_x: np.ndarray
    x_ave: np.ndarray
    metadata: dict

    @classmethod
    def from_rows(cls, rows: RowBuffer, final_x, x_ave, metadata):
        a = rows.arrays()
        return cls(a["t"], a["stage"], a["gamma"], a["sensitivity"], a["grad_norm"], a["loss"],
                   a["accuracy"], a["edge_id"], a["staleness"], np.asarray(final_x),
                   np.asarray(x_ave), metadata)

    def __len__(self):
        return len(self.t)

    @property
    def results(self) -> dict:
        return self.metadata.get("results", {})

    def column(self, name):
        return getattr(self, "edge" if name == "edge_id" else name)

    def fingerprint(self) -> str:
        """Digest of the trajectory, final model and non-volatile metadata."""
        h = hashlib.sha256()
        for c in COLUMNS:
            h.update(np.ascontiguousarray(self.column(c)).tobytes())
        h.update(np.ascontiguousarray(self.final_x).tobytes())
        h.update(np.ascontiguousarray(self.x_ave).tobytes())
        stable = {k: v for k, v in self.metadata.items() if k not in VOLATILE_KEYS}
        h.update(json.dumps(_jsonable(stable), sort_keys=True).encode())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, RunRecord):
            return NotImplemented
        return self.fingerprint() == other.fingerprint()

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        meta = dict(self.metadata)
        meta["final_x"] = self.final_x.tolist()
        meta["x_ave"] = self.x_ave.tolist()
        buf.write("# " + json.dumps(_jsonable(meta), sort_keys=True) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        cols = [self.column(c) for c in COLUMNS]
        for i in range(len(self)):
            row = []
            for c, col in zip(COLUMNS, cols):
                v = col[i]
                if c in _INT_COLUMNS:
                    row.append(int(v))
                else:
                    row.append("" if math.isnan(v) else repr(float(v)))
            w.writerow(row)
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source) -> "RunRecord":
        text = Path(source).read_text() if not isinstance(source, str) or "\n" not in source else source
        first, rest = text.split("\n", 1)
        if not first.startswith("# "):
            raise ValueError("missing JSON metadata header")
        meta = json.loads(first[2:])
        final_x = np.array(meta.pop("final_x"), dtype=float)
        x_ave = np.array(meta.pop("x_ave"), dtype=float)
        reader = csv.reader(io.StringIO(rest))
        header = next(reader)
        if tuple(header) != COLUMNS:
            raise ValueError(f"unexpected columns {header}")
        rows = list(reader)
        buf = RowBuffer(len(rows))
        for r in rows:
            buf.append(*[int(v) if c in _INT_COLUMNS else (float(v) if v else math.nan)
                         for c, v in zip(COLUMNS, r)])
        return cls.from_rows(buf, final_x, x_ave, meta)

    def write_json(self, path):
        meta = _jsonable(self.metadata)
        Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
