"""Result files: header block, snapshot CSV, final-measure JSON and binary dump.

Every file starts with a JSON header carrying the config hash, the seed and a
version string. CSV files put it on a leading ``# `` comment line; JSON files
under a top-level ``"header"`` key; the binary dump in its own length-prefixed
block.

Binary particle dump layout (all little-endian)::

    8 bytes   magic  b"QSDSAPD1"
    u32       length L of the JSON header
    L bytes   UTF-8 JSON header (adds "dim" and "count")
    count records of (dim + 1) f64: x_1..x_dim, probability
"""

from __future__ import annotations

import csv
import functools
import hashlib
import json
import math
import struct
import subprocess
from pathlib import Path

import numpy as np

from . import __version__

__all__ = [
    "MAGIC",
    "version_string",
    "config_hash",
    "make_header",
    "write_json",
    "read_json",
    "write_snapshots_csv",
    "final_measure_payload",
    "write_particle_dump",
    "read_particle_dump",
]

MAGIC = b"QSDSAPD1"


@functools.lru_cache(maxsize=1)
def version_string() -> str:
    """``qsdsa-<version>`` plus ``git describe`` output when run from a checkout."""
    base = f"qsdsa-{__version__}"
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
            check=True,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        return base
    return f"{base}+g{out}" if out else base


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return "sha256:" + hashlib.sha256(_canonical(config).encode()).hexdigest()


def make_header(config: dict, seed, **extra) -> dict:
    head = {"config_hash": config_hash(config), "seed": seed, "version": version_string()}
    head.update(extra)
    return head


def _jsonable(v):
    """numpy scalars/arrays to builtins; non-finite floats to ``None``."""
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def write_json(path, body: dict, header: dict) -> None:
    doc = {"header": header, **body}
    with open(path, "w") as fh:
        json.dump(_jsonable(doc), fh, indent=2, allow_nan=False)
        fh.write("\n")


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def header_line(header: dict) -> str:
    return _canonical(header)


def write_snapshots_csv(path, snapshots, header: dict) -> None:
    """Columns ``n, gamma, kills_cum, mean, var, lyapunov, hist_0..hist_{B-1}``."""
    bins = len(snapshots[0].histogram) if snapshots else 0
    with open(path, "w", newline="") as fh:
        fh.write(f"# {header_line(header)}\n")
        w = csv.writer(fh)
        w.writerow(["n", "gamma", "kills_cum", "mean", "var", "lyapunov", *(f"hist_{k}" for k in range(bins))])
        for s in snapshots:
            w.writerow(s.row())


def final_measure_payload(measure) -> dict:
    """States and normalized weights of a finite or particle occupation measure."""
    probs = measure.probabilities()
    if hasattr(measure, "states"):
        return {"kind": "particles", "dim": measure.dim, "states": measure.states, "weights": probs}
    return {"kind": "finite", "dim": 1, "states": list(range(measure.m)), "weights": probs}


def write_particle_dump(path, measure, header: dict) -> None:
    if hasattr(measure, "states"):
        states = np.asarray(measure.states, dtype="<f8").reshape(len(measure), -1)
    else:
        states = np.arange(measure.m, dtype="<f8").reshape(-1, 1)
    probs = np.asarray(measure.probabilities(), dtype="<f8").reshape(-1, 1)
    rec = np.hstack([states, probs]).astype("<f8")
    head = dict(header, dim=int(states.shape[1]), count=int(rec.shape[0]))
    blob = header_line(head).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(rec.tobytes())


def read_particle_dump(path):
    """Returns ``(header, states, probabilities)``; states are ``(count, dim)``."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a particle dump (bad magic)")
    (n,) = struct.unpack_from("<I", data, 8)
    head = json.loads(data[12:12 + n])
    rec = np.frombuffer(data, dtype="<f8", offset=12 + n)
    rec = rec.reshape(head["count"], head["dim"] + 1)
    return head, rec[:, :-1], rec[:, -1]
