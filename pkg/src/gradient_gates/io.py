"""Artifact persistence: round-trip JSON and CSV, configuration files, manifests.

Floats are written with ``repr`` (shortest round-trip form), so reading a
file back reproduces every value bit for bit.  Complex arrays are stored as
``{"re": ..., "im": ...}`` objects in JSON and as ``<name>_re``/``<name>_im``
column pairs in CSV.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import platform
from pathlib import Path

import numpy as np
import yaml

from .errors import ValidationError

FORMAT_VERSION = 1


# ----------------------------------------------------------------------------
# JSON


def to_jsonable(obj):
    """Convert numpy scalars/arrays, complex numbers and tuples to JSON types."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        if np.iscomplexobj(obj):
            return {"re": to_jsonable(obj.real), "im": to_jsonable(obj.imag)}
        return to_jsonable(obj.tolist())
    if isinstance(obj, (complex, np.complexfloating)):
        return {"re": float(obj.real), "im": float(obj.imag)}
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isnan(x) or math.isinf(x):
            return repr(x)
        return x
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    return obj


def from_jsonable(obj):
    """Inverse of :func:`to_jsonable` for complex entries and non-finite floats."""
    if isinstance(obj, dict):
        if set(obj) == {"re", "im"}:
            re, im = from_jsonable(obj["re"]), from_jsonable(obj["im"])
            if isinstance(re, list):
                return np.array(re, dtype=float) + 1j * np.array(im, dtype=float)
            return complex(re, im)
        return {k: from_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [from_jsonable(v) for v in obj]
    if obj in ("nan", "inf", "-inf"):
        return float(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(to_jsonable(obj), indent=2, sort_keys=True, allow_nan=False)


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj) + "\n")
    return path


def read_json(path):
    return from_jsonable(json.loads(Path(path).read_text()))


# ----------------------------------------------------------------------------
# CSV series


def write_csv(path, columns: dict) -> Path:
    """Write equal-length named series; complex series become ``_re``/``_im`` pairs."""
    flat = {}
    for name, values in columns.items():
        arr = np.asarray(values)
        if arr.ndim != 1:
            raise ValidationError(f"CSV column {name!r} must be one-dimensional")
        if np.iscomplexobj(arr):
            flat[f"{name}_re"] = arr.real
            flat[f"{name}_im"] = arr.imag
        else:
            flat[name] = arr
    lengths = {len(v) for v in flat.values()}
    if len(lengths) > 1:
        raise ValidationError(f"CSV columns have different lengths {sorted(lengths)}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(flat))
        for row in zip(*flat.values()):
            w.writerow([_cell(v) for v in row])
    return path


def _cell(v):
    if isinstance(v, (np.integer, int)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (np.floating, float)):
        return repr(float(v))
    return str(v)


def read_csv(path) -> dict:
    """Read a CSV written by :func:`write_csv`; ``_re``/``_im`` pairs recombine."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = {}
    for i, name in enumerate(header):
        raw = [r[i] for r in body]
        if raw and all(_is_int(x) for x in raw):
            cols[name] = np.array([int(x) for x in raw], dtype=np.int64)
        elif all(_is_float(x) for x in raw):
            cols[name] = np.array([float(x) for x in raw])
        else:
            cols[name] = np.array(raw, dtype=object)
    out = {}
    for name in header:
        if name.endswith("_re") and name[:-3] + "_im" in cols:
            out[name[:-3]] = cols[name] + 1j * cols[name[:-3] + "_im"]
        elif name.endswith("_im") and name[:-3] + "_re" in cols:
            continue
        else:
            out[name] = cols[name]
    return out


def _is_int(s: str) -> bool:
    # canonical spelling only, so strings such as "0010" stay text
    try:
        return str(int(s)) == s
    except ValueError:
        return False


def _is_float(s: str) -> bool:
    try:
        return repr(float(s)) == s
    except ValueError:
        return False


# ----------------------------------------------------------------------------
# configuration


def load_config(path) -> dict:
    """Read a YAML or JSON configuration file (JSON is valid YAML)."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"configuration file {path} does not exist")
    data = yaml.safe_load(path.read_text())
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValidationError("configuration must be a mapping at top level")
    return data


def merge(defaults: dict, override: dict) -> dict:
    """Recursive dict merge; keys of ``override`` win, unknown keys are kept."""
    out = copy.deepcopy(defaults)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def dump_yaml(data: dict) -> str:
    return yaml.safe_dump(to_jsonable(data), sort_keys=False, default_flow_style=None)


# ----------------------------------------------------------------------------
# hashing and manifests


def canonical_hash(obj) -> str:
    return hashlib.sha256(json.dumps(to_jsonable(obj), sort_keys=True,
                                     separators=(",", ":")).encode()).hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


DETERMINISM_CAVEATS = [
    "BLAS/LAPACK reductions may reorder floating-point sums across thread counts or "
    "library builds; numerical outputs are bit-identical only for the same build and "
    "--threads value",
    "parallel multistarts (workers > 1) evaluate every start; sequential runs stop at "
    "the first converged start, so the selected start can differ between the two",
    "adaptive ODE step control depends on machine floating-point behaviour",
]


def software_versions() -> dict:
    import scipy

    from . import __version__

    return {"python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "yaml": yaml.__version__,
            "gradient_gates": __version__, "platform": platform.platform()}


def build_manifest(task: str, config: dict, seed, outputs: list, wall_time: float,
                   status: str, threads=None, extra=None) -> dict:
    """Manifest with input hash, seed, versions, wall time and output hashes."""
    files = {Path(p).name: file_hash(p) for p in outputs}
    numerical = {k: v for k, v in files.items() if k.endswith((".csv", ".json"))}
    return {
        "format_version": FORMAT_VERSION,
        "task": task,
        "seed": seed,
        "threads": threads,
        "inputs_hash": canonical_hash({"task": task, "config": config, "seed": seed}),
        "outputs": files,
        "outputs_hash": canonical_hash(numerical),
        "versions": software_versions(),
        "wall_time_s": wall_time,
        "status": status,
        "determinism_caveats": DETERMINISM_CAVEATS,
        **(extra or {}),
    }
