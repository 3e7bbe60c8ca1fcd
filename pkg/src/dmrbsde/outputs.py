"""Bit-stable CSV tables and the JSON run summary."""

import json
import math
import os

import numpy as np

from dmrbsde.errors import ConfigError, InvariantViolation

FLOAT_FMT = "%.17g"


def _clean(obj):
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def write_csv(path, columns, data):
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[None, :]
    if data.shape[1] != len(columns):
        raise ValueError(f"{len(columns)} columns declared, data has {data.shape[1]}")
    np.savetxt(path, data, fmt=FLOAT_FMT, delimiter=",", header=",".join(columns), comments="")


def read_csv(path, expected_columns=None):
    """Read a table written by :func:`write_csv`; malformed files raise :class:`InvariantViolation`."""
    try:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise InvariantViolation(f"cannot read table {path}: {exc}") from exc
    if expected_columns is not None and tuple(header) != tuple(expected_columns):
        raise InvariantViolation(f"{path}: columns {header} differ from expected {list(expected_columns)}")
    if data.shape[1] != len(header) or not np.all(np.isfinite(data)):
        raise InvariantViolation(f"{path}: malformed or non-finite entries")
    return {name: data[:, j] for j, name in enumerate(header)}


def write_outputs(results, out_dir, formats=("csv", "json")):
    """Write ``results = {"tables": {name: (columns, data)}, "summary": dict}`` under ``out_dir``.

    Returns the written paths in a fixed order.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
        probe = os.path.join(out_dir, ".write-probe")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise ConfigError(f"output directory {out_dir!r} is not writable: {exc.strerror}") from exc
    paths = []
    if "csv" in formats:
        for name in sorted(results.get("tables", {})):
            columns, data = results["tables"][name]
            path = os.path.join(out_dir, f"{name}.csv")
            write_csv(path, columns, data)
            paths.append(path)
    if "json" in formats:
        path = os.path.join(out_dir, "summary.json")
        with open(path, "w") as fh:
            json.dump(_clean(results.get("summary", {})), fh, indent=2, sort_keys=True)
            fh.write("\n")
        paths.append(path)
    return paths
