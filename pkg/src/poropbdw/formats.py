"""Binary state/measurement files and JSON sidecars.

``PORO1``: magic, ``u64 N``, ``u64 count``, ``f64 tau``, then ``count``
little-endian f64 vectors of length ``N``.

``MEAS1``: magic, ``u64 m``, ``u64 steps``, ``f64 tau``, ``f64 xi``,
``u64 seed``, then ``steps`` f64 vectors of length ``m``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .observation import MeasurementSeries

PORO_MAGIC = b"PORO1"
MEAS_MAGIC = b"MEAS1"
NO_SEED = 2**64 - 1


class FormatError(ValueError):
    pass


def write_poro(path, vectors: np.ndarray, tau: float = 0.0) -> None:
    """Write ``vectors`` (``count x N``) step-major."""
    v = np.ascontiguousarray(np.atleast_2d(vectors), dtype="<f8")
    with open(path, "wb") as f:
        f.write(PORO_MAGIC)
        f.write(struct.pack("<QQd", v.shape[1], v.shape[0], float(tau)))
        f.write(v.tobytes())


def read_poro(path) -> tuple[np.ndarray, float]:
    data = Path(path).read_bytes()
    if data[:5] != PORO_MAGIC:
        raise FormatError(f"{path}: not a PORO1 file")
    N, count, tau = struct.unpack_from("<QQd", data, 5)
    body = data[5 + 24:]
    if len(body) != 8 * N * count:
        raise FormatError(f"{path}: expected {N * count} values, found {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").reshape(count, N).astype(float), tau


def write_meas(path, ms: MeasurementSeries) -> None:
    v = np.ascontiguousarray(ms.values, dtype="<f8")
    seed = NO_SEED if ms.seed is None else int(ms.seed)
    with open(path, "wb") as f:
        f.write(MEAS_MAGIC)
        f.write(struct.pack("<QQddQ", v.shape[1], v.shape[0], float(ms.tau), float(ms.xi), seed))
        f.write(v.tobytes())


def read_meas(path) -> MeasurementSeries:
    data = Path(path).read_bytes()
    if data[:5] != MEAS_MAGIC:
        raise FormatError(f"{path}: not a MEAS1 file")
    m, steps, tau, xi, seed = struct.unpack_from("<QQddQ", data, 5)
    body = data[5 + 40:]
    if len(body) != 8 * m * steps:
        raise FormatError(f"{path}: expected {m * steps} values, found {len(body) // 8}")
    values = np.frombuffer(body, dtype="<f8").reshape(steps, m).astype(float)
    return MeasurementSeries(values, tau, xi, None if seed == NO_SEED else seed)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else None
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=1) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(canonical_json(obj))


def read_json(path):
    return json.loads(Path(path).read_text())


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(_clean(obj), sort_keys=True).encode()).hexdigest()[:16]
