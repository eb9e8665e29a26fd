"""Binary checkpoints.

Layout: ``uint64`` little-endian header length, the header as UTF-8 JSON,
then the parameter payload as little-endian float64. For MLPs the payload is
every weight matrix (layer-major, row-major) followed by every bias vector,
which is exactly ``MLPParams.theta``. Analytic energies carry their
constants in the header and, for ``linear``, ``w`` then ``b`` in the payload.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .energy import Linear, MLPEnergy, MLPParams, Quadratic
from .errors import UsageError

FORMAT = "gradflow-checkpoint"
VERSION = 1


def _payload(energy):
    if isinstance(energy, MLPEnergy):
        p = energy.params
        header = {"kind": "mlp", "input_dim": p.input_dim, "hidden_dim": p.hidden_dim, "num_layers": p.num_layers}
        return header, p.theta
    if isinstance(energy, Quadratic):
        return {"kind": "quadratic", "input_dim": energy.input_dim, "scale": float(energy.scale)}, np.zeros(0)
    if isinstance(energy, Linear):
        return {"kind": "linear", "input_dim": energy.input_dim}, np.array([*energy.w, energy.b])
    raise UsageError(f"cannot checkpoint {type(energy).__name__}")


def encode_checkpoint(energy, meta=None) -> bytes:
    header, payload = _payload(energy)
    header = {"format": FORMAT, "version": VERSION, **header, **(meta or {})}
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(raw)) + raw + np.ascontiguousarray(payload, dtype="<f8").tobytes()


def decode_checkpoint(blob: bytes):
    """Return (energy, header)."""
    if len(blob) < 8:
        raise UsageError("checkpoint truncated")
    (n,) = struct.unpack_from("<Q", blob)
    try:
        header = json.loads(blob[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise UsageError(f"bad checkpoint header: {exc}") from exc
    if header.get("format") != FORMAT or header.get("version") != VERSION:
        raise UsageError("not a gradflow checkpoint or unsupported version")
    values = np.frombuffer(blob[8 + n:], dtype="<f8").astype(np.float64)
    kind = header.get("kind")
    if kind == "mlp":
        params = MLPParams(header["input_dim"], header["hidden_dim"], header["num_layers"], values.copy())
        return MLPEnergy(params), header
    if kind == "quadratic":
        return Quadratic(header["scale"], header["input_dim"]), header
    if kind == "linear":
        return Linear(tuple(values[:-1]), float(values[-1])), header
    raise UsageError(f"unknown energy kind {kind!r}")


def save_checkpoint(energy, path, meta=None):
    """Write atomically: a temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(energy, meta))
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
