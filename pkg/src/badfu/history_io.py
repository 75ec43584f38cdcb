"""Binary training-history snapshots (``history.bin``).

Layout, all little-endian::

    8 bytes   magic  b"BFUHIST\\0"
    1 byte    format version (currently 1)
    3 bytes   reserved, zero
    8 bytes   header length H (uint64)
    H bytes   UTF-8 JSON header
    float64   initial global model (P values)
    per round, in order:
        K x P float64   client payloads, sorted by client id
        P float64       global model after the round

``global_before`` of round ``i`` is the global after round ``i - 1`` (the
initial model for round 1), so it is not stored twice.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .fl import ClientUpdate, FederatedSetup, RoundRecord, TrainingHistory
from .nn import ParamVector

MAGIC = b"BFUHIST\0"
VERSION = 1
_PREFIX = struct.Struct("<8sB3xQ")


class HistoryFormatError(ConfigError):
    pass


def write_history(history: TrainingHistory, path: str | Path) -> None:
    arch = history.setup.arch
    header = {
        "layer_sizes": list(arch.layer_sizes),
        "activation": arch.activation,
        "seed": history.seed,
        "n_params": arch.n_params,
        "rounds": [
            {
                "round": rec.round,
                "clients": [u.client_id for u in rec.updates],
                "kinds": [u.kind for u in rec.updates],
                "sample_counts": [u.sample_count for u in rec.updates],
                "sensitivities": {str(k): v for k, v in rec.sensitivities.items()},
                "metrics": rec.metrics,
            }
            for rec in history.records
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        fh.write(history.init.values.astype("<f8").tobytes())
        for rec in history.records:
            for u in rec.updates:
                fh.write(u.payload.astype("<f8").tobytes())
            fh.write(rec.global_after.values.astype("<f8").tobytes())


def read_history(path: str | Path, setup: FederatedSetup) -> TrainingHistory:
    """Load a snapshot and attach it to ``setup`` (rebuilt from the run's config)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise HistoryFormatError(f"cannot read {path}: {exc.strerror or exc}") from exc
    if len(raw) < _PREFIX.size:
        raise HistoryFormatError(f"{path}: truncated")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise HistoryFormatError(f"{path}: not a history snapshot")
    if version != VERSION:
        raise HistoryFormatError(f"{path}: unsupported history format version {version}")
    start = _PREFIX.size
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    arch = setup.arch
    if header["layer_sizes"] != list(arch.layer_sizes) or header["activation"] != arch.activation:
        raise HistoryFormatError(f"{path}: architecture does not match the run configuration")
    P = header["n_params"]
    body = np.frombuffer(raw, dtype="<f8", offset=start + hlen)
    expected = P * (1 + sum(len(r["clients"]) + 1 for r in header["rounds"]))
    if body.size != expected:
        raise HistoryFormatError(f"{path}: payload has {body.size} values, expected {expected}")

    pos = 0

    def take() -> np.ndarray:
        nonlocal pos
        out = body[pos:pos + P].astype(np.float64)
        pos += P
        return out

    init = ParamVector(take(), arch)
    before = init
    records = []
    for r in header["rounds"]:
        updates = [ClientUpdate(cid, kind, take(), n)
                   for cid, kind, n in zip(r["clients"], r["kinds"], r["sample_counts"])]
        after = ParamVector(take(), arch)
        records.append(RoundRecord(
            round=r["round"], global_before=before, updates=updates, global_after=after,
            sensitivities={int(k): v for k, v in r["sensitivities"].items()}, metrics=r["metrics"],
        ))
        before = after
    metrics = [rec.metrics for rec in records if rec.metrics]
    return TrainingHistory(setup=setup, seed=header["seed"], init=init, final=before,
                           records=records, metrics=metrics)


def save_model(model: ParamVector, path: str | Path) -> None:
    np.save(path, model.values)


def load_model(path: str | Path, setup: FederatedSetup) -> ParamVector:
    try:
        values = np.load(path)
    except OSError as exc:
        raise ConfigError(f"cannot read model snapshot {path}: {exc}") from exc
    return ParamVector(values, setup.arch)
