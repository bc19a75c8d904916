"""Single-file checkpoints with a version byte, config fingerprint and payload digest.

Layout::

    b"TRICKPT" | version (1 byte) | fingerprint (64 ascii hex) | sha256(payload) (32 bytes)
    | payload length (8 bytes, little endian) | payload (torch.save of a plain dict)
"""
from __future__ import annotations

import hashlib
import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import torch

MAGIC = b"TRICKPT"
VERSION = 1
_HEADER = struct.Struct(f"<{len(MAGIC)}sB64s32sQ")


class CheckpointError(RuntimeError):
    pass


class IntegrityError(CheckpointError):
    pass


class FingerprintMismatch(CheckpointError):
    def __init__(self, expected: str, found: str):
        super().__init__(f"checkpoint fingerprint {found} does not match config fingerprint {expected}")
        self.expected = expected
        self.found = found


@dataclass
class CheckpointRecord:
    model_parameters: dict = field(default_factory=dict)
    optimizer_state: dict = field(default_factory=dict)
    epoch: int = 0
    config_fingerprint: str = "0" * 64


def save_checkpoint(record: CheckpointRecord, path) -> None:
    fp = record.config_fingerprint
    if len(fp) != 64:
        raise ValueError("config fingerprint must be a 64-character sha256 hex digest")
    buf = io.BytesIO()
    torch.save({"model_parameters": record.model_parameters, "optimizer_state": record.optimizer_state,
                "epoch": int(record.epoch)}, buf)
    payload = buf.getvalue()
    header = _HEADER.pack(MAGIC, VERSION, fp.encode("ascii"), hashlib.sha256(payload).digest(), len(payload))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path) -> CheckpointRecord:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise IntegrityError(f"{path}: truncated header")
    magic, version, fp, digest, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file")
    if version != VERSION:
        raise IntegrityError(f"{path}: unsupported checkpoint version {version}")
    payload = data[_HEADER.size:]
    if len(payload) != length or hashlib.sha256(payload).digest() != digest:
        raise IntegrityError(f"{path}: payload digest mismatch (file corrupted)")
    obj = torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)
    return CheckpointRecord(obj["model_parameters"], obj["optimizer_state"], obj["epoch"], fp.decode("ascii"))


def checkpoint_roundtrip(record: CheckpointRecord, path) -> CheckpointRecord:
    save_checkpoint(record, path)
    return load_checkpoint(path)


def load_into_model(model: torch.nn.Module, path, expected_fingerprint: str) -> CheckpointRecord:
    record = load_checkpoint(path)
    if record.config_fingerprint != expected_fingerprint:
        raise FingerprintMismatch(expected_fingerprint, record.config_fingerprint)
    model.load_state_dict(record.model_parameters)
    return record


def _equal(a, b) -> bool:
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        return (isinstance(a, torch.Tensor) and isinstance(b, torch.Tensor) and a.dtype == b.dtype
                and a.shape == b.shape and torch.equal(a, b))
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(_equal(a[k], b[k]) for k in a)
    if isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
        return len(a) == len(b) and all(_equal(x, y) for x, y in zip(a, b))
    return a == b


def records_equal(a: CheckpointRecord, b: CheckpointRecord) -> bool:
    return (a.epoch == b.epoch and a.config_fingerprint == b.config_fingerprint
            and _equal(a.model_parameters, b.model_parameters) and _equal(a.optimizer_state, b.optimizer_state))
