"""Versioned binary checkpoint container.

Layout (little-endian):

    magic "MLN1" | u32 version | u32 json_len | json payload
    u32 tensor_count
    per tensor: u16 name_len | utf-8 name | u8 dtype (0 = float32)
                | u8 rank | u64 dims... | raw row-major data

The JSON payload echoes the model config plus run metadata (seed, step count,
best validation Dice).  Model weights and BatchNorm running stats are stored
under their module names, EMA shadows under ``ema/`` and optimizer moments
under ``opt/exp_avg/`` and ``opt/exp_avg_sq/``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from typing import Optional

import numpy as np

from .model import ConfigError, MedLiteNet, ModelConfig

MAGIC = b"MLN1"
FORMAT_VERSION = 1
_DTYPE_F32 = 0


class CheckpointError(ValueError):
    """Malformed or mismatched checkpoint file."""


def _named_tensors(model: MedLiteNet) -> list:
    entries = [(name, p.data) for name, p in model.named_parameters()]
    for name, state in model.named_states():
        entries.append((name + ".running_mean", state.mean))
        entries.append((name + ".running_var", state.var))
    return entries


def _encode_tensor(name: str, arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f4")
    name_b = name.encode("utf-8")
    if len(name_b) > 0xFFFF:
        raise CheckpointError(f"tensor name too long: {name!r}")
    head = struct.pack("<H", len(name_b)) + name_b
    head += struct.pack("<BB", _DTYPE_F32, data.ndim)
    head += struct.pack(f"<{data.ndim}Q", *data.shape) if data.ndim else b""
    return head + data.tobytes()


def save_checkpoint(model: MedLiteNet, path, *, ema_shadow: Optional[dict] = None,
                    optimizer_state: Optional[dict] = None,
                    meta: Optional[dict] = None) -> None:
    """Serialize model (+ optional EMA / optimizer state) atomically."""
    payload = {
        "config": model.config.to_dict(),
        "seed": model.seed,
        "meta": dict(meta or {}),
    }
    entries = _named_tensors(model)
    if ema_shadow is not None:
        entries.extend(("ema/" + name, arr) for name, arr in ema_shadow.items())
    if optimizer_state is not None:
        payload["meta"]["optimizer_step"] = int(optimizer_state.get("step", 0))
        for name, arr in optimizer_state.get("exp_avg", {}).items():
            entries.append(("opt/exp_avg/" + name, arr))
        for name, arr in optimizer_state.get("exp_avg_sq", {}).items():
            entries.append(("opt/exp_avg_sq/" + name, arr))

    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = [MAGIC, struct.pack("<I", FORMAT_VERSION),
            struct.pack("<I", len(blob)), blob,
            struct.pack("<I", len(entries))]
    body.extend(_encode_tensor(name, arr) for name, arr in entries)

    path = os.fspath(path)
    dirname = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".ckpt.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(body))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"truncated checkpoint: needed {n} bytes for {what} at byte "
                f"offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self, what):
        return self.take(1, what)[0]

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what):
        return struct.unpack("<Q", self.take(8, what))[0]


def read_checkpoint(path) -> tuple:
    """Parse a checkpoint file into (payload dict, {name: array})."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(
            f"bad magic {magic!r} at byte offset 0, expected {MAGIC!r}")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version} at byte offset 4")
    json_len = r.u32("json length")
    try:
        payload = json.loads(r.take(json_len, "json payload").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"invalid json payload: {exc}") from exc
    count = r.u32("tensor count")
    tensors = {}
    for i in range(count):
        name_len = r.u16(f"name length of tensor {i}")
        name = r.take(name_len, f"name of tensor {i}").decode("utf-8")
        dtype = r.u8(f"dtype of {name}")
        if dtype != _DTYPE_F32:
            raise CheckpointError(
                f"unknown dtype code {dtype} for tensor {name!r} at byte "
                f"offset {r.pos - 1}")
        rank = r.u8(f"rank of {name}")
        dims = tuple(r.u64(f"dim {d} of {name}") for d in range(rank))
        n_items = int(np.prod(dims)) if dims else 1
        raw = r.take(4 * n_items, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if r.pos != len(r.buf):
        raise CheckpointError(
            f"{len(r.buf) - r.pos} trailing bytes at byte offset {r.pos}")
    return payload, tensors


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None) -> tuple:
    """Rebuild the model from a checkpoint.

    Returns (model, extras) where extras carries ``ema_shadow``,
    ``optimizer_state`` (or None) and the stored ``meta`` dict.
    """
    payload, tensors = read_checkpoint(path)
    try:
        config = ModelConfig.from_dict(payload["config"])
        config.validate()
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"invalid stored config: {exc}") from exc
    if expected_config is not None and expected_config.to_dict() != config.to_dict():
        diff = [k for k, v in config.to_dict().items()
                if expected_config.to_dict().get(k) != v]
        raise CheckpointError(
            f"checkpoint config does not match requested build "
            f"(differs in: {', '.join(diff)})")

    model = MedLiteNet(config, seed=int(payload.get("seed", 0)))
    for name, p in model.named_parameters():
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        if tensors[name].shape != p.data.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {tensors[name].shape}, model "
                f"expects {p.data.shape}")
        p.data = tensors[name]
    for name, state in model.named_states():
        state.mean = tensors[name + ".running_mean"]
        state.var = tensors[name + ".running_var"]

    ema_shadow = {name[len("ema/"):]: arr for name, arr in tensors.items()
                  if name.startswith("ema/")} or None
    opt_state = None
    avg = {name[len("opt/exp_avg/"):]: arr for name, arr in tensors.items()
           if name.startswith("opt/exp_avg/")}
    avg_sq = {name[len("opt/exp_avg_sq/"):]: arr for name, arr in tensors.items()
              if name.startswith("opt/exp_avg_sq/")}
    if avg:
        opt_state = {"exp_avg": avg, "exp_avg_sq": avg_sq,
                     "step": int(payload.get("meta", {}).get("optimizer_step", 0))}
    extras = {"ema_shadow": ema_shadow, "optimizer_state": opt_state,
              "meta": payload.get("meta", {}), "config": config}
    return model, extras
