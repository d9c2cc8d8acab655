"""Versioned binary checkpoints of frozen weights and adapter parameters.

Layout::

    b"NEATCKPT" | u32 version | u64 header length | JSON header | payload | sha256

All integers are little-endian.  The payload is every buffer as raw
little-endian float64, concatenated in the order listed by the header's
shape table.  The trailing digest covers everything before it, so any
truncation or edit (including to the shape table) is detected on load.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adapters as ad
from .errors import IntegrityError, VersionError
from .tensor import Tensor
from .training.harness import Model

MAGIC = b"NEATCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32
_LE_F64 = np.dtype("<f8")


@dataclass
class Checkpoint:
    version: int
    layers: list[dict]
    buffers: dict[str, np.ndarray]
    readout: np.ndarray | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def to_model(self) -> Model:
        layers = []
        for spec in self.layers:
            i = spec["index"]
            base = ad.FrozenLinear(self.buffers[f"layer{i}.weight"])
            adapter = None
            kind = spec.get("adapter")
            hp = spec.get("hyperparameters", {})
            if kind == "lora":
                adapter = ad.LoraAdapter(
                    Tensor(self.buffers[f"layer{i}.A"], trainable=True, name="A"),
                    Tensor(self.buffers[f"layer{i}.B"], trainable=True, name="B"),
                    scaling=hp["scaling"], dropout_p=hp["dropout_p"],
                )
            elif kind == "neat":
                mids = [
                    Tensor(self.buffers[f"layer{i}.intermediate{k}"], trainable=True, name=f"intermediate{k}")
                    for k in range(spec["depth"] - 2)
                ]
                adapter = ad.NeatAdapter(
                    Tensor(self.buffers[f"layer{i}.theta_in"], trainable=True, name="theta_in"),
                    Tensor(self.buffers[f"layer{i}.theta_out"], trainable=True, name="theta_out"),
                    mids, **hp,
                )
            layers.append(ad.AdaptedLayer(base, adapter, i))
        return Model(layers, self.readout)

    def summary(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "meta": self.meta,
            "layers": self.layers,
            "buffers": {k: list(v.shape) for k, v in self.buffers.items()},
            "n_values": int(sum(v.size for v in self.buffers.values())),
            "readout": list(self.readout.shape) if self.readout is not None else None,
        }


def _model_buffers(model: Model):
    layers, buffers = [], {}
    for layer in model.layers:
        i = layer.layer_index
        buffers[f"layer{i}.weight"] = layer.base.weight
        spec = {"index": i, "shape": list(layer.base.shape), "adapter": None}
        a = layer.adapter
        if isinstance(a, ad.LoraAdapter):
            buffers[f"layer{i}.A"], buffers[f"layer{i}.B"] = a.A.data, a.B.data
        elif isinstance(a, ad.NeatAdapter):
            buffers[f"layer{i}.theta_in"] = a.theta_in.data
            for k, m in enumerate(a.intermediates):
                buffers[f"layer{i}.intermediate{k}"] = m.data
            buffers[f"layer{i}.theta_out"] = a.theta_out.data
        if a is not None:
            spec.update(adapter=a.kind, rank=a.rank, depth=a.depth, hyperparameters=a.hyperparameters())
        layers.append(spec)
    if model.readout is not None:
        buffers["readout"] = model.readout
    return layers, buffers


def checkpoint_save(model: Model, path, seed: int | None = None, meta: dict | None = None) -> str:
    """Write ``model`` to ``path`` atomically; returns the sha256 of the file."""
    layers, buffers = _model_buffers(model)
    table, offset, chunks = [], 0, []
    for name, arr in buffers.items():
        raw = np.ascontiguousarray(arr, dtype=_LE_F64).tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"layers": layers, "buffers": table, "payload_len": offset, "seed": seed, "meta": meta or {}},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    blob = body + hashlib.sha256(body).digest()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def _validate_table(header: dict) -> None:
    try:
        table, total = header["buffers"], header["payload_len"]
        expected = 0
        for entry in table:
            shape = entry["shape"]
            if not shape or any(not isinstance(s, int) or s < 1 for s in shape):
                raise IntegrityError(f"buffer {entry['name']}: invalid shape {shape}")
            if entry["offset"] != expected or entry["nbytes"] != 8 * math.prod(shape):
                raise IntegrityError(f"buffer {entry['name']}: offset/size inconsistent with shape {shape}")
            expected += entry["nbytes"]
        if expected != total:
            raise IntegrityError(f"shape table covers {expected} bytes, payload has {total}")
        names = {e["name"]: e["shape"] for e in table}
        for spec in header["layers"]:
            if names.get(f"layer{spec['index']}.weight") != spec["shape"]:
                raise IntegrityError(f"layer {spec['index']}: weight shape disagrees with the layer table")
    except (KeyError, TypeError) as exc:
        raise IntegrityError(f"malformed header: {exc!r}") from None


def checkpoint_load(path) -> Checkpoint:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _PREFIX.size + _DIGEST:
        raise IntegrityError(f"{path}: file too short ({len(blob)} bytes)")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, this build reads version {FORMAT_VERSION}")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch (truncated or modified)")
    start = _PREFIX.size
    try:
        header = json.loads(body[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: unreadable header: {exc}") from None
    _validate_table(header)
    payload = body[start + header_len :]
    if len(payload) != header["payload_len"]:
        raise IntegrityError(f"{path}: payload is {len(payload)} bytes, header says {header['payload_len']}")
    buffers = {}
    for e in header["buffers"]:
        arr = np.frombuffer(payload, dtype=_LE_F64, count=e["nbytes"] // 8, offset=e["offset"])
        buffers[e["name"]] = arr.astype(np.float64).reshape(e["shape"])
    readout = buffers.pop("readout", None)
    return Checkpoint(version, header["layers"], buffers, readout, header.get("seed"), header.get("meta", {}))
