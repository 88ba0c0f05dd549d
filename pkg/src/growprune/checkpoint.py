"""Framed binary checkpoints for a model plus its trainer state.

Layout (all integers little-endian)::

    b"GPCK" | u16 version | sections... | 32-byte SHA-256 of everything before

Each section is ``4-byte tag | u64 length | payload``.  ``HEAD`` holds a
sorted-key JSON document (architecture, trainer settings, RNG state,
metrics); ``WGHT``/``MASK``/``BIAS`` hold one layer each, masks as packed
bits; ``VELO`` holds momentum buffers.  Files are written to a temporary name
and renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ChecksumError, FormatError
from .network import MaskedLayer, NetworkModel, SgdState
from .tensor import DTYPE, SgdConfig
from .training import Trainer

MAGIC = b"GPCK"
VERSION = 1
_DIGEST = 32


@dataclass
class Checkpoint:
    model: NetworkModel
    trainer: Trainer | None = None
    metrics: dict = field(default_factory=dict)


def _section(tag, payload):
    return tag + struct.pack("<Q", len(payload)) + payload


def encode(model, trainer=None, metrics=None):
    layers_meta = []
    body = []
    for layer in model.layers:
        layers_meta.append({
            "kind": layer.kind, "shape": list(layer.weight.shape), "activation": layer.activation,
            "pool": layer.pool,
        })
        body.append(_section(b"WGHT", np.ascontiguousarray(layer.weight, dtype="<f4").tobytes()))
        body.append(_section(b"MASK", np.packbits(layer.mask.reshape(-1)).tobytes()))
        body.append(_section(b"BIAS", np.ascontiguousarray(layer.bias, dtype="<f4").tobytes()))
    head = {
        "model": {
            "input_shape": list(model.input_shape), "class_count": model.class_count, "seed": model.seed,
            "arch": model.arch, "input_pad": model.input_pad, "meta": model.meta, "layers": layers_meta,
        },
        "metrics": metrics or {},
        "trainer": None,
    }
    if trainer is not None:
        snap = trainer.snapshot()
        head["trainer"] = {
            "sgd": asdict(trainer.sgd), "batch_size": trainer.batch_size, "patience": trainer.patience,
            "decay": trainer.decay, "augment_shift": trainer.augment_shift,
            "learning_rate": snap["opt"].learning_rate, "rng": snap["rng"], "best": snap["best"],
            "stale": snap["stale"], "epochs": snap["epochs"],
            "has_velocity": snap["opt"].velocity is not None,
        }
        if snap["opt"].velocity is not None:
            for vw, vb in snap["opt"].velocity:
                body.append(_section(b"VELO", np.ascontiguousarray(vw, dtype="<f4").tobytes()))
                body.append(_section(b"VELO", np.ascontiguousarray(vb, dtype="<f4").tobytes()))
    head_bytes = json.dumps(head, sort_keys=True, separators=(",", ":")).encode()
    blob = MAGIC + struct.pack("<H", VERSION) + _section(b"HEAD", head_bytes) + b"".join(body)
    return blob + hashlib.sha256(blob).digest()


def _sections(blob):
    pos = 6
    end = len(blob) - _DIGEST
    while pos < end:
        if pos + 12 > end:
            raise FormatError(f"truncated section header at byte offset {pos}")
        tag = blob[pos:pos + 4]
        (length,) = struct.unpack_from("<Q", blob, pos + 4)
        start = pos + 12
        if start + length > end:
            raise FormatError(f"section {tag!r} at byte offset {pos} runs past the payload end")
        yield tag, blob[start:start + length]
        pos = start + length


def decode(blob):
    if len(blob) < 6 + _DIGEST or blob[:4] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic at byte offset 0)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise FormatError(f"checkpoint version {version} is not supported (expected {VERSION})")
    if hashlib.sha256(blob[:-_DIGEST]).digest() != blob[-_DIGEST:]:
        raise ChecksumError("checkpoint checksum mismatch; file is corrupt")
    sections = list(_sections(blob))
    if not sections or sections[0][0] != b"HEAD":
        raise FormatError("checkpoint has no HEAD section")
    head = json.loads(sections[0][1])
    rest = sections[1:]
    mhead = head["model"]
    layers = []
    for i, spec in enumerate(mhead["layers"]):
        tags = [t for t, _ in rest[3 * i:3 * i + 3]]
        if tags != [b"WGHT", b"MASK", b"BIAS"]:
            raise FormatError(f"layer {i}: unexpected section sequence {tags}")
        shape = tuple(spec["shape"])
        size = int(np.prod(shape))
        weight = np.frombuffer(rest[3 * i][1], dtype="<f4").astype(DTYPE).reshape(shape)
        mask = np.unpackbits(np.frombuffer(rest[3 * i + 1][1], dtype=np.uint8))[:size].reshape(shape)
        bias = np.frombuffer(rest[3 * i + 2][1], dtype="<f4").astype(DTYPE)
        layers.append(MaskedLayer(spec["kind"], weight, mask.astype(np.uint8), bias, spec["activation"], spec["pool"]))
    model = NetworkModel(layers, tuple(mhead["input_shape"]), mhead["class_count"], mhead["seed"],
                         mhead["arch"], mhead["input_pad"], mhead["meta"])
    trainer = None
    th = head["trainer"]
    if th is not None:
        trainer = Trainer(SgdConfig(**th["sgd"]), th["batch_size"], 0, th["patience"], th["decay"],
                          th["augment_shift"])
        opt = SgdState(cfg=trainer.sgd)
        opt.learning_rate = th["learning_rate"]
        if th["has_velocity"]:
            velo = rest[3 * len(layers):]
            if len(velo) != 2 * len(layers) or any(t != b"VELO" for t, _ in velo):
                raise FormatError("momentum buffer sections missing or malformed")
            opt.velocity = [
                (np.frombuffer(velo[2 * i][1], dtype="<f4").astype(DTYPE).reshape(layer.weight.shape),
                 np.frombuffer(velo[2 * i + 1][1], dtype="<f4").astype(DTYPE).reshape(layer.bias.shape))
                for i, layer in enumerate(layers)
            ]
        trainer.restore({"opt": opt, "rng": th["rng"], "best": th["best"], "stale": th["stale"],
                         "epochs": th["epochs"]})
    return Checkpoint(model, trainer, head["metrics"])


def save_checkpoint(path, model, trainer=None, metrics=None):
    """Atomically write ``model`` (and optionally trainer state) to ``path``."""
    blob = encode(model, trainer, metrics)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path):
    return decode(Path(path).read_bytes())
