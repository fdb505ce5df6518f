"""Checkpoint container: save/load, averaging, and model reconstruction.

File layout::

    b"CJTCKPT1" | uint32 LE header length | UTF-8 JSON header | array payload

The header holds the config, fingerprint, metadata and, per array, its name,
shape and byte offset into the payload. Arrays are little-endian float32.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .networks import AsrModel, AsrModelConfig, FingerprintMismatch, LmConfig, TransformerLM

MAGIC = b"CJTCKPT1"
ROUND_TAGS = ("teacher", "cjt-round1", "cjt-round2", "lm", "baseline")


@dataclass
class Checkpoint:
    kind: str                       # "asr" or "lm"
    config: dict
    fingerprint: str
    params: dict                    # name -> float32 ndarray
    updates: int = 0
    round_tag: str = "baseline"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.round_tag not in ROUND_TAGS:
            raise ValueError(f"unknown round tag {self.round_tag!r}")

    @classmethod
    def from_model(cls, model, updates: int = 0, round_tag: str = "baseline", **metadata):
        return cls(model.kind, model.config.to_dict(), model.fingerprint,
                   {k: v.astype(np.float32) for k, v in model.arrays().items()},
                   updates, round_tag, dict(metadata))

    def build(self, dtype=None):
        """Instantiate the network these parameters belong to."""
        if self.kind == "asr":
            model = AsrModel(AsrModelConfig(**self.config), self.params, dtype=dtype)
        elif self.kind == "lm":
            model = TransformerLM(LmConfig(**self.config), self.params, dtype=dtype)
        else:
            raise ValueError(f"unknown checkpoint kind {self.kind!r}")
        if model.fingerprint != self.fingerprint:
            raise FingerprintMismatch(f"checkpoint {self.fingerprint} vs model {model.fingerprint}")
        return model

    def census(self) -> list:
        return [(k, tuple(v.shape), int(v.size)) for k, v in sorted(self.params.items())]

    # ----------------------------------------------------------------- I/O
    def to_bytes(self) -> bytes:
        index = []
        offset = 0
        for name in sorted(self.params):
            arr = self.params[name]
            index.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size * 4
        header = json.dumps({
            "kind": self.kind, "config": self.config, "fingerprint": self.fingerprint,
            "updates": self.updates, "round_tag": self.round_tag, "metadata": self.metadata,
            "arrays": index, "dtype": "<f4",
        }, sort_keys=True).encode("utf-8")
        body = b"".join(np.ascontiguousarray(self.params[e["name"]], dtype="<f4").tobytes()
                        for e in index)
        return MAGIC + struct.pack("<I", len(header)) + header + body

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:len(MAGIC)] != MAGIC:
            raise ValueError("not a checkpoint file")
        (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
        start = len(MAGIC) + 4
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
        body = memoryview(raw)[start + hlen:]
        params = {}
        for e in header["arrays"]:
            n = int(np.prod(e["shape"])) if e["shape"] else 1
            chunk = body[e["offset"]:e["offset"] + 4 * n]
            params[e["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(e["shape"]).astype(np.float32)
        return cls(header["kind"], header["config"], header["fingerprint"], params,
                   header["updates"], header["round_tag"], header["metadata"])

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def average_checkpoints(cks: Sequence[Checkpoint]) -> Checkpoint:
    """Elementwise arithmetic mean of every named parameter."""
    if not cks:
        raise ValueError("need at least one checkpoint to average")
    ref = cks[0]
    for ck in cks[1:]:
        if ck.fingerprint != ref.fingerprint:
            raise FingerprintMismatch(f"cannot average {ck.fingerprint} with {ref.fingerprint}")
    params = {}
    for name in ref.params:
        acc = np.zeros(ref.params[name].shape, dtype=np.float64)
        for ck in cks:
            acc += ck.params[name]
        params[name] = (acc / len(cks)).astype(np.float32)
    meta = dict(ref.metadata)
    meta["averaged"] = len(cks)
    return Checkpoint(ref.kind, dict(ref.config), ref.fingerprint, params,
                      max(ck.updates for ck in cks), cks[-1].round_tag, meta)
