"""Binary checkpoint format.

Layout: 8-byte magic ``DHCEv1\\0\\0``, a little-endian uint64 header length,
a UTF-8 JSON header (version, hyperparams, vocabulary, event types, encoder,
manifest), then each parameter as little-endian float64 in manifest order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ehr import DiseaseVocabulary
from .model import DHCE, HyperParams, ModelParameters
from .numkit import Tensor

MAGIC = b"DHCEv1\x00\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    hyperparams: HyperParams
    vocabulary: DiseaseVocabulary
    event_types: tuple[str, ...]
    encoder: dict
    params: ModelParameters
    meta: dict = field(default_factory=dict)

    def model(self) -> DHCE:
        return DHCE(self.params, self.hyperparams)

    def header(self) -> dict:
        return {
            "version": VERSION,
            "hyperparams": self.hyperparams.to_dict(),
            "vocabulary": list(self.vocabulary.codes),
            "event_types": list(self.event_types),
            "encoder": self.encoder,
            "manifest": [[name, list(shape)] for name, shape in self.params.manifest()],
            "meta": self.meta,
        }


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps(ckpt.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<Q", len(header)), header]
    for _, t in ckpt.params.items():
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(chunks)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC):
        raise CheckpointError(f"truncated checkpoint: {len(blob)} byte(s), magic needs {len(MAGIC)}")
    magic = blob[: len(MAGIC)]
    if magic != MAGIC:
        if magic.startswith(b"DHCEv"):
            raise CheckpointError(f"unsupported checkpoint version marker {magic!r}")
        raise CheckpointError(f"not a DHCE checkpoint (magic {magic!r})")
    off = len(MAGIC)
    if len(blob) < off + 8:
        raise CheckpointError(f"truncated checkpoint at offset {len(blob)}: header length missing")
    (hlen,) = struct.unpack_from("<Q", blob, off)
    off += 8
    if len(blob) < off + hlen:
        raise CheckpointError(f"truncated checkpoint at offset {len(blob)}: header needs {hlen} bytes from {off}")
    try:
        header = json.loads(blob[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header at offset {off}: {exc}") from None
    off += hlen
    if header.get("version") != VERSION:
        raise CheckpointError(f"checkpoint version {header.get('version')!r} is not supported (expected {VERSION})")
    tensors = {}
    for name, shape in header["manifest"]:
        rows, cols = shape
        nbytes = 8 * rows * cols
        if len(blob) < off + nbytes:
            raise CheckpointError(f"truncated checkpoint at offset {len(blob)}: parameter {name!r} needs {nbytes} bytes from {off}")
        data = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=off).astype(np.float64).reshape(rows, cols)
        tensors[name] = Tensor(data, name=name)
        off += nbytes
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing byte(s) after offset {off}")
    return Checkpoint(
        hyperparams=HyperParams(**header["hyperparams"]),
        vocabulary=DiseaseVocabulary(tuple(header["vocabulary"])),
        event_types=tuple(header["event_types"]),
        encoder=header["encoder"],
        params=ModelParameters(tensors),
        meta=header.get("meta", {}),
    )


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
