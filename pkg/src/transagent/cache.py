"""One-file container for extracted agent knowledge and student snapshots.

Layout, little-endian throughout:

    [record 0 payload][record 1 payload]...[manifest JSON][footer]

The footer is fixed-size: magic ``TAKC`` (4 bytes), format version (u16),
manifest offset (u64), manifest length (u64), manifest CRC-32 (u32). The
manifest maps record identities to offset, length, CRC-32, dtype and shape.
Payloads are float32 unless a record asks for float64; knowledge records
stay float32, prompt snapshots use float64 so a reloaded student reproduces
its predictions bit for bit. A flipped byte anywhere is caught by a checksum
before values reach training.

Files contain no timestamps and the manifest is serialized with sorted keys,
so re-running an extraction yields byte-identical output.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .errors import (CacheCorruptionError, CacheKeyError, InvalidInputError)

MAGIC = b"TAKC"
VERSION = 1
_FOOTER = struct.Struct("<4sHQQI")
PAYLOAD_KINDS = ("feature_stack", "class_features", "score_vector", "attention_map", "snapshot")
_DTYPES = {"f4": "<f4", "f8": "<f8"}


@dataclass(frozen=True)
class KnowledgeCacheRecord:
    agent_id: str
    dataset_id: str
    split: str
    key: str  # sample id, class id, or snapshot name
    kind: str
    values: Tensor
    dtype: str = "f4"

    def __post_init__(self):
        if self.kind not in PAYLOAD_KINDS:
            raise InvalidInputError(f"unknown payload kind {self.kind!r}")
        if self.dtype not in _DTYPES:
            raise InvalidInputError(f"dtype must be f4 or f8, got {self.dtype!r}")

    @property
    def identity(self) -> str:
        return "|".join((self.agent_id, self.dataset_id, self.split, self.key))


def record_identity(agent_id: str, dataset_id: str, split: str, key: str) -> str:
    return "|".join((agent_id, dataset_id, split, key))


def write_cache(records, path, meta: dict | None = None) -> Path:
    """Serialize records in the given order; duplicate identities are rejected."""
    path = Path(path)
    blob = bytearray()
    index: dict[str, dict] = {}
    for r in records:
        if r.identity in index:
            raise InvalidInputError(f"duplicate cache record: {r.identity}")
        arr = np.ascontiguousarray(
            r.values.detach().numpy() if isinstance(r.values, Tensor) else np.asarray(r.values),
            dtype=_DTYPES[r.dtype])
        data = arr.tobytes()
        # fixed-width crc so equal-shaped caches have equal-sized manifests
        index[r.identity] = {
            "offset": len(blob), "length": len(data), "crc": f"{zlib.crc32(data):08x}",
            "dtype": r.dtype, "shape": list(arr.shape), "kind": r.kind,
            "agent_id": r.agent_id, "dataset_id": r.dataset_id, "split": r.split, "key": r.key,
        }
        blob.extend(data)
    manifest = json.dumps({"version": VERSION, "records": index, "meta": meta or {}},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    footer = _FOOTER.pack(MAGIC, VERSION, len(blob), len(manifest), zlib.crc32(manifest))
    path.write_bytes(bytes(blob) + manifest + footer)
    return path


class CacheReader:
    """Loads the manifest once; record payloads are checked on access."""

    def __init__(self, path):
        self.path = Path(path)
        raw = self.path.read_bytes()
        if len(raw) < _FOOTER.size:
            raise CacheCorruptionError(f"{self.path}: shorter than a footer")
        magic, version, offset, length, crc = _FOOTER.unpack(raw[-_FOOTER.size:])
        if magic != MAGIC:
            raise CacheCorruptionError(f"{self.path}: bad magic {magic!r}")
        if version != VERSION:
            raise CacheCorruptionError(f"{self.path}: unsupported format version {version}")
        if offset + length + _FOOTER.size != len(raw):
            raise CacheCorruptionError(f"{self.path}: framing does not add up")
        manifest_bytes = raw[offset: offset + length]
        if zlib.crc32(manifest_bytes) != crc:
            raise CacheCorruptionError(f"{self.path}: manifest checksum mismatch")
        manifest = json.loads(manifest_bytes)
        self._payload = raw[:offset]
        self._records: dict[str, dict] = manifest["records"]
        self.meta: dict = manifest.get("meta", {})

    def keys(self):
        return sorted(self._records)

    def __contains__(self, identity: str) -> bool:
        return identity in self._records

    def entry(self, identity: str) -> dict:
        try:
            return self._records[identity]
        except KeyError:
            raise CacheKeyError(f"{self.path}: no record {identity!r}") from None

    def read(self, agent_id: str, dataset_id: str, split: str, key: str) -> KnowledgeCacheRecord:
        identity = record_identity(agent_id, dataset_id, split, key)
        ent = self.entry(identity)
        data = self._payload[ent["offset"]: ent["offset"] + ent["length"]]
        if len(data) != ent["length"] or f"{zlib.crc32(data):08x}" != ent["crc"]:
            raise CacheCorruptionError(f"{self.path}: record {identity!r} failed its checksum")
        arr = np.frombuffer(data, dtype=_DTYPES[ent["dtype"]]).reshape(ent["shape"]).copy()
        values = torch.from_numpy(arr).to(torch.float64)
        return KnowledgeCacheRecord(agent_id, dataset_id, split, key, ent["kind"], values, ent["dtype"])


def read_cache(path, key) -> KnowledgeCacheRecord:
    """One-shot lookup; ``key`` is (agent_id, dataset_id, split, key)."""
    return CacheReader(path).read(*key)


@dataclass
class CacheReport:
    corrupt: list = field(default_factory=list)
    stale: list = field(default_factory=list)
    shape_drift: list = field(default_factory=list)
    missing: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.corrupt or self.stale or self.shape_drift or self.missing)


def _expected_shape(info: dict, n_classes: int | None):
    modality = info.get("modality")
    if modality == "vision":
        return [info["layer_count"], info["feature_width"]]
    if modality == "language":
        return [info["feature_width"]]
    if modality == "t2i" and n_classes is not None:
        return [n_classes, info["map_tokens"]]
    if modality == "i2t" and n_classes is not None:
        return [n_classes]
    return None


def validate_cache(path, registry: dict, expected: dict | None = None) -> CacheReport:
    """Report-only audit: corruption, stale seeds, shape drift, missing coverage.

    ``expected`` may carry {"classes": [...], "splits": {split: [sample ids]}}
    to check coverage; without it only per-record properties are audited.
    """
    report = CacheReport()
    try:
        reader = CacheReader(path)
    except CacheCorruptionError as exc:
        report.corrupt.append(str(exc))
        return report
    from .agents import registry_fingerprint

    live = registry_fingerprint(registry)
    remembered = reader.meta.get("agents", {})
    classes = list(expected.get("classes", [])) if expected else None
    n_classes = len(classes) if classes else (len(reader.meta.get("classes", [])) or None)
    for identity in reader.keys():
        ent = reader.entry(identity)
        data = reader._payload[ent["offset"]: ent["offset"] + ent["length"]]
        if len(data) != ent["length"] or f"{zlib.crc32(data):08x}" != ent["crc"]:
            report.corrupt.append(identity)
            continue
        agent_id = ent["agent_id"]
        if not agent_id:  # snapshots have no producing agent
            continue
        if agent_id not in live:
            report.stale.append(f"{identity}: agent not in registry")
            continue
        if remembered.get(agent_id, {}).get("seed") != live[agent_id]["seed"]:
            report.stale.append(f"{identity}: agent seed changed")
        want = _expected_shape(live[agent_id], n_classes)
        if want is not None and list(ent["shape"]) != want:
            report.shape_drift.append(f"{identity}: shape {ent['shape']}, registry implies {want}")
    if expected:
        dataset_id = reader.meta.get("dataset", "")
        for agent_id, info in live.items():
            if info["modality"] == "language":
                for c in classes or []:
                    identity = record_identity(agent_id, dataset_id, "class", str(c))
                    if identity not in reader:
                        report.missing.append(identity)
            else:
                for split, ids in (expected.get("splits") or {}).items():
                    for sid in ids:
                        identity = record_identity(agent_id, dataset_id, split, sid)
                        if identity not in reader:
                            report.missing.append(identity)
    return report
