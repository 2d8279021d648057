"""Named-array parameter stores and the single-file checkpoint archive.

Archive layout::

    8 bytes   magic b"LVCKPT01"
    8 bytes   manifest length (uint64, little endian)
    manifest  UTF-8 JSON (names, shapes, offsets, config, config hash, step,
              parent hash, extra, payload sha256)
    payload   concatenated little-endian float32 arrays
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .volume_io import _atomic_write

MAGIC = b"LVCKPT01"


class CheckpointError(Exception):
    pass


class ChecksumError(CheckpointError):
    pass


class ConfigHashError(CheckpointError):
    pass


class CompatibilityError(CheckpointError):
    pass


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, default=list).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ParameterStore:
    """Ordered mapping of array name to float32 array, plus provenance.

    ``kind`` names the model family (``"stm"``, ``"diffusion"``, ...),
    ``config`` is the constructor configuration needed to rebuild it.
    """

    arrays: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    kind: str = ""
    step: int = 0
    parent_hash: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.arrays = {k: np.array(v, dtype=np.float32, order="C") for k, v in self.arrays.items()}

    @property
    def config_hash(self) -> str:
        return config_hash({"kind": self.kind, **self.config})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.arrays):
            arr = self.arrays[name]
            h.update(name.encode("utf-8"))
            h.update(repr(arr.shape).encode("ascii"))
            h.update(arr.astype("<f4").tobytes())
        return h.hexdigest()

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if k.startswith(prefix)}

    @classmethod
    def from_module(cls, module: torch.nn.Module, **kw) -> "ParameterStore":
        arrays = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items() if v.is_floating_point()}
        return cls(arrays, **kw)

    def load_into(self, module: torch.nn.Module, strict: bool = True) -> torch.nn.Module:
        state = module.state_dict()
        missing = [k for k, v in state.items() if v.is_floating_point() and k not in self.arrays]
        unexpected = [k for k in self.arrays if k not in state]
        if strict and (missing or unexpected):
            raise CheckpointError(f"parameter mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        with torch.no_grad():
            for k, arr in self.arrays.items():
                if k in state:
                    if tuple(state[k].shape) != arr.shape:
                        raise CheckpointError(f"{k}: shape {arr.shape} != module {tuple(state[k].shape)}")
                    state[k].copy_(torch.from_numpy(arr).to(state[k].dtype))
        return module


def save_checkpoint(store: ParameterStore, path) -> str:
    """Write ``store`` atomically; returns the payload checksum."""
    names = list(store.arrays)
    offset = 0
    records = []
    chunks = []
    for name in names:
        buf = store.arrays[name].astype("<f4").tobytes()
        records.append({"name": name, "shape": list(store.arrays[name].shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    payload = b"".join(chunks)
    manifest = {
        "format": 1,
        "dtype": "float32",
        "kind": store.kind,
        "arrays": records,
        "config": store.config,
        "config_hash": store.config_hash,
        "step": int(store.step),
        "parent_hash": store.parent_hash,
        "extra": store.extra,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "checksum": store.checksum(),
    }
    mbytes = json.dumps(manifest, sort_keys=True, default=list).encode("utf-8")
    _atomic_write(Path(path), MAGIC + struct.pack("<Q", len(mbytes)) + mbytes + payload)
    return manifest["checksum"]


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:8] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint archive")
        (n,) = struct.unpack("<Q", head[8:])
        return json.loads(fh.read(n).decode("utf-8"))


def load_checkpoint(path, expected_kind: str | None = None, expected_config_hash: str | None = None) -> ParameterStore:
    """Read and verify an archive.

    Raises :class:`ChecksumError` when the payload does not match its
    recorded hash and :class:`ConfigHashError` when the stored config does
    not hash to the recorded value or to ``expected_config_hash``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint archive")
    (n,) = struct.unpack("<Q", blob[8:16])
    try:
        manifest = json.loads(blob[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ChecksumError(f"{path}: manifest corrupted") from None
    payload = blob[16 + n:]
    if hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    arrays = {}
    for rec in manifest["arrays"]:
        raw = payload[rec["offset"]:rec["offset"] + rec["nbytes"]]
        arrays[rec["name"]] = np.frombuffer(raw, dtype="<f4").reshape(rec["shape"]).copy()
    store = ParameterStore(
        arrays,
        config=manifest["config"],
        kind=manifest["kind"],
        step=manifest["step"],
        parent_hash=manifest["parent_hash"],
        extra=manifest["extra"],
    )
    if store.checksum() != manifest["checksum"]:
        raise ChecksumError(f"{path}: array checksum mismatch")
    if store.config_hash != manifest["config_hash"]:
        raise ConfigHashError(f"{path}: stored config does not match its hash")
    if expected_kind is not None and store.kind != expected_kind:
        raise CompatibilityError(f"{path}: expected a {expected_kind!r} checkpoint, found {store.kind!r}")
    if expected_config_hash is not None and store.config_hash != expected_config_hash:
        raise ConfigHashError(f"{path}: config hash {store.config_hash} != expected {expected_config_hash}")
    return store
