"""Stage checkpoints: a single versioned binary file.

Byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"RRGCKPT\\0"
    8       4     format version (uint32)
    12      8     header length L (uint64)
    20      L     header, UTF-8 JSON with sorted keys
    20+L    P     tensor payload, tensors back to back in header order
    20+L+P  32    SHA-256 of bytes [0, 20+L+P)

The header holds ``arch`` (derain/review configs), ``stage_index``,
``fingerprint``, ``extra`` and a ``tensors`` table of
``{name, dtype, shape, offset, nbytes}`` entries (offset relative to the
payload start). Tensor names are ``derain.<param>``, ``review.<param>`` and
``optim.<path>`` for optimizer state. Non-tensor optimizer state is kept in
the header under ``optim``.

Readers accept any file whose version is ``<= FORMAT_VERSION``; new header
keys may be added in minor versions, existing keys keep their meaning.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .nets import ArchConfig, DerainNet, ReviewNet

MAGIC = b"RRGCKPT\0"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(RuntimeError):
    pass


class ArchMismatchError(CheckpointError):
    pass


@dataclass
class StageCheckpoint:
    derain_state: dict
    review_state: dict
    stage_index: int
    derain_arch: ArchConfig
    review_arch: ArchConfig
    optimizer_state: dict | None = None
    fingerprint: str = ""
    extra: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_nets(cls, derain: DerainNet, review: ReviewNet, stage_index: int, optimizer_state=None,
                  fingerprint: str = "", extra: dict | None = None) -> "StageCheckpoint":
        return cls(
            derain_state={k: v.detach().clone() for k, v in derain.state_dict().items()},
            review_state={k: v.detach().clone() for k, v in review.state_dict().items()},
            stage_index=int(stage_index),
            derain_arch=derain.arch,
            review_arch=review.arch,
            optimizer_state=optimizer_state,
            fingerprint=fingerprint,
            extra=dict(extra or {}),
        )

    def build_nets(self, dtype=None):
        """Fresh modules holding these parameters, in ``dtype`` or the stored one."""
        if dtype is None:
            dtype = next(iter(self.derain_state.values())).dtype
        derain = DerainNet(self.derain_arch).to(dtype)
        review = ReviewNet(self.review_arch).to(dtype)
        self.load_into(derain, review)
        return derain, review

    def load_into(self, derain: DerainNet | None = None, review: ReviewNet | None = None) -> None:
        if derain is not None:
            if derain.arch != self.derain_arch:
                raise ArchMismatchError(f"derain arch {derain.arch} does not match checkpoint {self.derain_arch}")
            derain.load_state_dict(self.derain_state)
        if review is not None:
            if review.arch != self.review_arch:
                raise ArchMismatchError(f"review arch {review.arch} does not match checkpoint {self.review_arch}")
            review.load_state_dict(self.review_state)

    def checksum(self, which: str = "all") -> str:
        """SHA-256 over parameter bytes, for frozen-parameter checks."""
        h = hashlib.sha256()
        states = {"derain": [self.derain_state], "review": [self.review_state],
                  "all": [self.derain_state, self.review_state]}[which]
        for state in states:
            for k in sorted(state):
                h.update(k.encode())
                h.update(state[k].detach().cpu().numpy().tobytes())
        return h.hexdigest()


def params_checksum(*modules) -> str:
    h = hashlib.sha256()
    for m in modules:
        for k, v in sorted(m.state_dict().items()):
            h.update(k.encode())
            h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# nested optimizer state <-> (json skeleton, tensor list)


def _flatten(obj, path, tensors):
    if isinstance(obj, torch.Tensor):
        name = "optim." + path
        tensors.append((name, obj))
        return {"__tensor__": name}
    if isinstance(obj, dict):
        return {"__dict__": [[_key(k), _flatten(v, f"{path}.{k}" if path else str(k), tensors)] for k, v in obj.items()]}
    if isinstance(obj, (list, tuple)):
        return {"__list__": [_flatten(v, f"{path}.{i}" if path else str(i), tensors) for i, v in enumerate(obj)],
                "tuple": isinstance(obj, tuple)}
    return obj


def _key(k):
    return {"int": k} if isinstance(k, int) else k


def _unflatten(obj, tensors):
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            return tensors[obj["__tensor__"]]
        if "__dict__" in obj:
            return {(k["int"] if isinstance(k, dict) else k): _unflatten(v, tensors) for k, v in obj["__dict__"]}
        if "__list__" in obj:
            seq = [_unflatten(v, tensors) for v in obj["__list__"]]
            return tuple(seq) if obj.get("tuple") else seq
    return obj


def save_checkpoint(ckpt: StageCheckpoint, path) -> Path:
    path = Path(path)
    tensors: list[tuple[str, torch.Tensor]] = []
    for k, v in ckpt.derain_state.items():
        tensors.append(("derain." + k, v))
    for k, v in ckpt.review_state.items():
        tensors.append(("review." + k, v))
    optim = _flatten(ckpt.optimizer_state, "", tensors) if ckpt.optimizer_state is not None else None

    table, chunks, offset = [], [], 0
    for name, t in tensors:
        arr = np.array(t.detach().cpu().numpy(), order="C")  # ascontiguousarray would make 0-d arrays 1-d
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    header = {
        "arch": {"derain": ckpt.derain_arch.to_dict(), "review": ckpt.review_arch.to_dict()},
        "stage_index": ckpt.stage_index,
        "fingerprint": ckpt.fingerprint,
        "extra": ckpt.extra,
        "optim": optim,
        "tensors": table,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    tmp.replace(path)
    return path


def load_checkpoint(path, derain_arch: ArchConfig | None = None, review_arch: ArchConfig | None = None) -> StageCheckpoint:
    """Read a checkpoint, verifying magic, version, checksum and optionally arch."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < _PREFIX.size + 32:
        raise CheckpointError(f"{path} is truncated")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"checksum mismatch in {path}: file is corrupt")
    magic, version, hlen = _PREFIX.unpack_from(body)
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not a stage checkpoint")
    if version > FORMAT_VERSION:
        raise CheckpointError(f"{path} has format version {version}, this build reads <= {FORMAT_VERSION}")
    header = json.loads(body[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    payload = body[_PREFIX.size + hlen:]

    tensors = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(arr)

    arch_d = ArchConfig(**header["arch"]["derain"])
    arch_r = ArchConfig(**header["arch"]["review"])
    if derain_arch is not None and derain_arch != arch_d:
        raise ArchMismatchError(f"checkpoint derain arch {arch_d} does not match expected {derain_arch}")
    if review_arch is not None and review_arch != arch_r:
        raise ArchMismatchError(f"checkpoint review arch {arch_r} does not match expected {review_arch}")

    return StageCheckpoint(
        derain_state={k[len("derain."):]: v for k, v in tensors.items() if k.startswith("derain.")},
        review_state={k[len("review."):]: v for k, v in tensors.items() if k.startswith("review.")},
        stage_index=header["stage_index"],
        derain_arch=arch_d,
        review_arch=arch_r,
        optimizer_state=_unflatten(header["optim"], tensors) if header["optim"] is not None else None,
        fingerprint=header["fingerprint"],
        extra=header["extra"],
        version=version,
    )
