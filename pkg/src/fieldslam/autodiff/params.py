"""Named parameter storage with optimizer state and checkpoint I/O.

The checkpoint is a custom flat binary (magic, JSON header, raw little-endian
blocks). np.savez would be the obvious choice but zip archives embed
timestamps, and reruns of a pipeline must produce byte-identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .tape import Tape, Tensor

_MAGIC = b"FSLAMCP1"


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray


class ParamStore:
    """Dense float64 tensors addressed by name ("group/item" convention)."""

    def __init__(self) -> None:
        self._params: dict[str, Param] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        v = np.array(value, dtype=np.float64)
        self._params[name] = Param(v, np.zeros_like(v), np.zeros_like(v), np.zeros_like(v))

    def remove(self, name: str) -> None:
        del self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def get(self, name: str) -> Param:
        return self._params[name]

    def value(self, name: str) -> np.ndarray:
        return self._params[name].value

    def set_value(self, name: str, value: np.ndarray) -> None:
        p = self._params[name]
        v = np.asarray(value, dtype=np.float64)
        if v.shape != p.value.shape:
            raise ValueError(f"shape mismatch for {name!r}")
        p.value = v.copy()

    def items(self) -> Iterator[tuple[str, Param]]:
        for name in self.names():
            yield name, self._params[name]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def n_coords(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def tensors(self, tape: Tape, names: Optional[list[str]] = None) -> dict[str, Tensor]:
        """Bind parameters as leaf nodes; backward() folds their gradients
        back into this store."""
        out = {}
        for name in names if names is not None else self.names():
            param = self._params[name]
            leaf = Tensor(param.value, tape)
            tape.param_leaves.append((param, leaf))
            out[name] = leaf
        return out

    def snapshot(self) -> "ParamStore":
        other = ParamStore()
        other.step = self.step
        for name, p in self._params.items():
            other._params[name] = Param(
                p.value.copy(), np.zeros_like(p.grad), p.m.copy(), p.v.copy()
            )
        return other


def save_checkpoint(store: ParamStore, path: str | Path, meta: Optional[dict] = None) -> None:
    entries = []
    blocks = []
    for name, p in store.items():
        entries.append({"name": name, "shape": list(p.value.shape)})
        blocks.append(p.value.astype("<f8").tobytes(order="C"))
        blocks.append(p.m.astype("<f8").tobytes(order="C"))
        blocks.append(p.v.astype("<f8").tobytes(order="C"))
    header = json.dumps(
        {"version": 1, "step": store.step, "meta": meta or {}, "entries": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blocks:
            f.write(b)


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    if header.get("version") != 1:
        raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
    store = ParamStore()
    store.step = int(header["step"])
    off = 16 + hlen
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        arrs = []
        for _ in range(3):
            arrs.append(
                np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=off)
                .astype(np.float64)
                .reshape(shape)
            )
            off += nbytes
        store.add(entry["name"], arrs[0])
        p = store.get(entry["name"])
        p.m = arrs[1].copy()
        p.v = arrs[2].copy()
    return store, header.get("meta", {})
