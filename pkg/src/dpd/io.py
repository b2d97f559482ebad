"""Binary tensor container (``DPDS``) and the JSON side files.

Layout, all little-endian::

    b"DPDS" | version u32 | record count u32 | reserved u32
    per record: name length u16 | UTF-8 name | dtype tag u8 | rank u8
                | dims u32 * rank | raw payload

Only float64 and uint32 payloads are stored; that covers parameters,
images and labels while keeping write-then-read bit exact.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .autodiff import ParamTree

__all__ = [
    "MAGIC",
    "VERSION",
    "ContainerError",
    "write_container",
    "read_container",
    "save_params",
    "load_params",
    "save_dataset",
    "load_dataset",
    "save_distilled",
    "load_distilled",
    "write_json",
    "read_json",
    "file_sha256",
]

MAGIC = b"DPDS"
VERSION = 1
_HEADER = struct.Struct("<4sIII")
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<u4")}
_TAGS = {np.dtype("<f8"): 0, np.dtype("<u4"): 1}


class ContainerError(ValueError):
    """Malformed container; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int, path=None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (at byte offset {offset})")
        self.offset = offset


def _as_storable(name: str, arr) -> np.ndarray:
    a = np.asarray(arr)
    if a.dtype.kind == "f":
        return np.asarray(a, dtype="<f8", order="C")
    if a.dtype.kind in "iub":
        if a.size and (a.min() < 0 or a.max() > 0xFFFFFFFF):
            raise ValueError(f"record {name!r}: integer values out of uint32 range")
        return np.asarray(a, dtype="<u4", order="C")
    raise TypeError(f"record {name!r}: unsupported dtype {a.dtype}")


def encode_container(records) -> bytes:
    items = list(records.items()) if hasattr(records, "items") else list(records)
    out = [_HEADER.pack(MAGIC, VERSION, len(items), 0)]
    seen = set()
    for name, arr in items:
        if name in seen:
            raise ValueError(f"duplicate record name {name!r}")
        seen.add(name)
        a = _as_storable(name, arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or a.ndim > 0xFF:
            raise ValueError(f"record {name!r}: name or rank too large")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", _TAGS[a.dtype], a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.tobytes(order="C"))
    return b"".join(out)


def decode_container(buf: bytes, path=None) -> dict:
    def need(pos, n, what):
        if pos + n > len(buf):
            raise ContainerError(f"truncated {what}: need {n} bytes, {len(buf) - pos} left", pos, path)

    need(0, _HEADER.size, "header")
    magic, version, count, _ = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}, expected {MAGIC!r}", 0, path)
    if version != VERSION:
        raise ContainerError(f"unsupported version {version}", 4, path)
    pos = _HEADER.size
    records = {}
    for i in range(count):
        need(pos, 2, f"name length of record {i}")
        (n_name,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(pos, n_name, f"name of record {i}")
        try:
            name = buf[pos : pos + n_name].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerError(f"record {i} name is not UTF-8", pos, path) from exc
        pos += n_name
        need(pos, 2, f"dtype/rank of {name!r}")
        tag, rank = struct.unpack_from("<BB", buf, pos)
        if tag not in _DTYPES:
            raise ContainerError(f"unknown dtype tag {tag} in {name!r}", pos, path)
        pos += 2
        need(pos, 4 * rank, f"dims of {name!r}")
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        dtype = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        need(pos, nbytes, f"payload of {name!r}")
        records[name] = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(buf):
        raise ContainerError(f"{len(buf) - pos} trailing bytes after {count} records", pos, path)
    return records


def write_container(path, records) -> None:
    """Write ``records`` (mapping or ``(name, array)`` pairs) atomically."""
    path = Path(path)
    data = encode_container(records)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def read_container(path) -> dict:
    return decode_container(Path(path).read_bytes(), path)


def save_params(path, params: ParamTree) -> None:
    write_container(path, params.arrays())


def load_params(path) -> ParamTree:
    return ParamTree(read_container(path))


def save_dataset(path, dataset) -> None:
    """Toy dataset: both splits plus hidden modes and attributes."""
    recs = {}
    for split in ("train", "test"):
        s = getattr(dataset, split)
        recs[f"{split}/images"] = s.images
        recs[f"{split}/labels"] = s.labels
        recs[f"{split}/modes"] = s.modes
        for k, v in sorted(s.attrs.items()):
            recs[f"{split}/attrs/{k}"] = v
    write_container(path, recs)


def load_dataset(path, spec):
    from .data import Split, ToyDataset

    recs = read_container(path)
    splits = {}
    for split in ("train", "test"):
        try:
            attrs = {k.rsplit("/", 1)[1]: v for k, v in recs.items() if k.startswith(f"{split}/attrs/")}
            splits[split] = Split(
                recs[f"{split}/images"],
                recs[f"{split}/labels"].astype(np.int64),
                recs[f"{split}/modes"].astype(np.int64),
                attrs,
            )
        except KeyError as exc:
            raise ValueError(f"{path}: missing dataset record {exc.args[0]!r}") from None
    return ToyDataset(spec, splits["train"], splits["test"])


def save_distilled(path, ds) -> None:
    """Images and labels only; the manifest goes to a JSON side file."""
    write_container(path, {"images": ds.images, "labels": ds.labels})


def load_distilled(path, manifest: dict | None = None):
    from .pipeline import DistilledDataset

    recs = read_container(path)
    if "images" not in recs or "labels" not in recs:
        raise ValueError(f"{path}: not a distilled dataset (need 'images' and 'labels')")
    return DistilledDataset(recs["images"], recs["labels"].astype(np.int64), manifest or {})


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
