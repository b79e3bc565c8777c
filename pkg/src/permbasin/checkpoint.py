"""Binary checkpoint container for networks (and datasets), plus permutation files.

Layout (all integers little-endian)::

    magic        8 bytes   b"PNLC0001"  (last four characters are the format version)
    header_len   u32
    header       UTF-8 JSON: kind, architecture descriptor, metadata, optional permutation
    n_records    u32
    records      network: per layer
                     u8 kind (0 dense, 1 conv2d)  u8 activation (0 none, 1 relu)
                     u8 has_bias  u8 ndim  u32 dims[ndim]  u32 stride  u32 padding
                     f32 weight[prod(dims)]  f32 bias[dims[0]] (if has_bias)
                 dataset: per array
                     u16 name_len  name  u8 dtype (1 f32, 2 i64, 3 u8, 4 f64)  u8 ndim
                     u32 dims[ndim]  raw values
    crc32        u32 over every preceding byte
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .netcore import CONV, DENSE, RELU, Layer, Network
from .permalg import Permutation

MAGIC_PREFIX = b"PNLC"
VERSION = b"0001"
MAGIC = MAGIC_PREFIX + VERSION

_KINDS = {DENSE: 0, CONV: 1}
_ACTS = {None: 0, RELU: 1}
_DTYPES = {1: "<f4", 2: "<i8", 3: "u1", 4: "<f8"}
_DTYPE_CODES = {("f", 4): 1, ("i", 8): 2, ("u", 1): 3, ("f", 8): 4}


class CheckpointError(ValueError):
    pass


def _frame(header: dict, records: list[bytes]) -> bytes:
    hdr = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<I", len(hdr)) + hdr + struct.pack("<I", len(records)) + b"".join(records)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def _unframe(raw: bytes) -> tuple[dict, memoryview, int, int]:
    if len(raw) < 8 or raw[:4] != MAGIC_PREFIX:
        raise CheckpointError("bad magic: not a checkpoint file")
    if raw[4:8] != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {raw[4:8].decode(errors='replace')!r}")
    if len(raw) < 20:
        raise CheckpointError("truncated checkpoint")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError("CRC mismatch: checkpoint is corrupted or truncated")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12:12 + hlen].decode())
    (n,) = struct.unpack_from("<I", raw, 12 + hlen)
    return header, memoryview(raw)[:-4], 16 + hlen, n


def _take(buf: memoryview, off: int, n: int) -> tuple[bytes, int]:
    if off + n > len(buf):
        raise CheckpointError("truncated record")
    return bytes(buf[off:off + n]), off + n


def network_bytes(net: Network, meta: dict | None = None, perm: Permutation | None = None) -> bytes:
    header = {
        "kind": "network",
        "arch": net.arch_kind,
        "in_shape": list(net.in_shape),
        "num_classes": net.num_classes,
        "init_seed": net.init_seed,
        "layers": [{"kind": l.kind, "activation": l.activation, "shape": list(l.weight.shape),
                    "bias": l.bias is not None, "stride": l.stride, "padding": l.padding}
                   for l in net.layers],
        "meta": net.meta if meta is None else meta,
        "perm": None if perm is None else perm.to_lists(),
    }
    records = []
    for l in net.layers:
        w = np.ascontiguousarray(l.weight, dtype="<f4")
        rec = struct.pack("<BBBB", _KINDS[l.kind], _ACTS[l.activation], l.bias is not None, w.ndim)
        rec += struct.pack(f"<{w.ndim}I", *w.shape) + struct.pack("<II", l.stride, l.padding)
        rec += w.tobytes()
        if l.bias is not None:
            rec += np.ascontiguousarray(l.bias, dtype="<f4").tobytes()
        records.append(rec)
    return _frame(header, records)


def save_checkpoint(path, net: Network, meta: dict | None = None, perm: Permutation | None = None) -> None:
    Path(path).write_bytes(network_bytes(net, meta, perm))


def read_header(path) -> dict:
    header, _, _, n = _unframe(Path(path).read_bytes())
    header["n_records"] = n
    return header


def load_checkpoint(path) -> tuple[Network, dict]:
    """Returns the network and its metadata (``meta["perm"]`` holds an attached permutation)."""
    header, buf, off, n = _unframe(Path(path).read_bytes())
    if header.get("kind") != "network":
        raise CheckpointError("checkpoint does not hold a network")
    kinds = {v: k for k, v in _KINDS.items()}
    acts = {v: k for k, v in _ACTS.items()}
    layers = []
    for _ in range(n):
        head, off = _take(buf, off, 4)
        kind, act, has_bias, ndim = struct.unpack("<BBBB", head)
        raw, off = _take(buf, off, 4 * ndim + 8)
        dims = struct.unpack(f"<{ndim}I", raw[:4 * ndim])
        stride, padding = struct.unpack("<II", raw[4 * ndim:])
        count = int(np.prod(dims))
        raw, off = _take(buf, off, 4 * count)
        w = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
        b = None
        if has_bias:
            raw, off = _take(buf, off, 4 * dims[0])
            b = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        layers.append(Layer(kinds[kind], w, b, acts[act], stride, padding))
    if off != len(buf):
        raise CheckpointError("trailing bytes after last record")
    net = Network(tuple(layers), header["arch"], tuple(header["in_shape"]), header["num_classes"],
                  header["init_seed"], dict(header.get("meta") or {}))
    meta = dict(header.get("meta") or {})
    if header.get("perm") is not None:
        meta["perm"] = Permutation.from_lists(header["perm"])
    return net, meta


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Store named arrays (e.g. a synthetic dataset) in the same container."""
    records = []
    for name, a in arrays.items():
        a = np.asarray(a)
        code = _DTYPE_CODES.get((a.dtype.kind, a.dtype.itemsize))
        if code is None:
            raise CheckpointError(f"unsupported dtype {a.dtype} for {name}")
        a = np.ascontiguousarray(a, dtype=_DTYPES[code])
        nm = name.encode()
        rec = struct.pack("<H", len(nm)) + nm + struct.pack("<BB", code, a.ndim)
        rec += struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes()
        records.append(rec)
    Path(path).write_bytes(_frame({"kind": "arrays", "meta": meta or {}}, records))


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    header, buf, off, n = _unframe(Path(path).read_bytes())
    if header.get("kind") != "arrays":
        raise CheckpointError("checkpoint does not hold arrays")
    out = {}
    for _ in range(n):
        raw, off = _take(buf, off, 2)
        (nlen,) = struct.unpack("<H", raw)
        name, off = _take(buf, off, nlen)
        raw, off = _take(buf, off, 2)
        code, ndim = struct.unpack("<BB", raw)
        raw, off = _take(buf, off, 4 * ndim)
        dims = struct.unpack(f"<{ndim}I", raw)
        dt = np.dtype(_DTYPES[code])
        raw, off = _take(buf, off, dt.itemsize * int(np.prod(dims)))
        out[name.decode()] = np.frombuffer(raw, dtype=dt).reshape(dims).copy()
    return out, header.get("meta", {})


def save_dataset(path, ds) -> None:
    save_arrays(path, {"train_x": ds.train_x, "train_y": ds.train_y,
                       "test_x": ds.test_x, "test_y": ds.test_y},
                {"num_classes": ds.num_classes, "provenance": ds.provenance})


def load_dataset_file(path):
    from .datahub import Dataset

    arrays, meta = load_arrays(path)
    return Dataset(arrays["train_x"], arrays["train_y"], arrays["test_x"], arrays["test_y"],
                   int(meta["num_classes"]), provenance=dict(meta.get("provenance", {})))


def save_perm(path, perm: Permutation) -> None:
    Path(path).write_text(json.dumps(perm.to_lists()) + "\n")


def load_perm(path) -> Permutation:
    data = json.loads(Path(path).read_text())
    if data and isinstance(data[0], int):
        data = [data]
    return Permutation.from_lists(data)
