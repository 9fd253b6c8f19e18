"""Single-file container for models and labeled datasets.

Layout::

    magic  b"MGCK"          4 bytes
    version                 uint32 little-endian
    header length           uint64 little-endian
    header                  UTF-8 JSON, keys sorted
    blobs                   little-endian float32 arrays, back to back
    sha256                  32 bytes over everything above

The checksum is verified before the header or any blob is interpreted.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .data import LabeledImageSet
from .errors import CorruptionError, VersionError
from .layers import LAYER_KINDS, Conv2d, Dense, MaxPool2d, Model, ParametricActivation, Flatten

MAGIC = b"MGCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DIGEST = 32
_BLOB_DTYPE = np.dtype("<f4")


def _pack(header, blobs):
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [_PREFIX.pack(MAGIC, FORMAT_VERSION, len(payload)), payload]
    parts += [np.ascontiguousarray(b, dtype=_BLOB_DTYPE).tobytes() for b in blobs]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def _unpack(buf, path):
    if len(buf) < _PREFIX.size + _DIGEST:
        raise CorruptionError(f"{path}: truncated ({len(buf)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CorruptionError(f"{path}: not a checkpoint (magic {magic!r})")
    body, digest = buf[:-_DIGEST], buf[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptionError(f"{path}: checksum mismatch, file is damaged or truncated")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    start = _PREFIX.size
    try:
        header = json.loads(body[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable header ({exc})") from None
    return header, body, start + hlen


def _blob_records(arrays, offset=0):
    recs = []
    for name, arr in arrays:
        recs.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += int(arr.size)
    return recs


def _read_blobs(body, start, records, path):
    floats = np.frombuffer(body, dtype=_BLOB_DTYPE, offset=start)
    expected = sum(r["count"] for r in records)
    if len(body) - start != 4 * expected:
        raise CorruptionError(f"{path}: blob section holds {len(body) - start} bytes, header needs {4 * expected}")
    return {
        r["name"]: floats[r["offset"]:r["offset"] + r["count"]].astype(np.float32).reshape(r["shape"])
        for r in records
    }


# -- models ------------------------------------------------------------------


def save_checkpoint(model, path, seed=None, metadata=None):
    """Write ``model`` (cast to float32) to ``path``."""
    model = model.astype(np.float32)
    layers, arrays = [], []
    for i, layer in enumerate(model.layers):
        names = list(layer.params())
        layers.append({"kind": layer.kind, "hyper": layer.hyper(), "params": names})
        arrays += [(f"{i}.{n}", layer.params()[n].data) for n in names]
    header = {
        "type": "model",
        "arch": {
            "name": model.name,
            "input_shape": list(model.input_shape),
            "num_classes": model.num_classes,
        },
        "seed": seed,
        "metadata": metadata or {},
        "layers": layers,
        "blobs": _blob_records(arrays),
    }
    Path(path).write_bytes(_pack(header, [a for _, a in arrays]))


def _build_layer(rec, params):
    kind, hyper = rec["kind"], rec["hyper"]
    if kind not in LAYER_KINDS:
        raise CorruptionError(f"unknown layer kind {kind!r}")
    if kind == "dense":
        return Dense(params["W"], params["b"])
    if kind == "conv2d":
        return Conv2d(params["kernel"], params["bias"], hyper["stride"], hyper["padding"])
    if kind == "activation":
        return ParametricActivation(
            hyper["act"],
            raw_alpha=params["raw_alpha"],
            beta=hyper["beta"],
            pinned=hyper["pinned"],
            parametrization=hyper["parametrization"],
        )
    if kind == "maxpool":
        return MaxPool2d(hyper["size"])
    return Flatten()


def read_header(path):
    path = Path(path)
    header, _, _ = _unpack(path.read_bytes(), path)
    return header


def load_checkpoint(path):
    """Read a model written by :func:`save_checkpoint`."""
    path = Path(path)
    header, body, start = _unpack(path.read_bytes(), path)
    if header.get("type") != "model":
        raise CorruptionError(f"{path}: holds a {header.get('type')!r}, not a model")
    blobs = _read_blobs(body, start, header["blobs"], path)
    layers = []
    try:
        for i, rec in enumerate(header["layers"]):
            layers.append(_build_layer(rec, {n: blobs[f"{i}.{n}"] for n in rec["params"]}))
        arch = header["arch"]
        return Model(layers, arch["input_shape"], arch["num_classes"], arch["name"])
    except (KeyError, TypeError) as exc:
        raise CorruptionError(f"{path}: malformed layer records ({exc})") from None


# -- datasets ----------------------------------------------------------------


def save_dataset(dataset, path, metadata=None):
    """Export a labeled set (images, labels and provenance flags)."""
    arrays = [
        ("images", dataset.images),
        ("labels", dataset.labels.astype(np.float32)),
        ("poisoned", dataset.poisoned.astype(np.float32)),
    ]
    header = {
        "type": "dataset",
        "num_classes": dataset.num_classes,
        "metadata": metadata or {},
        "blobs": _blob_records(arrays),
    }
    Path(path).write_bytes(_pack(header, [a for _, a in arrays]))


def load_dataset(path):
    path = Path(path)
    header, body, start = _unpack(path.read_bytes(), path)
    if header.get("type") != "dataset":
        raise CorruptionError(f"{path}: holds a {header.get('type')!r}, not a dataset")
    blobs = _read_blobs(body, start, header["blobs"], path)
    return LabeledImageSet(
        blobs["images"],
        blobs["labels"].astype(np.int64),
        header["num_classes"],
        blobs["poisoned"].astype(bool),
    )
