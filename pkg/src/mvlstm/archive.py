"""Bit-exact parameter archives.

Layout::

    b"MVPAR1"  u32 format version  u32 header length  header (JSON, utf-8)
    raw little-endian float64 arrays in header order
    u64 checksum (blake2b-64 of everything before it)

The header lists ``[name, shape]`` pairs plus free-form metadata (variant,
cell options, readout settings).
"""

import hashlib
import json
import struct

import numpy as np

from .cells import CellOptions, CellParams
from .fileio import atomic_write
from .model import ClassifierParams

MAGIC = b"MVPAR1"
FORMAT_VERSION = 1


class ArchiveError(ValueError):
    pass


def _digest(payload):
    return hashlib.blake2b(payload, digest_size=8).digest()


def dumps(arrays, meta=None):
    entries = [[name, list(np.shape(a))] for name, a in arrays.items()]
    header = json.dumps({"format_version": FORMAT_VERSION, "arrays": entries, "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header]
    parts.extend(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    body = b"".join(parts)
    return body + _digest(body)


def loads(blob):
    """Return ``(arrays, meta)``; raises ``ArchiveError`` on any inconsistency."""
    head = len(MAGIC) + 8
    if len(blob) < head + 8:
        raise ArchiveError("archive is truncated")
    if blob[:len(MAGIC)] != MAGIC:
        raise ArchiveError(f"bad magic {blob[:len(MAGIC)]!r}")
    body, check = blob[:-8], blob[-8:]
    if _digest(body) != check:
        raise ArchiveError("archive checksum mismatch")
    version, hlen = struct.unpack_from("<II", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ArchiveError(f"archive format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(body[head:head + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"unreadable archive header: {exc}") from None
    pos = head + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if pos + n > len(body):
            raise ArchiveError(f"array {name!r} is truncated")
        arrays[name] = np.frombuffer(body, dtype="<f8", count=n // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += n
    if pos != len(body):
        raise ArchiveError(f"{len(body) - pos} unexpected trailing bytes")
    return arrays, header["meta"]


def classifier_meta(params):
    return {
        "kind": "classifier",
        "variant": params.variant,
        "input_dim": params.cell.input_dim,
        "hidden_dim": params.cell.hidden_dim,
        "num_classes": params.num_classes,
        "options": params.cell.options.to_dict(),
        "tau_policy": params.tau_policy,
        "tau_seed": params.tau_seed,
        "pool": params.pool,
    }


def save_classifier(path, params, extra_meta=None):
    meta = classifier_meta(params)
    meta.update(extra_meta or {})
    atomic_write(path, dumps(params.named(), meta))


def classifier_from_arrays(arrays, meta):
    if meta.get("kind") != "classifier":
        raise ArchiveError("archive does not hold a classifier")
    options = CellOptions(**meta["options"])
    cell_arrays = {k: v for k, v in arrays.items() if k not in ("W_out", "b_out")}
    try:
        cell = CellParams(meta["variant"], meta["input_dim"], meta["hidden_dim"], cell_arrays, options)
        return ClassifierParams(cell, arrays["W_out"], arrays["b_out"], meta["tau_policy"],
                                meta["tau_seed"], meta["pool"])
    except (KeyError, ValueError) as exc:
        raise ArchiveError(f"archive contents do not form a valid classifier: {exc}") from None


def load_classifier(path):
    with open(path, "rb") as fh:
        arrays, meta = loads(fh.read())
    return classifier_from_arrays(arrays, meta)


def save_cell(path, params):
    meta = {"kind": "cell", "variant": params.variant, "input_dim": params.input_dim,
            "hidden_dim": params.hidden_dim, "options": params.options.to_dict()}
    atomic_write(path, dumps(params.arrays, meta))


def load_cell(path):
    with open(path, "rb") as fh:
        arrays, meta = loads(fh.read())
    if meta.get("kind") != "cell":
        raise ArchiveError("archive does not hold a bare cell")
    return CellParams(meta["variant"], meta["input_dim"], meta["hidden_dim"], arrays,
                      CellOptions(**meta["options"]))
