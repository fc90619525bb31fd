"""Binary embedding archive and its JSON sidecar manifest.

Layout (all integers little-endian)::

    magic   8 bytes  b"TOPEMB1\\x00"
    m       u32      feature dimension
    count   u32      number of bags
    per bag:
        n_i     u32
        label   u8
        has_il  u8   1 if instance labels follow
        labels  n_i x u8   (only when has_il == 1)
        feats   n_i * m x f32

Features are stored in 32-bit precision and widened to 64-bit on load; that
is the only precision boundary in the pipeline. The manifest records one
entry per bag with the byte offset of its record.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .datagen import Bag
from .errors import ArchiveFormatError, ContractViolationError, DegenerateInputError

MAGIC = b"TOPEMB1\x00"
_HEADER = struct.Struct("<8sII")
_BAG_HEADER = struct.Struct("<IBB")


def manifest_path(path) -> Path:
    return Path(str(path) + ".manifest.json")


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_archive(path, bags, sources=None) -> dict:
    """Serialize bags to `path` and the manifest sidecar; returns the manifest."""
    path = Path(path)
    bags = list(bags)
    if not bags:
        raise DegenerateInputError("refusing to write an archive with no bags")
    m = int(np.asarray(bags[0].features).shape[1])
    if sources is None:
        sources = [f"bag-{i}" for i in range(len(bags))]
    elif len(sources) != len(bags):
        raise ContractViolationError("sources must match the number of bags")

    chunks = [_HEADER.pack(MAGIC, m, len(bags))]
    offset = _HEADER.size
    entries = []
    for i, bag in enumerate(bags):
        feats = np.ascontiguousarray(bag.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != m:
            raise ContractViolationError(
                f"bag {i} features must be (n_i, {m}), got {feats.shape}"
            )
        if feats.shape[0] == 0:
            raise DegenerateInputError(f"bag {i} is empty")
        if not np.all(np.isfinite(feats)):
            raise ContractViolationError(f"bag {i} has non-finite features")
        n_i = feats.shape[0]
        label = int(bag.label)
        if not 0 <= label <= 255:
            raise ContractViolationError(f"bag {i} label {label} does not fit u8")
        has_il = bag.instance_labels is not None
        record = [_BAG_HEADER.pack(n_i, label, 1 if has_il else 0)]
        if has_il:
            il = np.asarray(bag.instance_labels)
            if il.shape != (n_i,):
                raise ContractViolationError(f"bag {i} instance labels must be ({n_i},)")
            if not np.isin(il, (0, 1)).all():
                raise ContractViolationError(f"bag {i} instance labels must be 0/1")
            record.append(il.astype(np.uint8).tobytes())
        record.append(feats.astype("<f4").tobytes())
        entries.append(
            {"bag_id": i, "label": label, "n_i": n_i, "byte_offset": offset, "source": sources[i]}
        )
        blob = b"".join(record)
        chunks.append(blob)
        offset += len(blob)

    _atomic_write(path, b"".join(chunks))
    manifest = {"m": m, "bag_count": len(bags), "bags": entries}
    _atomic_write(manifest_path(path), json.dumps(manifest, indent=2).encode("utf-8"))
    return manifest


def load_archive(path, verify_manifest: bool = True) -> tuple[list[Bag], dict]:
    """Parse an archive back into bags (features widened to float64).

    When the manifest sidecar exists its offsets, sizes, and labels are
    cross-checked against the binary layout.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise ArchiveFormatError(f"{path}: truncated header")
    magic, m, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ArchiveFormatError(f"{path}: bad magic {magic!r}")
    if m < 1:
        raise ArchiveFormatError(f"{path}: feature dimension {m} is invalid")

    bags: list[Bag] = []
    offsets: list[int] = []
    offset = _HEADER.size
    for i in range(count):
        offsets.append(offset)
        if offset + _BAG_HEADER.size > len(data):
            raise ArchiveFormatError(f"{path}: truncated bag header for bag {i}")
        n_i, label, has_il = _BAG_HEADER.unpack_from(data, offset)
        offset += _BAG_HEADER.size
        if n_i == 0:
            raise ArchiveFormatError(f"{path}: bag {i} is empty")
        instance_labels = None
        if has_il not in (0, 1):
            raise ArchiveFormatError(f"{path}: bag {i} has_instance_labels flag is {has_il}")
        if has_il:
            if offset + n_i > len(data):
                raise ArchiveFormatError(f"{path}: truncated instance labels for bag {i}")
            instance_labels = np.frombuffer(data, dtype=np.uint8, count=n_i, offset=offset).copy()
            offset += n_i
        nbytes = 4 * n_i * m
        if offset + nbytes > len(data):
            raise ArchiveFormatError(f"{path}: truncated features for bag {i}")
        feats = (
            np.frombuffer(data, dtype="<f4", count=n_i * m, offset=offset)
            .astype(np.float64)
            .reshape(n_i, m)
        )
        offset += nbytes
        bags.append(Bag(features=feats, label=int(label), instance_labels=instance_labels))
    if offset != len(data):
        raise ArchiveFormatError(f"{path}: {len(data) - offset} trailing bytes")

    mpath = manifest_path(path)
    manifest = {}
    if mpath.exists():
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
        if verify_manifest:
            _verify_manifest(path, manifest, m, bags, offsets)
    return bags, manifest


def _verify_manifest(path, manifest, m, bags, offsets) -> None:
    if manifest.get("m") != m:
        raise ArchiveFormatError(f"{path}: manifest m={manifest.get('m')} but binary m={m}")
    if manifest.get("bag_count") != len(bags):
        raise ArchiveFormatError(
            f"{path}: manifest bag_count={manifest.get('bag_count')} but binary holds {len(bags)}"
        )
    entries = manifest.get("bags", [])
    if len(entries) != len(bags):
        raise ArchiveFormatError(f"{path}: manifest lists {len(entries)} bags, binary {len(bags)}")
    for entry, bag, off in zip(entries, bags, offsets):
        if entry.get("byte_offset") != off:
            raise ArchiveFormatError(
                f"{path}: bag {entry.get('bag_id')} manifest offset {entry.get('byte_offset')} != {off}"
            )
        if entry.get("n_i") != bag.size or entry.get("label") != bag.label:
            raise ArchiveFormatError(f"{path}: manifest entry mismatch for bag {entry.get('bag_id')}")
