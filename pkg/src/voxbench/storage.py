"""On-disk formats: flat binary volumes and checkpoint archives.

Volume files (``.vox``) are a documented flat binary, little-endian throughout:

    bytes 0..7    magic ``b"VOXBENCH"``
    bytes 8..11   u32 format version (currently 1)
    bytes 12..15  u32 reserved (0)
    u32           dtype code (0=float32, 1=float64, 2=uint8, 3=int32)
    3 x u32       shape (slowest to fastest axis)
    3 x f64       spacing in mm
    u32           metadata length in bytes
    ...           metadata, canonical JSON (id, modality, kind, class names)
    ...           voxel payload, row-major (C order)

Checkpoints (``.ckpt``) are zip archives holding one ``.npy`` member per layer
path under ``arrays/`` plus ``manifest.json`` (config hash, step count, RNG
state). Zip timestamps are pinned so identical contents yield identical bytes.
"""

from __future__ import annotations

import io
import json
import struct
import zipfile
from pathlib import Path

import numpy as np

from .phantoms import LabelMap, Volume

MAGIC = b"VOXBENCH"
FORMAT_VERSION = 1

_DTYPE_CODES = {0: "<f4", 1: "<f8", 2: "u1", 3: "<i4"}
_CODE_FOR_KIND = {("f", 4): 0, ("f", 8): 1, ("u", 1): 2, ("i", 4): 3}

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _write_array(path, array: np.ndarray, spacing, meta: dict) -> None:
    key = (array.dtype.kind, array.dtype.itemsize)
    if key not in _CODE_FOR_KIND:
        raise ValueError(f"unsupported dtype {array.dtype} for volume file")
    code = _CODE_FOR_KIND[key]
    payload = np.ascontiguousarray(array.astype(_DTYPE_CODES[code], copy=False))
    meta_bytes = _canonical_json(meta)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, 0))
        f.write(struct.pack("<I", code))
        f.write(struct.pack("<III", *array.shape))
        f.write(struct.pack("<ddd", *spacing))
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(payload.tobytes(order="C"))


def _read_array(path):
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a voxbench volume file (bad magic {magic!r})")
        version, _reserved = struct.unpack("<II", f.read(8))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        (code,) = struct.unpack("<I", f.read(4))
        if code not in _DTYPE_CODES:
            raise ValueError(f"{path}: unknown dtype code {code}")
        shape = struct.unpack("<III", f.read(12))
        spacing = struct.unpack("<ddd", f.read(24))
        (meta_len,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(meta_len)) if meta_len else {}
        count = int(np.prod(shape))
        data = np.fromfile(f, dtype=_DTYPE_CODES[code], count=count)
        if data.size != count:
            raise ValueError(f"{path}: truncated payload")
    return data.reshape(shape), spacing, meta


def save_volume(path, volume: Volume) -> None:
    meta = {"kind": "volume", "id": volume.id, "modality": volume.modality}
    _write_array(path, volume.voxels, volume.spacing, meta)


def load_volume(path) -> Volume:
    data, spacing, meta = _read_array(path)
    if meta.get("kind") != "volume":
        raise ValueError(f"{path}: expected a volume file, got kind={meta.get('kind')!r}")
    return Volume(
        voxels=data,
        spacing=tuple(spacing),
        modality=meta["modality"],
        id=meta["id"],
    )


def save_labels(path, labels: LabelMap, spacing=(1.0, 1.0, 1.0)) -> None:
    meta = {"kind": "labels", "class_names": list(labels.class_names)}
    _write_array(path, labels.labels.astype("u1"), spacing, meta)


def load_labels(path) -> LabelMap:
    data, _spacing, meta = _read_array(path)
    if meta.get("kind") != "labels":
        raise ValueError(f"{path}: expected a label file, got kind={meta.get('kind')!r}")
    return LabelMap(labels=data, class_names=tuple(meta["class_names"]))


def save_checkpoint(path, arrays: dict, manifest: dict) -> None:
    """Write a checkpoint archive; array insertion order is normalized."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_ZIP_DATE)
        zf.writestr(info, json.dumps(manifest, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            # note: ascontiguousarray would promote 0-dim arrays to 1-dim
            np.lib.format.write_array(buf, np.asarray(arrays[name]))
            info = zipfile.ZipInfo(f"arrays/{name}.npy", date_time=_ZIP_DATE)
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read back (arrays, manifest) from a checkpoint archive."""
    arrays = {}
    with zipfile.ZipFile(path, "r") as zf:
        with zf.open("manifest.json") as f:
            manifest = json.load(f)
        for member in zf.namelist():
            if member.startswith("arrays/") and member.endswith(".npy"):
                with zf.open(member) as f:
                    arrays[member[len("arrays/"):-len(".npy")]] = np.lib.format.read_array(f)
    return arrays, manifest
