"""Point-cloud persistence: a small binary format plus a CSV fallback.

Binary layout (everything little-endian): magic "SLPC", u32 version (1),
u32 N, u32 dims (3 or 6), u32 has_labels, then N*dims float32 row-major
coordinates (+extras) and, when labeled, N int32 labels. CSV rows are
x,y,z[,nx,ny,nz][,label] with an optional header line.
"""

from __future__ import annotations

import struct

import numpy as np

from .geom import PointCloud

MAGIC = b"SLPC"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class FormatError(ValueError):
    """Malformed point file or checkpoint; message names the byte offset."""


def save_points(path, cloud: PointCloud) -> None:
    if str(path).endswith(".csv"):
        _save_csv(path, cloud)
        return
    dims = 3 if cloud.extras is None else 3 + cloud.extras.shape[1]
    if dims not in (3, 6):
        raise ValueError(f"point files support 3 or 6 dims, got {dims}")
    has_labels = cloud.labels is not None
    payload = cloud.coords.astype("<f4")
    if cloud.extras is not None:
        payload = np.concatenate([payload, cloud.extras.astype("<f4")], axis=1)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, cloud.n, dims, int(has_labels)))
        f.write(np.ascontiguousarray(payload).tobytes())
        if has_labels:
            labels = np.broadcast_to(np.asarray(cloud.labels, dtype="<i4"),
                                     (cloud.n,))
            f.write(np.ascontiguousarray(labels).tobytes())


def load_points(path) -> PointCloud:
    if str(path).endswith(".csv"):
        return _load_csv(path)
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise FormatError(
            f"truncated header: expected {_HEADER.size} bytes, got {len(raw)}")
    magic, version, n, dims, has_labels = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    if dims not in (3, 6):
        raise FormatError(f"dims must be 3 or 6, got {dims} (offset 12)")
    expected = _HEADER.size + n * dims * 4 + (n * 4 if has_labels else 0)
    if len(raw) != expected:
        raise FormatError(
            f"payload length mismatch: expected {expected} bytes, got {len(raw)}"
            f" (payload starts at offset {_HEADER.size})")
    off = _HEADER.size
    data = np.frombuffer(raw, dtype="<f4", count=n * dims, offset=off)
    data = data.reshape(n, dims).copy()
    labels = None
    if has_labels:
        off += n * dims * 4
        labels = np.frombuffer(raw, dtype="<i4", count=n, offset=off).copy()
    return PointCloud(coords=data[:, :3],
                      extras=data[:, 3:] if dims > 3 else None,
                      labels=labels)


def _save_csv(path, cloud: PointCloud) -> None:
    cols = [cloud.coords]
    header = "x,y,z"
    if cloud.extras is not None:
        cols.append(cloud.extras)
        header += ",nx,ny,nz"
    rows = np.concatenate(cols, axis=1)
    with open(path, "w") as f:
        if cloud.labels is not None:
            header += ",label"
        f.write(header + "\n")
        labels = (np.broadcast_to(np.asarray(cloud.labels), (cloud.n,))
                  if cloud.labels is not None else None)
        for i in range(cloud.n):
            line = ",".join(f"{v:.9g}" for v in rows[i])
            if labels is not None:
                line += f",{int(labels[i])}"
            f.write(line + "\n")


def _load_csv(path) -> PointCloud:
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                if lineno == 1:
                    continue  # header line
                raise FormatError(f"unparseable CSV row at line {lineno}")
    if not rows:
        raise FormatError("CSV contains no data rows")
    width = len(rows[0])
    if width not in (3, 4, 6, 7):
        raise FormatError(f"CSV rows must have 3, 4, 6 or 7 columns, got {width}")
    if any(len(r) != width for r in rows):
        raise FormatError("inconsistent CSV column counts")
    arr = np.asarray(rows, dtype=np.float32)
    has_labels = width in (4, 7)
    dims = width - (1 if has_labels else 0)
    labels = arr[:, -1].astype(np.int32) if has_labels else None
    return PointCloud(coords=arr[:, :3],
                      extras=arr[:, 3:dims] if dims > 3 else None,
                      labels=labels)
