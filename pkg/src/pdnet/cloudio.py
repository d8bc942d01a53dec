"""Point-cloud file formats: native ``PDCLOUD1`` binary and ASCII PLY.

PDCLOUD1 layout (little-endian)::

    magic  b"PDCLOUD1"
    u8     flags  (bit0 features, bit1 normals, bit2 labels)
    u64    N
    u64    C      (only if features)
    f64    positions N*3
    f64    features  N*C   (optional)
    f64    normals   N*3   (optional)
    i64    labels    N     (optional)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .geometry import PointCloud

MAGIC = b"PDCLOUD1"
HAS_FEATURES, HAS_NORMALS, HAS_LABELS = 1, 2, 4


class CloudFormatError(ValueError):
    pass


class MalformedHeaderError(CloudFormatError):
    pass


class TruncatedPayloadError(CloudFormatError):
    pass


class NonFiniteValueError(CloudFormatError):
    pass


def encode_cloud(cloud: PointCloud) -> bytes:
    flags = 0
    flags |= HAS_FEATURES if cloud.features is not None else 0
    flags |= HAS_NORMALS if cloud.normals is not None else 0
    flags |= HAS_LABELS if cloud.labels is not None else 0
    parts = [MAGIC, struct.pack("<BQ", flags, len(cloud))]
    if cloud.features is not None:
        parts.append(struct.pack("<Q", cloud.features.shape[1]))
    parts.append(np.ascontiguousarray(cloud.positions, dtype="<f8").tobytes())
    if cloud.features is not None:
        parts.append(np.ascontiguousarray(cloud.features, dtype="<f8").tobytes())
    if cloud.normals is not None:
        parts.append(np.ascontiguousarray(cloud.normals, dtype="<f8").tobytes())
    if cloud.labels is not None:
        parts.append(np.ascontiguousarray(cloud.labels, dtype="<i8").tobytes())
    return b"".join(parts)


def decode_cloud(buf: bytes) -> PointCloud:
    if len(buf) < len(MAGIC) + 9 or buf[: len(MAGIC)] != MAGIC:
        raise MalformedHeaderError("missing PDCLOUD1 magic or header")
    flags, n = struct.unpack_from("<BQ", buf, len(MAGIC))
    if flags & ~(HAS_FEATURES | HAS_NORMALS | HAS_LABELS):
        raise MalformedHeaderError(f"unknown flag bits {flags:#x}")
    pos = len(MAGIC) + 9
    c = 0
    if flags & HAS_FEATURES:
        if len(buf) < pos + 8:
            raise MalformedHeaderError("header ends before channel count")
        (c,) = struct.unpack_from("<Q", buf, pos)
        pos += 8

    def section(dtype, count):
        nonlocal pos
        nbytes = 8 * count
        if pos + nbytes > len(buf):
            raise TruncatedPayloadError("payload shorter than header declares")
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).copy()
        pos += nbytes
        return arr

    positions = section("<f8", 3 * n).reshape(n, 3)
    features = section("<f8", n * c).reshape(n, c) if flags & HAS_FEATURES else None
    normals = section("<f8", 3 * n).reshape(n, 3) if flags & HAS_NORMALS else None
    labels = section("<i8", n) if flags & HAS_LABELS else None
    if pos != len(buf):
        raise MalformedHeaderError("trailing bytes after payload")
    for arr in (positions, features, normals):
        if arr is not None and not np.all(np.isfinite(arr)):
            raise NonFiniteValueError("cloud contains non-finite values")
    return PointCloud(positions, features, normals, labels)


def write_cloud(cloud: PointCloud, path) -> None:
    for arr in (cloud.positions, cloud.features, cloud.normals):
        if arr is not None and not np.all(np.isfinite(arr)):
            raise NonFiniteValueError("refusing to write non-finite values")
    Path(path).write_bytes(encode_cloud(cloud))


def read_cloud(path) -> PointCloud:
    return decode_cloud(Path(path).read_bytes())


# -- PLY -----------------------------------------------------------------

def write_ply(path, positions, normals=None, labels=None) -> None:
    """ASCII PLY with x y z, optional nx ny nz and optional uchar label."""
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    header = ["ply", "format ascii 1.0", f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    cols = [positions]
    if normals is not None:
        header += ["property float nx", "property float ny", "property float nz"]
        cols.append(np.asarray(normals, dtype=np.float64))
    if labels is not None:
        labels = np.asarray(labels)
        if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
            raise CloudFormatError("PLY labels must fit in an unsigned byte")
        header.append("property uchar label")
    header.append("end_header")
    lines = []
    for i in range(n):
        vals = " ".join(f"{v:.9g}" for c in cols for v in c[i])
        if labels is not None:
            vals += f" {int(labels[i])}"
        lines.append(vals)
    Path(path).write_text("\n".join(header + lines) + "\n", encoding="ascii")


def read_ply(path) -> dict[str, np.ndarray]:
    """Parse an ASCII PLY vertex element into a dict of property columns."""
    text = Path(path).read_text(encoding="ascii", errors="strict")
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MalformedHeaderError("missing 'ply' magic line")
    props, count, fmt, in_vertex, body = [], None, None, False, None
    for i, line in enumerate(lines[1:], start=1):
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise MalformedHeaderError("list properties on vertices are not supported")
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body = lines[i + 1:]
            break
    if body is None or count is None or fmt != "ascii":
        raise MalformedHeaderError("incomplete or non-ASCII PLY header")
    if len(body) < count:
        raise TruncatedPayloadError(f"header declares {count} vertices, found {len(body)}")
    data = np.array([row.split()[: len(props)] for row in body[:count]], dtype=np.float64).reshape(count, len(props))
    if not np.all(np.isfinite(data)):
        raise NonFiniteValueError("PLY contains non-finite values")
    return {name: data[:, j] for j, name in enumerate(props)}
