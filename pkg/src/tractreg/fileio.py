"""Readers and writers for tractograms, keypoints and named-array containers.

Binary tractogram layout (little-endian)::

    b"TRGM" | u32 version=1 | u32 N | u32 P (0 if variable)
    N x ( u32 n_points | u32 label (0xFFFFFFFF = unlabeled) | n_points*3 f32 )

Text tractogram layout::

    TRGM v1 N=<n>
    <label>;r,a,s r,a,s ...        (one streamline per line, empty label = unlabeled)

Container layout, used for checkpoints and transforms::

    magic(4) | u32 version | u32 meta_len | meta (UTF-8 JSON, sorted keys)
    u32 n_arrays | n_arrays x ( u16 name_len | name | u32 ndim | ndim*u32 shape | f64 data )
"""
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .streamlines import UNLABELED, Tractogram, arc_length

TRACTOGRAM_MAGIC = b"TRGM"
TRACTOGRAM_VERSION = 1
NO_LABEL = 0xFFFFFFFF
_HEADER = struct.Struct("<4sIII")
_RECORD = struct.Struct("<II")


def _check_streamlines(tract):
    for i, s in enumerate(tract):
        if arc_length(s) == 0.0:
            raise ValidationError(f"streamline {i} has zero arc length")


def guess_format(path):
    return "text" if Path(path).suffix.lower() in {".txt", ".trgt"} else "binary"


# -- binary -----------------------------------------------------------------

def tractogram_to_bytes(tract):
    n, p = len(tract), tract.n_points
    labels = np.where(tract.labels == UNLABELED, NO_LABEL, tract.labels).astype("<u4")
    header = _HEADER.pack(TRACTOGRAM_MAGIC, TRACTOGRAM_VERSION, n, p)
    if p:
        rec = np.empty(n, dtype=[("n", "<u4"), ("label", "<u4"), ("xyz", "<f4", (p, 3))])
        rec["n"] = p
        rec["label"] = labels
        rec["xyz"] = tract.as_array()
        return header + rec.tobytes()
    parts = [header]
    for s, lab in zip(tract, labels):
        parts.append(_RECORD.pack(len(s), int(lab)))
        parts.append(np.asarray(s, dtype="<f4").tobytes())
    return b"".join(parts)


def tractogram_from_bytes(buf):
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, version, n, p = _HEADER.unpack_from(buf, 0)
    if magic != TRACTOGRAM_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != TRACTOGRAM_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if n == 0:
        raise ValidationError("tractogram file contains no streamlines")
    body = len(buf) - _HEADER.size
    if p and body == n * (_RECORD.size + 12 * p):
        rec = np.frombuffer(buf, offset=_HEADER.size, count=n,
                            dtype=[("n", "<u4"), ("label", "<u4"), ("xyz", "<f4", (p, 3))])
        if np.all(rec["n"] == p):
            labels = rec["label"].astype(np.int64)
            labels[rec["label"] == NO_LABEL] = UNLABELED
            return _validated(Tractogram.from_array(rec["xyz"].astype(np.float64), labels))
    offset = _HEADER.size
    chunks, lengths, labels = [], [], []
    for i in range(n):
        if offset + _RECORD.size > len(buf):
            raise FormatError(f"truncated record header of streamline {i}", offset)
        count, label = _RECORD.unpack_from(buf, offset)
        if count < 2:
            raise FormatError(f"streamline {i} has {count} points", offset)
        if p and count != p:
            raise FormatError(f"streamline {i} has {count} points, header says {p}", offset)
        offset += _RECORD.size
        nbytes = 12 * count
        if offset + nbytes > len(buf):
            raise FormatError(f"truncated coordinates of streamline {i}", offset)
        chunks.append(np.frombuffer(buf, dtype="<f4", count=3 * count, offset=offset))
        lengths.append(count)
        labels.append(UNLABELED if label == NO_LABEL else label)
        offset += nbytes
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes", offset)
    coords = np.concatenate(chunks).astype(np.float64)
    if not np.all(np.isfinite(coords)):
        raise ValidationError("tractogram contains non-finite coordinates")
    return _validated(Tractogram(coords, lengths, labels))


def _validated(tract):
    _check_streamlines(tract)
    return tract


# -- text -------------------------------------------------------------------

def tractogram_to_text(tract):
    lines = [f"TRGM v1 N={len(tract)}"]
    for s, lab in zip(tract, tract.labels):
        pts = " ".join(",".join(repr(float(v)) for v in pt) for pt in s)
        lines.append(f"{'' if lab == UNLABELED else int(lab)};{pts}")
    return "\n".join(lines) + "\n"


def tractogram_from_text(text):
    lines = text.splitlines()
    if not lines:
        raise FormatError("empty file", line=1)
    head = lines[0].split()
    if len(head) != 3 or head[0] != "TRGM" or not head[2].startswith("N="):
        raise FormatError(f"bad header {lines[0]!r}", line=1)
    if head[1] != "v1":
        raise FormatError(f"unsupported version {head[1]!r}", line=1)
    try:
        n = int(head[2][2:])
    except ValueError:
        raise FormatError(f"bad streamline count {head[2]!r}", line=1) from None
    body = [(i, ln) for i, ln in enumerate(lines[1:], start=2) if ln.strip()]
    if n == 0 or not body:
        raise ValidationError("tractogram file contains no streamlines")
    if len(body) != n:
        raise FormatError(f"header says N={n} but found {len(body)} streamlines", line=1)
    streamlines, labels = [], []
    for lineno, line in body:
        label, sep, rest = line.partition(";")
        if not sep:
            raise FormatError("missing ';' after label", line=lineno)
        try:
            labels.append(int(label) if label.strip() else UNLABELED)
            pts = [[float(v) for v in tok.split(",")] for tok in rest.split()]
        except ValueError as exc:
            raise FormatError(str(exc), line=lineno) from None
        if any(len(pt) != 3 for pt in pts):
            raise FormatError("points need exactly 3 coordinates", line=lineno)
        if len(pts) < 2:
            raise FormatError("streamline needs at least 2 points", line=lineno)
        streamlines.append(pts)
    return _validated(Tractogram.from_streamlines(streamlines, labels))


# -- public tractogram api -----------------------------------------------------

def _atomic_write(path, data):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def save_tractogram(tract, path, format=None):
    format = format or guess_format(path)
    if format == "binary":
        _atomic_write(path, tractogram_to_bytes(tract))
    elif format == "text":
        _atomic_write(path, tractogram_to_text(tract).encode())
    else:
        raise ValueError(f"unknown format {format!r}")


def load_tractogram(path, format=None):
    format = format or guess_format(path)
    data = Path(path).read_bytes()
    if format == "binary":
        return tractogram_from_bytes(data)
    if format == "text":
        return tractogram_from_text(data.decode())
    raise ValueError(f"unknown format {format!r}")


def save_keypoints_csv(keypoints, path):
    rows = ["k,r,a,s"]
    rows += [f"{k},{r!r},{a!r},{s!r}" for k, (r, a, s) in enumerate(np.asarray(keypoints, float).tolist())]
    _atomic_write(path, ("\n".join(rows) + "\n").encode())


def load_keypoints_csv(path):
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "k,r,a,s":
        raise FormatError("keypoint CSV must start with header 'k,r,a,s'", line=1)
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 4:
            raise FormatError("expected 4 columns", line=lineno)
        out.append([float(v) for v in parts[1:]])
    return np.array(out).reshape(-1, 3)


# -- containers ----------------------------------------------------------------

def container_to_bytes(magic, version, meta, arrays):
    """Serialize named float64 arrays plus a JSON metadata block."""
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [struct.pack("<4sII", magic, version, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        enc = name.encode()
        parts.append(struct.pack("<H", len(enc)) + enc)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def container_from_bytes(buf, magic, version):
    """Inverse of :func:`container_to_bytes`; returns ``(meta, arrays)``."""
    def take(fmt, offset):
        size = struct.calcsize(fmt)
        if offset + size > len(buf):
            raise FormatError("truncated file", offset)
        return struct.unpack_from(fmt, buf, offset), offset + size

    (got_magic, got_version, meta_len), off = take("<4sII", 0)
    if got_magic != magic:
        raise FormatError(f"bad magic {got_magic!r}, expected {magic!r}", 0)
    if got_version != version:
        raise FormatError(f"unsupported version {got_version}", 4)
    if off + meta_len > len(buf):
        raise FormatError("truncated metadata", off)
    try:
        meta = json.loads(buf[off:off + meta_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt metadata: {exc}", off) from None
    off += meta_len
    (n_arrays,), off = take("<I", off)
    arrays = {}
    for _ in range(n_arrays):
        (name_len,), off = take("<H", off)
        if off + name_len > len(buf):
            raise FormatError("truncated array name", off)
        name = buf[off:off + name_len].decode()
        off += name_len
        (ndim,), off = take("<I", off)
        shape, off = take(f"<{ndim}I", off)
        count = int(np.prod(shape, dtype=np.int64))
        if off + 8 * count > len(buf):
            raise FormatError(f"truncated data of array {name!r}", off)
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes", off)
    return meta, arrays


def write_container(path, magic, version, meta, arrays):
    _atomic_write(path, container_to_bytes(magic, version, meta, arrays))


def read_container(path, magic, version):
    return container_from_bytes(Path(path).read_bytes(), magic, version)
