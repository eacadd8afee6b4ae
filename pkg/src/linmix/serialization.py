"""Flat binary checkpoint format ("LMX1").

Layout, all little-endian:

    magic   4 bytes  b"LMX1"
    version u8       0x01
    count   u32      number of records
    records, sorted lexicographically by name (bytewise on the utf-8
    encoding, so the file is a canonical function of its contents):
        name_len u16
        name     utf-8 bytes
        ndim     u8 (0 for scalars)
        dims     ndim x u32
        data     float64 row-major

Only float64 payloads exist; callers store flags and counters as 0-d
arrays. Structured parameter sets (feature maps, mixer blocks) are
flattened to named arrays here so checkpoints stay a plain name -> array
mapping.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .exceptions import FormatError, ShapeError
from .linattn import FeatureMapParams, LinearAttentionBlockParams

MAGIC = b"LMX1"
VERSION = 1
_MAX_NDIM = 8


def pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    """Serialize a name -> array mapping to LMX1 bytes."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<BI", VERSION, len(arrays)))
    for name in sorted(arrays, key=lambda s: s.encode("utf-8")):
        raw = name.encode("utf-8")
        if not raw or len(raw) > 0xFFFF:
            raise FormatError(f"record name length {len(raw)} out of range")
        a = np.asarray(arrays[name], dtype=np.float64)
        if a.ndim > _MAX_NDIM:
            raise FormatError(f"record {name!r} has {a.ndim} dims, max {_MAX_NDIM}")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", a.ndim))
        for dim in a.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(a).astype("<f8").tobytes())
    return buf.getvalue()


def unpack_arrays(blob: bytes) -> dict[str, np.ndarray]:
    """Parse LMX1 bytes back to a name -> array mapping."""
    view = memoryview(blob)
    off = 0

    def take(k: int) -> memoryview:
        nonlocal off
        if off + k > len(view):
            raise FormatError(f"truncated blob: wanted {k} bytes at offset {off}, "
                              f"have {len(view) - off}")
        chunk = view[off:off + k]
        off += k
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError("bad magic, not an LMX1 blob")
    version, count = struct.unpack("<BI", take(5))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        if name in out:
            raise FormatError(f"duplicate record {name!r}")
        (ndim,) = struct.unpack("<B", take(1))
        if ndim > _MAX_NDIM:
            raise FormatError(f"record {name!r} has {ndim} dims, max {_MAX_NDIM}")
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64)
        out[name] = data.reshape(shape) if shape else np.float64(data[0])
    if off != len(view):
        raise FormatError(f"{len(view) - off} trailing bytes after last record")
    return out


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(pack_arrays(arrays))


def load_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return unpack_arrays(fh.read())


# ------------------------------------------- structured parameter flattening

_FEATUREMAP_FIELDS = ("linear", "inner_w", "inner_b", "norm_scale",
                      "norm_shift", "outer_w", "outer_b")


def featuremap_to_arrays(p: FeatureMapParams, prefix: str = "") -> dict[str, np.ndarray]:
    out = {prefix + f: getattr(p, f) for f in _FEATUREMAP_FIELDS}
    out[prefix + "leaky_slope"] = np.float64(p.leaky_slope)
    return out


def featuremap_from_arrays(arrays: dict[str, np.ndarray], prefix: str = "") -> FeatureMapParams:
    try:
        fields = {f: np.asarray(arrays[prefix + f], dtype=np.float64)
                  for f in _FEATUREMAP_FIELDS}
        slope = float(arrays[prefix + "leaky_slope"])
    except KeyError as exc:
        raise FormatError(f"missing feature-map record {exc.args[0]!r}") from None
    return FeatureMapParams(leaky_slope=slope, **fields)


def block_to_arrays(p: LinearAttentionBlockParams, prefix: str = "") -> dict[str, np.ndarray]:
    p.validate()
    out = {
        prefix + "w_v": p.w_v,
        prefix + "w_out": p.w_out,
        prefix + "heads": np.float64(p.heads),
        prefix + "flags": np.array([float(p.normalized), float(p.gated),
                                    float(p.rms_normed)]),
    }
    if p.gated:
        out[prefix + "gate_w"] = p.gate_w
    if p.rms_normed:
        out[prefix + "rms_scale"] = p.rms_scale
    for h in range(p.heads):
        out.update(featuremap_to_arrays(p.query_maps[h], f"{prefix}q{h}."))
        out.update(featuremap_to_arrays(p.key_maps[h], f"{prefix}k{h}."))
    return out


def block_from_arrays(arrays: dict[str, np.ndarray], prefix: str = "") -> LinearAttentionBlockParams:
    try:
        heads = int(arrays[prefix + "heads"])
        flags = np.asarray(arrays[prefix + "flags"], dtype=np.float64)
        w_v = np.asarray(arrays[prefix + "w_v"], dtype=np.float64)
        w_out = np.asarray(arrays[prefix + "w_out"], dtype=np.float64)
    except KeyError as exc:
        raise FormatError(f"missing block record {exc.args[0]!r}") from None
    if flags.shape != (3,):
        raise FormatError(f"block flags must be a 3-vector, got shape {flags.shape}")
    normalized, gated, rms_normed = (bool(v) for v in flags)
    try:
        gate_w = np.asarray(arrays[prefix + "gate_w"], dtype=np.float64) if gated else None
        rms_scale = np.asarray(arrays[prefix + "rms_scale"], dtype=np.float64) if rms_normed else None
    except KeyError as exc:
        raise FormatError(f"missing block record {exc.args[0]!r}") from None
    p = LinearAttentionBlockParams(
        query_maps=[featuremap_from_arrays(arrays, f"{prefix}q{h}.") for h in range(heads)],
        key_maps=[featuremap_from_arrays(arrays, f"{prefix}k{h}.") for h in range(heads)],
        w_v=w_v,
        w_out=w_out,
        normalized=normalized,
        gated=gated,
        rms_normed=rms_normed,
        heads=heads,
        gate_w=gate_w,
        rms_scale=rms_scale,
    )
    try:
        p.validate()
    except ShapeError as exc:
        raise FormatError(f"inconsistent block records: {exc}") from None
    return p
