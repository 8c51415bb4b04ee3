"""Binary feature archive ("AWEF"): bit-exact storage of feature matrices.

Layout, all integers little-endian u32:
    magic "AWEF" | version=1 | entry count
    per entry: id length | UTF-8 id | T | D | T*D float32 row-major
"""

from __future__ import annotations

import struct

import numpy as np

from .features import FeatureSequence

MAGIC = b"AWEF"
VERSION = 1

# The archive layout does not carry the frame shift; the pipeline default
# is restored on read.
DEFAULT_FRAME_SHIFT_MS = 10.0


class ArchiveError(ValueError):
    pass


def write_feature_archive(feats: list[FeatureSequence], path) -> None:
    seen = set()
    for f in feats:
        if f.utterance_id in seen:
            raise ArchiveError(f"duplicate utterance id {f.utterance_id!r}")
        seen.add(f.utterance_id)
    with open(path, "wb") as out:
        out.write(MAGIC)
        out.write(struct.pack("<II", VERSION, len(feats)))
        for f in feats:
            ident = f.utterance_id.encode("utf-8")
            frames = np.ascontiguousarray(f.frames, dtype="<f4")
            out.write(struct.pack("<I", len(ident)))
            out.write(ident)
            out.write(struct.pack("<II", frames.shape[0], frames.shape[1]))
            out.write(frames.tobytes())


def _read_exact(handle, n: int, what: str) -> bytes:
    data = handle.read(n)
    if len(data) != n:
        raise ArchiveError(f"truncated archive while reading {what}")
    return data


def read_feature_archive(path) -> list[FeatureSequence]:
    with open(path, "rb") as inp:
        magic = _read_exact(inp, 4, "magic")
        if magic != MAGIC:
            raise ArchiveError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, count = struct.unpack("<II", _read_exact(inp, 8, "header"))
        if version != VERSION:
            raise ArchiveError(f"unsupported archive version {version}")
        feats = []
        for k in range(count):
            (id_len,) = struct.unpack("<I", _read_exact(inp, 4, f"entry {k} id length"))
            ident = _read_exact(inp, id_len, f"entry {k} id").decode("utf-8")
            t, d = struct.unpack("<II", _read_exact(inp, 8, f"entry {k} shape"))
            payload = _read_exact(inp, 4 * t * d, f"entry {k} frames")
            frames = np.frombuffer(payload, dtype="<f4").reshape(t, d)
            feats.append(FeatureSequence(frames=frames.copy(),
                                         frame_shift_ms=DEFAULT_FRAME_SHIFT_MS,
                                         utterance_id=ident))
        return feats


def archive_as_dict(feats: list[FeatureSequence]) -> dict[str, np.ndarray]:
    """utterance_id -> (T, D) frames, the in-memory form downstream code uses."""
    return {f.utterance_id: f.frames for f in feats}


def load_archive_dict(path) -> dict[str, np.ndarray]:
    return archive_as_dict(read_feature_archive(path))
