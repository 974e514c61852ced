"""On-disk formats: the binary descriptor file and the candidate / ground-truth / bias CSVs.

Descriptor file layout (little-endian)::

    magic    8 bytes  b"SSCDDESC"
    version  u16      1
    flags    u16      bit0 normalized, bit1 biased query, bit2 biased reference
    count    u64
    dim      u32
    ids      count x (u16 byte length + UTF-8 bytes)
    data     count x dim float32, row-major
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .descriptor_core import DescriptorSet
from .retrieval_eval import GroundTruth, MatchCandidate

MAGIC = b"SSCDDESC"
VERSION = 1
FLAG_NORMALIZED = 1
FLAG_BIASED_QUERY = 2
FLAG_BIASED_REFERENCE = 4
_HEADER = struct.Struct("<8sHHQI")


class FormatError(ValueError):
    """Malformed input file; ``offset`` is the byte (or line) position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")


@dataclass(eq=False)
class DescriptorFile:
    descriptors: DescriptorSet
    flags: int = 0

    @property
    def role(self) -> str | None:
        if self.flags & FLAG_BIASED_QUERY:
            return "query"
        if self.flags & FLAG_BIASED_REFERENCE:
            return "reference"
        return None


def encode_descriptors(ds: DescriptorSet, flags: int | None = None) -> bytes:
    if flags is None:
        flags = FLAG_NORMALIZED if ds.normalized else 0
    if flags & FLAG_BIASED_QUERY and flags & FLAG_BIASED_REFERENCE:
        raise ValueError("a descriptor file cannot be both a biased query and a biased reference set")
    parts = [_HEADER.pack(MAGIC, VERSION, flags, ds.count, ds.dim)]
    for i in ds.ids:
        b = i.encode("utf-8")
        if len(b) > 0xFFFF:
            raise ValueError(f"id too long for the descriptor format: {i[:40]!r}...")
        parts.append(struct.pack("<H", len(b)))
        parts.append(b)
    parts.append(np.ascontiguousarray(ds.data, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_descriptors(buf: bytes) -> DescriptorFile:
    if len(buf) < _HEADER.size:
        raise FormatError(f"file too short for header ({len(buf)} bytes)", len(buf))
    magic, version, flags, count, dim = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 8)
    if flags & ~(FLAG_NORMALIZED | FLAG_BIASED_QUERY | FLAG_BIASED_REFERENCE):
        raise FormatError(f"unknown flag bits {flags:#x}", 10)
    pos = _HEADER.size
    ids = []
    for _ in range(count):
        if pos + 2 > len(buf):
            raise FormatError("truncated id block", pos)
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + n > len(buf):
            raise FormatError("truncated id", pos)
        try:
            ids.append(buf[pos : pos + n].decode("utf-8"))
        except UnicodeDecodeError as e:
            raise FormatError(f"id is not valid UTF-8: {e.reason}", pos + e.start) from None
        pos += n
    expected = pos + count * dim * 4
    if len(buf) != expected:
        raise FormatError(f"file length {len(buf)} does not match header (expected {expected})", min(len(buf), expected))
    data = np.frombuffer(buf, dtype="<f4", count=count * dim, offset=pos).reshape(count, dim).astype(np.float32)
    if not np.all(np.isfinite(data)):
        bad = int(np.flatnonzero(~np.isfinite(data.ravel()))[0])
        raise FormatError("non-finite value in data block", pos + 4 * bad)
    normalized = bool(flags & FLAG_NORMALIZED)
    if normalized and count:
        norms = np.linalg.norm(data.astype(np.float64), axis=1)
        bad = np.flatnonzero(np.abs(norms - 1) > 1e-5)
        if bad.size:
            raise FormatError(f"row {int(bad[0])} has norm {norms[bad[0]]:.7g} but the normalized flag is set", pos + 4 * dim * int(bad[0]))
    if len(set(ids)) != len(ids):
        raise FormatError("duplicate ids in id block", _HEADER.size)
    if flags & FLAG_BIASED_REFERENCE and count and not np.all(data[:, -1] == 1.0):
        raise FormatError("biased reference rows must end with 1", pos)
    return DescriptorFile(DescriptorSet(tuple(ids), data, normalized), flags)


def write_descriptors(path, ds: DescriptorSet, flags: int | None = None) -> None:
    Path(path).write_bytes(encode_descriptors(ds, flags))


def read_descriptors(path) -> DescriptorFile:
    return decode_descriptors(Path(path).read_bytes())


def load_descriptor_set(path, dtype=np.float64) -> DescriptorSet:
    """Read a descriptor file and widen to 64-bit for computation.

    32-bit rows that were unit-norm on disk are renormalized after widening.
    """
    f = read_descriptors(path)
    ds = f.descriptors
    data = ds.data.astype(dtype)
    if ds.normalized and dtype == np.float64:
        data = data / np.linalg.norm(data, axis=1, keepdims=True)
    return DescriptorSet(ds.ids, data, ds.normalized)


# -- CSV ---------------------------------------------------------------------


def fmt_float(x: float) -> str:
    return repr(float(x))


def _read_csv(path, header: tuple[str, ...]):
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        got = tuple(next(reader))
    except StopIteration:
        raise FormatError(f"{path}: empty file, expected header {','.join(header)}", 0) from None
    if got != header:
        raise FormatError(f"{path}: expected header {','.join(header)}, got {','.join(got)}", 0)
    rows = []
    for row in reader:
        if not row:
            continue
        if len(row) != len(header):
            raise FormatError(f"{path}: line {reader.line_num} has {len(row)} fields, expected {len(header)}")
        rows.append((reader.line_num, row))
    return rows


def read_candidates(path) -> list[MatchCandidate]:
    out = []
    for line, (q, r, s) in _read_csv(path, ("query_id", "ref_id", "score")):
        try:
            score = float(s)
        except ValueError:
            raise FormatError(f"{path}: line {line}: bad score {s!r}") from None
        out.append(MatchCandidate(q, r, score))
    return out


def candidates_csv(candidates) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("query_id", "ref_id", "score"))
    for c in candidates:
        w.writerow((c.query_id, c.ref_id, fmt_float(c.score)))
    return buf.getvalue()


def write_candidates(path, candidates) -> None:
    Path(path).write_text(candidates_csv(candidates), encoding="utf-8")


def read_ground_truth(path) -> GroundTruth:
    pairs = [(q, r) for _, (q, r) in _read_csv(path, ("query_id", "ref_id"))]
    if len(set(pairs)) != len(pairs):
        raise FormatError(f"{path}: duplicate ground-truth pair")
    return GroundTruth.from_pairs(pairs)


def write_ground_truth(path, gt: GroundTruth) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("query_id", "ref_id"))
    for q, r in sorted(gt.pairs):
        w.writerow((q, r))
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def write_biases(path, biases: dict[str, float]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("query_id", "bias"))
    for q, b in biases.items():
        w.writerow((q, fmt_float(b)))
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_biases(path) -> dict[str, float]:
    return {q: float(b) for _, (q, b) in _read_csv(path, ("query_id", "bias"))}


def write_rows_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt_float(v) if isinstance(v, float) else v for v in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
