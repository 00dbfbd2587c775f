"""Binary container for global/local image features and geo-tags.

Container layout (magic ``EFVP``, little-endian throughout)::

    offset 0   magic "EFVP"                      4 bytes
    offset 4   version (=1)                      u32
    offset 8   d_g  (global descriptor length)   u32
    offset 12  d_l  (local descriptor length)    u32
    offset 16  record_count                      u64
    offset 24  geo_kind (0=none 1=latlon 2=frame) u32

followed by one block per record::

    id_len u32; id bytes (UTF-8);
    geo payload (latlon: lat f64, lon f64 | frame: i64 | none: empty);
    global descriptor f32 * d_g;
    local_count u32;
    per local: score f32, descriptor f32 * d_l.

The same in-memory set always serializes to identical bytes, and
``read_feature_set(write_feature_set(s)) == s`` with float bits preserved.
A sibling framing (magic ``EFMT``) stores a single raw float32 matrix:
version u32, rows u64, cols u64, f32 data row-major.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

MAGIC = b"EFVP"
MATRIX_MAGIC = b"EFMT"
FORMAT_VERSION = 1

UNIT_NORM_TOL = 1e-5

_HEADER = struct.Struct("<4sIIIQI")
_U32 = struct.Struct("<I")
_I64 = struct.Struct("<q")
_2F64 = struct.Struct("<dd")


class ContainerError(ValueError):
    """Raised when a byte stream does not parse as a valid container."""


class GeoKind(IntEnum):
    NONE = 0
    LATLON = 1
    FRAME = 2


@dataclass(frozen=True)
class GeoTag:
    """Location of an image: WGS84 coordinates, a frame index, or nothing."""

    kind: GeoKind = GeoKind.NONE
    lat: float = 0.0
    lon: float = 0.0
    frame: int = 0

    @classmethod
    def latlon(cls, lat: float, lon: float) -> "GeoTag":
        return cls(kind=GeoKind.LATLON, lat=float(lat), lon=float(lon))

    @classmethod
    def frame_index(cls, frame: int) -> "GeoTag":
        return cls(kind=GeoKind.FRAME, frame=int(frame))

    @classmethod
    def none(cls) -> "GeoTag":
        return cls(kind=GeoKind.NONE)


@dataclass(frozen=True)
class LocalFeature:
    """One attention-selected patch: its score and unit descriptor."""

    score: float
    descriptor: np.ndarray  # float32, unit norm

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LocalFeature):
            return NotImplemented
        return (
            np.float32(self.score) == np.float32(other.score)
            and self.descriptor.shape == other.descriptor.shape
            and bool(np.all(self.descriptor == other.descriptor))
        )


@dataclass
class ImageRecord:
    """Identity, geo-tag, global descriptor and local features of one image."""

    id: str
    geo: GeoTag
    global_descriptor: np.ndarray  # float32, unit norm, length d_g
    locals: list[LocalFeature] = field(default_factory=list)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.geo == other.geo
            and self.global_descriptor.shape == other.global_descriptor.shape
            and bool(np.all(self.global_descriptor == other.global_descriptor))
            and self.locals == other.locals
        )


class FeatureSet:
    """An ordered gallery or query set with shared descriptor dimensions.

    Immutable once constructed; safe to share across threads. The stacked
    global-descriptor matrix is built lazily and cached.
    """

    def __init__(self, d_g: int, d_l: int, records: list[ImageRecord]):
        if d_g < 1 or d_l < 1:
            raise ValueError("descriptor dimensions must be positive")
        self.d_g = int(d_g)
        self.d_l = int(d_l)
        self.records = list(records)
        self._globals_matrix: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureSet):
            return NotImplemented
        return (
            self.d_g == other.d_g
            and self.d_l == other.d_l
            and self.records == other.records
        )

    def globals_matrix(self) -> np.ndarray:
        """All global descriptors stacked into an (n, d_g) float32 matrix."""
        if self._globals_matrix is None:
            if self.records:
                self._globals_matrix = np.stack(
                    [r.global_descriptor for r in self.records]
                )
            else:
                self._globals_matrix = np.zeros((0, self.d_g), dtype=np.float32)
        return self._globals_matrix

    def ids(self) -> list[str]:
        return [r.id for r in self.records]


@dataclass(frozen=True)
class ValidationEntry:
    record_id: str
    field: str
    message: str

    def __str__(self) -> str:
        return f"{self.record_id}: {self.field}: {self.message}"


@dataclass
class ValidationReport:
    entries: list[ValidationEntry] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.entries

    def add(self, record_id: str, fieldname: str, message: str) -> None:
        self.entries.append(ValidationEntry(record_id, fieldname, message))

    def __str__(self) -> str:
        if self.ok:
            return "ok"
        return "\n".join(str(e) for e in self.entries)


def _set_geo_kind(s: FeatureSet) -> GeoKind:
    """The single geo kind shared by all records; NONE for an empty set."""
    if not s.records:
        return GeoKind.NONE
    kind = s.records[0].geo.kind
    for r in s.records:
        if r.geo.kind != kind:
            raise ContainerError(
                f"record {r.id!r}: geo kind {r.geo.kind.name} differs from "
                f"set kind {kind.name}; one container holds one kind"
            )
    return GeoKind(kind)


def validate(s: FeatureSet) -> ValidationReport:
    """Check every invariant; violations become report entries, not errors."""
    report = ValidationReport()
    seen: set[str] = set()
    set_kind = s.records[0].geo.kind if s.records else GeoKind.NONE
    for rec in s.records:
        if rec.id in seen:
            report.add(rec.id, "id", f"duplicate id {rec.id}")
        seen.add(rec.id)

        g = rec.global_descriptor
        if g.shape != (s.d_g,):
            report.add(
                rec.id, "global_descriptor",
                f"length {g.shape} does not match d_g={s.d_g}",
            )
        else:
            norm = float(np.linalg.norm(g.astype(np.float64)))
            if abs(norm - 1.0) > UNIT_NORM_TOL:
                report.add(rec.id, "global_descriptor", f"norm {norm:.6g} is not 1")

        for i, lf in enumerate(rec.locals):
            d = lf.descriptor
            if d.shape != (s.d_l,):
                report.add(
                    rec.id, f"locals[{i}].descriptor",
                    f"length {d.shape} does not match d_l={s.d_l}",
                )
            else:
                norm = float(np.linalg.norm(d.astype(np.float64)))
                if abs(norm - 1.0) > UNIT_NORM_TOL:
                    report.add(
                        rec.id, f"locals[{i}].descriptor",
                        f"norm {norm:.6g} is not 1",
                    )
            if not (0.0 < lf.score <= 1.0):
                report.add(rec.id, f"locals[{i}].score", f"{lf.score} not in (0, 1]")

        geo = rec.geo
        if geo.kind == GeoKind.LATLON:
            if not -90.0 <= geo.lat <= 90.0:
                report.add(rec.id, "geo.lat", f"{geo.lat} outside [-90, 90]")
            if not -180.0 <= geo.lon <= 180.0:
                report.add(rec.id, "geo.lon", f"{geo.lon} outside [-180, 180]")
        elif geo.kind == GeoKind.FRAME:
            if geo.frame < 0:
                report.add(rec.id, "geo.frame", f"{geo.frame} is negative")
        if geo.kind != set_kind:
            report.add(rec.id, "geo.kind", f"{geo.kind.name} differs from {set_kind.name}")
    return report


def write_feature_set(s: FeatureSet, sink) -> int:
    """Serialize a valid set into *sink*; returns bytes written.

    Raises ContainerError on the first invariant violation, naming the
    offending record and field. Output depends only on the set's contents.
    """
    report = validate(s)
    if not report.ok:
        bad = report.entries[0]
        raise ContainerError(f"invalid set: {bad}")
    kind = _set_geo_kind(s)

    total = sink.write(
        _HEADER.pack(MAGIC, FORMAT_VERSION, s.d_g, s.d_l, len(s.records), int(kind))
    )
    for rec in s.records:
        id_bytes = rec.id.encode("utf-8")
        chunk = [_U32.pack(len(id_bytes)), id_bytes]
        if kind == GeoKind.LATLON:
            chunk.append(_2F64.pack(rec.geo.lat, rec.geo.lon))
        elif kind == GeoKind.FRAME:
            chunk.append(_I64.pack(rec.geo.frame))
        chunk.append(np.ascontiguousarray(rec.global_descriptor, dtype="<f4").tobytes())
        chunk.append(_U32.pack(len(rec.locals)))
        for lf in rec.locals:
            chunk.append(struct.pack("<f", lf.score))
            chunk.append(np.ascontiguousarray(lf.descriptor, dtype="<f4").tobytes())
        total += sink.write(b"".join(chunk))
    return total


def write_feature_set_file(s: FeatureSet, path) -> int:
    with open(path, "wb") as f:
        return write_feature_set(s, f)


class _Cursor:
    """Sequential reader that raises ContainerError on short reads."""

    def __init__(self, stream, context: str = "header"):
        self.stream = stream
        self.context = context

    def take(self, n: int) -> bytes:
        data = self.stream.read(n)
        if len(data) != n:
            raise ContainerError(
                f"truncated stream in {self.context}: wanted {n} bytes, got {len(data)}"
            )
        return data

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def read_feature_set(source) -> FeatureSet:
    """Parse a container back into the FeatureSet that produced it."""
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    cur = _Cursor(source)
    magic, version, d_g, d_l, count, kind_raw = _HEADER.unpack(cur.take(_HEADER.size))
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported version {version}")
    try:
        kind = GeoKind(kind_raw)
    except ValueError:
        raise ContainerError(f"unknown geo kind {kind_raw}") from None

    records: list[ImageRecord] = []
    seen: set[str] = set()
    for idx in range(count):
        cur.context = f"record {idx}"
        id_len = cur.u32()
        rec_id = cur.take(id_len).decode("utf-8")
        if rec_id in seen:
            raise ContainerError(f"record {idx}: duplicate id {rec_id!r}")
        seen.add(rec_id)
        if kind == GeoKind.LATLON:
            lat, lon = _2F64.unpack(cur.take(16))
            geo = GeoTag.latlon(lat, lon)
        elif kind == GeoKind.FRAME:
            geo = GeoTag.frame_index(_I64.unpack(cur.take(8))[0])
        else:
            geo = GeoTag.none()
        g = np.frombuffer(cur.take(4 * d_g), dtype="<f4").copy()
        n_locals = cur.u32()
        locals_: list[LocalFeature] = []
        for _ in range(n_locals):
            score = struct.unpack("<f", cur.take(4))[0]
            desc = np.frombuffer(cur.take(4 * d_l), dtype="<f4").copy()
            locals_.append(LocalFeature(score=score, descriptor=desc))
        records.append(ImageRecord(id=rec_id, geo=geo, global_descriptor=g, locals=locals_))
    return FeatureSet(d_g=d_g, d_l=d_l, records=records)


def read_feature_set_file(path) -> FeatureSet:
    with open(path, "rb") as f:
        return read_feature_set(f)


_MATRIX_HEADER = struct.Struct("<4sIQQ")


def write_matrix(m: np.ndarray, sink) -> int:
    """Serialize one float32 matrix in the raw-matrix framing."""
    m = np.ascontiguousarray(m, dtype="<f4")
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    total = sink.write(_MATRIX_HEADER.pack(MATRIX_MAGIC, FORMAT_VERSION, *m.shape))
    total += sink.write(m.tobytes())
    return total


def read_matrix(source) -> np.ndarray:
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    cur = _Cursor(source, context="matrix header")
    magic, version, rows, cols = _MATRIX_HEADER.unpack(cur.take(_MATRIX_HEADER.size))
    if magic != MATRIX_MAGIC:
        raise ContainerError(f"bad magic {magic!r}, expected {MATRIX_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported version {version}")
    cur.context = "matrix data"
    data = np.frombuffer(cur.take(4 * rows * cols), dtype="<f4").copy()
    return data.reshape(rows, cols)


def write_matrix_file(m: np.ndarray, path) -> int:
    with open(path, "wb") as f:
        return write_matrix(m, f)


def read_matrix_file(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_matrix(f)
