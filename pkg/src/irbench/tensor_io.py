"""Core data types, binary tensor containers, and ground-truth ingestion.

Two little-endian binary formats are defined here: FMAP (one convolutional
feature map per file) and DSET (a named descriptor matrix with processing
provenance). Both round-trip bit-exactly. Ground truth is ingested either
from the classic Oxford/Paris text layout or from a generic JSON schema
that also covers easy/medium/hard (revisited) and positives-only protocols.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

FMAP_MAGIC = b"FMAP"
DSET_MAGIC = b"DSET"
FORMAT_VERSION = 1

# Refuse to allocate payloads a corrupt header could request.
MAX_ELEMENTS = 2**31 - 1


class FormatError(ValueError):
    """Malformed FMAP/DSET/WHTN container."""


class BadMagicError(FormatError):
    """Stream does not start with the expected magic bytes."""


class VersionMismatchError(FormatError):
    """Container version is not supported."""


class TruncatedPayloadError(FormatError):
    """Stream ended before the declared payload was complete."""


class SizeOverflowError(FormatError):
    """Declared element count exceeds the supported maximum."""


class DuplicateNameError(FormatError):
    """Descriptor set contains the same name twice."""


class GroundTruthError(ValueError):
    """Invalid ground-truth file, directory, or schema."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureMap:
    """One image's C x H x W activation tensor (float32, all finite)."""

    name: str
    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(
                f"feature map {self.name!r} must be a non-empty C x H x W tensor, "
                f"got shape {tuple(np.shape(self.data))}"
            )
        if not np.isfinite(data).all():
            raise ValueError(f"feature map {self.name!r} contains non-finite values")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class DescriptorSet:
    """Named matrix of fixed-length image descriptors plus provenance tags."""

    names: tuple[str, ...]
    matrix: np.ndarray
    provenance: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        names = tuple(self.names)
        matrix = np.ascontiguousarray(self.matrix)
        if matrix.dtype not in (np.float32, np.float64):
            matrix = matrix.astype(np.float64)
        if matrix.ndim != 2:
            raise ValueError(f"descriptor matrix must be 2-D, got shape {matrix.shape}")
        if matrix.shape[0] != len(names):
            raise ValueError(
                f"{len(names)} names but {matrix.shape[0]} descriptor rows"
            )
        if matrix.shape[1] < 1:
            raise ValueError("descriptor dimension must be positive")
        if len(set(names)) != len(names):
            seen: set[str] = set()
            for n in names:
                if n in seen:
                    raise DuplicateNameError(f"duplicate descriptor name {n!r}")
                seen.add(n)
        if matrix.size and not np.isfinite(matrix).all():
            raise ValueError("descriptor matrix contains non-finite values")
        matrix.flags.writeable = False
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "provenance", tuple(self.provenance))

    def __len__(self) -> int:
        return len(self.names)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def name_index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.names)}

    def row(self, name: str) -> np.ndarray:
        return self.matrix[self.name_index()[name]]

    def with_matrix(self, matrix: np.ndarray, extra_tags: Iterable[str] = ()) -> "DescriptorSet":
        return DescriptorSet(self.names, matrix, self.provenance + tuple(extra_tags))


@dataclass(frozen=True)
class QueryGroundTruth:
    """Relevance sets for one query image."""

    name: str
    positive: frozenset[str]
    junk: frozenset[str] = frozenset()
    bbox: tuple[float, float, float, float] | None = None
    easy: frozenset[str] | None = None
    hard: frozenset[str] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "positive", frozenset(self.positive))
        object.__setattr__(self, "junk", frozenset(self.junk))
        if self.easy is not None:
            object.__setattr__(self, "easy", frozenset(self.easy))
        if self.hard is not None:
            object.__setattr__(self, "hard", frozenset(self.hard))
        if self.bbox is not None:
            x1, y1, x2, y2 = self.bbox
            if not (x1 < x2 and y1 < y2):
                raise GroundTruthError(
                    f"query {self.name!r}: malformed bbox {self.bbox} (need x1<x2, y1<y2)"
                )
            object.__setattr__(self, "bbox", (float(x1), float(y1), float(x2), float(y2)))
        if self.positive & self.junk:
            raise GroundTruthError(
                f"query {self.name!r}: positive and junk sets overlap"
            )
        if (self.easy is None) != (self.hard is None):
            raise GroundTruthError(
                f"query {self.name!r}: easy and hard labels must come together"
            )
        if self.easy is not None and self.easy & self.hard:
            raise GroundTruthError(f"query {self.name!r}: easy and hard sets overlap")

    @property
    def revisited(self) -> bool:
        return self.easy is not None


@dataclass(frozen=True)
class GroundTruth:
    """Per-query relevance annotations plus the database image list."""

    queries: tuple[QueryGroundTruth, ...]
    database: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "queries", tuple(self.queries))
        object.__setattr__(self, "database", tuple(self.database))
        names = [q.name for q in self.queries]
        if len(set(names)) != len(names):
            raise GroundTruthError("duplicate query names in ground truth")
        if len(set(self.database)) != len(self.database):
            raise GroundTruthError("duplicate names in database list")

    def query(self, name: str) -> QueryGroundTruth:
        for q in self.queries:
            if q.name == name:
                return q
        raise KeyError(name)

    @property
    def revisited(self) -> bool:
        return bool(self.queries) and all(q.revisited for q in self.queries)


# ---------------------------------------------------------------------------
# Binary containers
# ---------------------------------------------------------------------------

def _open_sink(destination) -> tuple[BinaryIO, bool]:
    if hasattr(destination, "write"):
        return destination, False
    return open(destination, "wb"), True


def _open_source(source) -> tuple[BinaryIO, bool]:
    if hasattr(source, "read"):
        return source, False
    return open(source, "rb"), True


def _read_exact(stream: BinaryIO, count: int, what: str) -> bytes:
    buf = stream.read(count)
    if len(buf) != count:
        raise TruncatedPayloadError(
            f"truncated {what}: expected {count} bytes, got {len(buf)}"
        )
    return buf


def write_fmap(fmap: FeatureMap, destination) -> None:
    """Serialize a FeatureMap to the FMAP container (little-endian f32)."""
    c, h, w = fmap.data.shape
    if c * h * w > MAX_ELEMENTS:
        raise SizeOverflowError(f"feature map has {c * h * w} elements (max {MAX_ELEMENTS})")
    stream, owned = _open_sink(destination)
    try:
        stream.write(FMAP_MAGIC)
        stream.write(struct.pack("<IIII", FORMAT_VERSION, c, h, w))
        stream.write(np.ascontiguousarray(fmap.data, dtype="<f4").tobytes())
    finally:
        if owned:
            stream.close()


def read_fmap(source, name: str | None = None) -> FeatureMap:
    """Inverse of write_fmap. The name defaults to the file stem."""
    if name is None and isinstance(source, (str, Path)):
        name = Path(source).stem
    stream, owned = _open_source(source)
    try:
        magic = _read_exact(stream, 4, "magic")
        if magic != FMAP_MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {FMAP_MAGIC!r}")
        version, c, h, w = struct.unpack("<IIII", _read_exact(stream, 16, "header"))
        if version != FORMAT_VERSION:
            raise VersionMismatchError(f"unsupported FMAP version {version}")
        if min(c, h, w) < 1:
            raise FormatError(f"header declares empty tensor ({c}, {h}, {w})")
        count = c * h * w
        if count > MAX_ELEMENTS:
            raise SizeOverflowError(f"header declares {count} elements (max {MAX_ELEMENTS})")
        payload = _read_exact(stream, count * 4, "payload")
    finally:
        if owned:
            stream.close()
    data = np.frombuffer(payload, dtype="<f4").reshape(c, h, w)
    return FeatureMap(name or "", data)


def write_dset(dset: DescriptorSet, destination) -> None:
    """Serialize a DescriptorSet to the DSET container (little-endian f32 rows)."""
    n, dim = dset.matrix.shape
    if n * dim > MAX_ELEMENTS:
        raise SizeOverflowError(f"descriptor set has {n * dim} elements (max {MAX_ELEMENTS})")
    if len(dset.provenance) > 0xFFFF:
        raise FormatError("too many provenance tags")
    stream, owned = _open_sink(destination)
    try:
        stream.write(DSET_MAGIC)
        stream.write(struct.pack("<III", FORMAT_VERSION, n, dim))
        stream.write(struct.pack("<H", len(dset.provenance)))
        for tag in dset.provenance:
            raw = tag.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise FormatError(f"provenance tag too long ({len(raw)} bytes)")
            stream.write(struct.pack("<H", len(raw)))
            stream.write(raw)
        for name in dset.names:
            raw = name.encode("utf-8")
            stream.write(struct.pack("<I", len(raw)))
            stream.write(raw)
        stream.write(np.ascontiguousarray(dset.matrix, dtype="<f4").tobytes())
    finally:
        if owned:
            stream.close()


def read_dset(source) -> DescriptorSet:
    """Inverse of write_dset."""
    stream, owned = _open_source(source)
    try:
        magic = _read_exact(stream, 4, "magic")
        if magic != DSET_MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {DSET_MAGIC!r}")
        version, n, dim = struct.unpack("<III", _read_exact(stream, 12, "header"))
        if version != FORMAT_VERSION:
            raise VersionMismatchError(f"unsupported DSET version {version}")
        if dim < 1:
            raise FormatError("header declares zero descriptor dimension")
        if n * dim > MAX_ELEMENTS:
            raise SizeOverflowError(f"header declares {n * dim} elements (max {MAX_ELEMENTS})")
        (tag_count,) = struct.unpack("<H", _read_exact(stream, 2, "provenance count"))
        provenance = []
        for _ in range(tag_count):
            (tag_len,) = struct.unpack("<H", _read_exact(stream, 2, "provenance tag length"))
            provenance.append(_read_exact(stream, tag_len, "provenance tag").decode("utf-8"))
        names = []
        seen: set[str] = set()
        for _ in range(n):
            (name_len,) = struct.unpack("<I", _read_exact(stream, 4, "name length"))
            name = _read_exact(stream, name_len, "name").decode("utf-8")
            if name in seen:
                raise DuplicateNameError(f"duplicate descriptor name {name!r}")
            seen.add(name)
            names.append(name)
        payload = _read_exact(stream, n * dim * 4, "descriptor payload")
    finally:
        if owned:
            stream.close()
    matrix = np.frombuffer(payload, dtype="<f4").reshape(n, dim)
    return DescriptorSet(tuple(names), matrix, tuple(provenance))


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------

def strip_query_prefix(name: str) -> str:
    """Drop everything up to and including the first underscore-delimited token."""
    head, sep, tail = name.partition("_")
    return tail if sep else name


def _read_name_list(path: Path, query: str) -> frozenset[str]:
    if not path.is_file():
        raise GroundTruthError(f"query {query!r}: missing companion file {path.name}")
    return frozenset(
        line.strip() for line in path.read_text().splitlines() if line.strip()
    )


def parse_oxford_groundtruth(directory, strip_prefix: bool = False) -> GroundTruth:
    """Parse the classic Oxford/Paris ground-truth directory layout.

    Per query q the directory holds q_query.txt ("<name> x1 y1 x2 y2"),
    q_good.txt, q_ok.txt and q_junk.txt with one image name per line.
    Positives are good+ok. With strip_prefix the leading corpus token on the
    query image name ("oxc1_..." style) is removed.
    """
    directory = Path(directory)
    query_files = sorted(directory.glob("*_query.txt"))
    if not query_files:
        raise GroundTruthError(f"no *_query.txt files found in {directory}")
    queries = []
    mentioned: set[str] = set()
    for qfile in query_files:
        qid = qfile.name[: -len("_query.txt")]
        lines = [ln.strip() for ln in qfile.read_text().splitlines() if ln.strip()]
        if len(lines) != 1:
            raise GroundTruthError(f"query {qid!r}: expected one line in {qfile.name}")
        parts = lines[0].split()
        if len(parts) != 5:
            raise GroundTruthError(
                f"query {qid!r}: malformed query line {lines[0]!r} (want name + 4 coords)"
            )
        try:
            bbox = tuple(float(v) for v in parts[1:])
        except ValueError as exc:
            raise GroundTruthError(
                f"query {qid!r}: malformed bbox in {lines[0]!r}"
            ) from exc
        name = strip_query_prefix(parts[0]) if strip_prefix else parts[0]
        good = _read_name_list(directory / f"{qid}_good.txt", qid)
        ok = _read_name_list(directory / f"{qid}_ok.txt", qid)
        junk = _read_name_list(directory / f"{qid}_junk.txt", qid)
        query = QueryGroundTruth(name=name, positive=good | ok, junk=junk, bbox=bbox)
        queries.append(query)
        mentioned.add(name)
        mentioned |= query.positive | query.junk
    return GroundTruth(tuple(queries), tuple(sorted(mentioned)))


def parse_generic_groundtruth(document, strict: bool = False) -> GroundTruth:
    """Parse the generic JSON ground-truth schema.

    Accepts a dict, a JSON string, or a path to a JSON file with fields
    database:[names] and queries:[{name, bbox?, positive? | easy?+hard?,
    junk?}]. With strict=True, referenced names must appear in the database.
    """
    if isinstance(document, (str, Path)) and Path(str(document)).is_file():
        document = json.loads(Path(document).read_text())
    elif isinstance(document, str):
        document = json.loads(document)
    if not isinstance(document, dict):
        raise GroundTruthError("ground truth document must be a JSON object")
    if "database" not in document or "queries" not in document:
        raise GroundTruthError("ground truth needs 'database' and 'queries' fields")
    database = tuple(document["database"])
    db_set = set(database)
    queries = []
    for entry in document["queries"]:
        if "name" not in entry:
            raise GroundTruthError("query entry without a name")
        name = entry["name"]
        known = {"name", "bbox", "positive", "easy", "hard", "junk"}
        unknown = set(entry) - known
        if unknown:
            raise GroundTruthError(f"query {name!r}: unknown fields {sorted(unknown)}")
        has_positive = "positive" in entry
        has_labels = "easy" in entry or "hard" in entry
        if has_positive and has_labels:
            raise GroundTruthError(
                f"query {name!r}: 'positive' cannot be combined with easy/hard labels"
            )
        if not has_positive and not has_labels:
            raise GroundTruthError(f"query {name!r}: needs 'positive' or easy+hard sets")
        if has_labels and ("easy" not in entry or "hard" not in entry):
            raise GroundTruthError(f"query {name!r}: easy and hard must come together")
        junk = frozenset(entry.get("junk", ()))
        bbox = tuple(entry["bbox"]) if entry.get("bbox") is not None else None
        if has_positive:
            query = QueryGroundTruth(
                name=name, positive=frozenset(entry["positive"]), junk=junk, bbox=bbox
            )
        else:
            easy = frozenset(entry["easy"])
            hard = frozenset(entry["hard"])
            query = QueryGroundTruth(
                name=name, positive=easy | hard, junk=junk, bbox=bbox,
                easy=easy, hard=hard,
            )
        if strict:
            missing = sorted((query.positive | query.junk) - db_set)
            if missing:
                raise GroundTruthError(
                    f"query {name!r}: names absent from database: {missing[:5]}"
                )
        queries.append(query)
    return GroundTruth(tuple(queries), database)


def groundtruth_to_json(gt: GroundTruth) -> str:
    """Render a GroundTruth in the generic JSON schema (stable field order)."""
    entries = []
    for q in gt.queries:
        entry: dict = {"name": q.name}
        if q.bbox is not None:
            entry["bbox"] = list(q.bbox)
        if q.revisited:
            entry["easy"] = sorted(q.easy or ())
            entry["hard"] = sorted(q.hard or ())
        else:
            entry["positive"] = sorted(q.positive)
        entry["junk"] = sorted(q.junk)
        entries.append(entry)
    return json.dumps({"database": list(gt.database), "queries": entries}, indent=2) + "\n"
