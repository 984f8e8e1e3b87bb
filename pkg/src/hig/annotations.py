"""ASPIRe-format annotation files: parsing, validation, canonical writing and span extraction.

A file describes one video.  ``data`` is a list of frame records; each record
has ``segments_info`` (segment id -> category, kind, track) and
``annotations`` (segment id -> box, opaque mask, descriptors).  The structural
schema ships as ``schemas/aspire_annotations.schema.json``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from typing import Any, Iterable, Mapping

import jsonschema

from .classifier import CATEGORIES, CATEGORY_ORDER, DOUBLE_ACTOR, SINGLE_ACTOR, Category
from .errors import AnnotationParseError, AnnotationValidationError
from .graph import Kind

SCHEMA_VERSION = 1
VOCAB_KEYS = ("objects",) + tuple(c.descriptor for c in CATEGORIES)

_TOP_KEYS = {"schema_version", "video_id", "fps", "box_format", "image_size", "vocabulary", "data"}
_FRAME_KEYS = {"frame_index", "segments_info", "annotations"}
_SEGMENT_KEYS = {"id", "category_id", "kind", "track_id"}
_ANNOTATION_KEYS = {"segment_id", "bbox", "mask"} | {c.descriptor for c in CATEGORIES}


@lru_cache(maxsize=1)
def schema() -> dict:
    text = resources.files("hig").joinpath("schemas/aspire_annotations.schema.json").read_text("utf-8")
    return json.loads(text)


@lru_cache(maxsize=1)
def _validator() -> jsonschema.Draft202012Validator:
    return jsonschema.Draft202012Validator(schema())


@dataclass
class SegmentInfo:
    id: int
    category_id: int
    kind: Kind
    track_id: int
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = Kind(self.kind)


@dataclass
class RegionAnnotation:
    segment_id: int
    bbox: tuple[float, float, float, float]
    mask: Any = None
    appearances: list[int] = field(default_factory=list)
    situations: list[int] = field(default_factory=list)
    positions: list[tuple[int, int]] = field(default_factory=list)
    interactions: list[tuple[int, int]] = field(default_factory=list)
    relations: list[tuple[int, int]] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def labels(self, category: Category) -> list:
        return getattr(self, Category(category).descriptor)


@dataclass
class FrameRecord:
    frame_index: int
    segments_info: list[SegmentInfo] = field(default_factory=list)
    annotations: list[RegionAnnotation] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def segment(self, segment_id: int) -> SegmentInfo | None:
        for s in self.segments_info:
            if s.id == segment_id:
                return s
        return None

    def subjects(self) -> list[tuple[SegmentInfo, RegionAnnotation]]:
        """(segment, annotation) pairs joined on segment id, in annotation order."""
        by_id = {s.id: s for s in self.segments_info}
        return [(by_id[a.segment_id], a) for a in self.annotations if a.segment_id in by_id]


@dataclass
class Vocabulary:
    sizes: dict[str, int]
    names: dict[str, list[str]] = field(default_factory=dict)

    def size(self, key: str | Category) -> int:
        key = key.descriptor if isinstance(key, Category) else key
        return self.sizes[key]

    def category_sizes(self) -> dict[Category, int]:
        return {c: self.sizes[c.descriptor] for c in CATEGORIES}

    def to_json(self) -> dict:
        out = {}
        for k, v in self.sizes.items():
            out[k] = {"size": v}
            if k in self.names:
                out[k]["names"] = list(self.names[k])
        return out

    @classmethod
    def from_json(cls, data: Mapping) -> "Vocabulary":
        sizes = {k: int(v["size"]) for k, v in data.items()}
        names = {k: list(v["names"]) for k, v in data.items() if "names" in v}
        return cls(sizes, names)


@dataclass
class AnnotationFile:
    video_id: str
    vocabulary: Vocabulary
    data: list[FrameRecord] = field(default_factory=list)
    fps: float | None = None
    box_format: str = "normalized"
    image_size: tuple[float, float] | None = None
    extra: dict = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return len(self.data)

    def frame_indices(self) -> list[int]:
        return [f.frame_index for f in self.data]


@dataclass(frozen=True)
class Triplet:
    """A ground-truth interactivity over the inclusive frame span ``span``."""

    subject: int
    object: int | None
    category: Category
    predicate: int
    span: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "category", Category(self.category))

    @property
    def key(self) -> tuple:
        return (self.subject, self.object, self.category, self.predicate)

    def sort_key(self) -> tuple:
        return (CATEGORY_ORDER[self.category], self.subject, -1 if self.object is None else self.object,
                self.predicate, self.span)

    def to_dict(self) -> dict:
        return {"subject": self.subject, "object": self.object, "category": self.category.value,
                "predicate": self.predicate, "span": list(self.span)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Triplet":
        obj = d.get("object")
        return cls(int(d["subject"]), None if obj is None else int(obj), Category(d["category"]),
                   int(d["predicate"]), (int(d["span"][0]), int(d["span"][1])))


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    frame: int | None = None
    field: str | None = None

    def __str__(self) -> str:
        where = f"frame {self.frame}" if self.frame is not None else "file"
        if self.field:
            where += f", {self.field}"
        return f"{where}: {self.code}: {self.message}"


# ---------------------------------------------------------------------------
# Parsing and writing
# ---------------------------------------------------------------------------


def _extra(d: Mapping, known: set) -> dict:
    return {k: v for k, v in d.items() if k not in known}


def _schema_error(exc: jsonschema.ValidationError, doc: Any) -> AnnotationValidationError:
    path = list(exc.absolute_path)
    frame = None
    if len(path) >= 2 and path[0] == "data" and isinstance(path[1], int):
        record = doc["data"][path[1]]
        if isinstance(record, dict) and isinstance(record.get("frame_index"), int):
            frame = record["frame_index"]
        rest = path[2:]
    else:
        rest = path
    field_name = "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in rest).lstrip(".") or None
    where = f"frame {frame}" if frame is not None else "file"
    return AnnotationValidationError(f"{where}, field {field_name or '<root>'}: {exc.message}",
                                     frame=frame, field=field_name)


def from_json(doc: Any, validate_file: bool = True) -> AnnotationFile:
    """Build an ``AnnotationFile`` from decoded JSON, checking the schema and (optionally) semantics."""
    error = jsonschema.exceptions.best_match(_validator().iter_errors(doc))
    if error is not None:
        raise _schema_error(error, doc)
    frames = []
    for rec in doc["data"]:
        segments = [SegmentInfo(s["id"], s["category_id"], Kind(s["kind"]), s["track_id"], _extra(s, _SEGMENT_KEYS))
                    for s in rec["segments_info"]]
        anns = []
        for a in rec["annotations"]:
            anns.append(RegionAnnotation(
                segment_id=a["segment_id"],
                bbox=tuple(float(v) for v in a["bbox"]),
                mask=a.get("mask"),
                appearances=[int(v) for v in a.get("appearances", [])],
                situations=[int(v) for v in a.get("situations", [])],
                positions=[(int(r["target"]), int(r["predicate"])) for r in a.get("positions", [])],
                interactions=[(int(r["target"]), int(r["predicate"])) for r in a.get("interactions", [])],
                relations=[(int(r["target"]), int(r["predicate"])) for r in a.get("relations", [])],
                extra=_extra(a, _ANNOTATION_KEYS),
            ))
        frames.append(FrameRecord(rec["frame_index"], segments, anns, _extra(rec, _FRAME_KEYS)))
    size = doc.get("image_size")
    out = AnnotationFile(
        video_id=doc["video_id"],
        vocabulary=Vocabulary.from_json(doc["vocabulary"]),
        data=frames,
        fps=None if doc.get("fps") is None else float(doc["fps"]),
        box_format=doc.get("box_format", "normalized"),
        image_size=None if size is None else (float(size[0]), float(size[1])),
        extra=_extra(doc, _TOP_KEYS),
    )
    if validate_file:
        report = validate(out)
        if report:
            first = report[0]
            raise AnnotationValidationError(str(first), frame=first.frame, field=first.field)
    return out


def parse_annotations(raw: bytes | str, validate_file: bool = True) -> AnnotationFile:
    if isinstance(raw, bytes):
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise AnnotationParseError(f"invalid UTF-8 at byte {exc.start}", offset=exc.start) from exc
    else:
        text = raw
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode("utf-8"))
        raise AnnotationParseError(f"malformed JSON at byte {offset}: {exc.msg}", offset=offset) from exc
    return from_json(doc, validate_file)


def to_json(f: AnnotationFile) -> dict:
    frames = []
    for rec in f.data:
        segs = [{**s.extra, "id": s.id, "category_id": s.category_id, "kind": s.kind.value, "track_id": s.track_id}
                for s in rec.segments_info]
        anns = []
        for a in rec.annotations:
            d = {**a.extra, "segment_id": a.segment_id, "bbox": list(a.bbox), "mask": a.mask,
                 "appearances": list(a.appearances), "situations": list(a.situations)}
            for c in DOUBLE_ACTOR:
                d[c.descriptor] = [{"target": t, "predicate": p} for t, p in a.labels(c)]
            anns.append(d)
        frames.append({**rec.extra, "frame_index": rec.frame_index, "segments_info": segs, "annotations": anns})
    doc = {**f.extra, "schema_version": SCHEMA_VERSION, "video_id": f.video_id, "fps": f.fps,
           "box_format": f.box_format, "vocabulary": f.vocabulary.to_json(), "data": frames}
    if f.image_size is not None:
        doc["image_size"] = list(f.image_size)
    return doc


def canonical_json(obj: Any) -> bytes:
    """Sorted keys, compact separators, shortest round-trip float repr, trailing newline."""
    return (json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)
            + "\n").encode("utf-8")


def write_annotations(f: AnnotationFile) -> bytes:
    return canonical_json(to_json(f))


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def validate(f: AnnotationFile) -> list[Violation]:
    """Every semantic problem in ``f``; an empty list means the file is valid."""
    out: list[Violation] = []
    vocab = f.vocabulary
    for key in VOCAB_KEYS:
        if key not in vocab.sizes:
            out.append(Violation("missing vocabulary", f"no size declared for {key}", field=f"vocabulary.{key}"))
    if out:
        return out
    if f.box_format not in ("normalized", "pixel"):
        out.append(Violation("bad box format", f"unknown box_format {f.box_format!r}", field="box_format"))
    identity: dict[int, tuple[Kind, int, int]] = {}
    previous = None
    for rec in f.data:
        fi = rec.frame_index
        if previous is not None and fi <= previous:
            out.append(Violation("frame order", f"index {fi} does not follow {previous}", fi, "frame_index"))
        previous = fi
        seg_ids: dict[int, SegmentInfo] = {}
        tracks: set[int] = set()
        for i, s in enumerate(rec.segments_info):
            fld = f"segments_info[{i}]"
            if s.id in seg_ids:
                out.append(Violation("duplicate segment", f"segment id {s.id} repeated", fi, fld + ".id"))
            seg_ids[s.id] = s
            if s.track_id in tracks:
                out.append(Violation("duplicate track", f"track {s.track_id} repeated", fi, fld + ".track_id"))
            tracks.add(s.track_id)
            if not 0 <= s.category_id < vocab.size("objects"):
                out.append(Violation("out of vocabulary", f"category_id {s.category_id} >= {vocab.size('objects')}",
                                     fi, fld + ".category_id"))
            seen = identity.setdefault(s.track_id, (s.kind, s.category_id, fi))
            if seen[0] is not s.kind:
                out.append(Violation("kind flip", f"track {s.track_id} was {seen[0].value} in frame {seen[2]}, "
                                     f"now {s.kind.value}", fi, fld + ".kind"))
            if seen[1] != s.category_id:
                out.append(Violation("category flip", f"track {s.track_id} was category {seen[1]} in frame "
                                     f"{seen[2]}, now {s.category_id}", fi, fld + ".category_id"))
        annotated: set[int] = set()
        for i, a in enumerate(rec.annotations):
            fld = f"annotations[{i}]"
            seg = seg_ids.get(a.segment_id)
            if seg is None:
                out.append(Violation("unknown segment", f"segment {a.segment_id} not in segments_info",
                                     fi, fld + ".segment_id"))
            elif a.segment_id in annotated:
                out.append(Violation("duplicate annotation", f"segment {a.segment_id} annotated twice",
                                     fi, fld + ".segment_id"))
            annotated.add(a.segment_id)
            out.extend(_box_violations(f, a.bbox, fi, fld + ".bbox"))
            for c in SINGLE_ACTOR:
                for j, pid in enumerate(a.labels(c)):
                    if not 0 <= pid < vocab.size(c):
                        out.append(Violation("out of vocabulary", f"{c.value} id {pid} >= {vocab.size(c)}",
                                             fi, f"{fld}.{c.descriptor}[{j}]"))
            for c in DOUBLE_ACTOR:
                for j, (target, pid) in enumerate(a.labels(c)):
                    where = f"{fld}.{c.descriptor}[{j}]"
                    if not 0 <= pid < vocab.size(c):
                        out.append(Violation("out of vocabulary", f"{c.value} id {pid} >= {vocab.size(c)}",
                                             fi, where + ".predicate"))
                    if target not in tracks:
                        out.append(Violation("unknown target track", f"track {target} is not in this frame",
                                             fi, where + ".target"))
                    elif seg is not None and target == seg.track_id:
                        out.append(Violation("self target", f"track {target} targets itself", fi, where + ".target"))
        for sid in seg_ids:
            if sid not in annotated:
                out.append(Violation("missing annotation", f"segment {sid} has no annotation", fi, "annotations"))
    return out


def _box_violations(f: AnnotationFile, bbox, frame: int, fld: str) -> list[Violation]:
    x1, y1, x2, y2 = bbox
    if not (x1 < x2 and y1 < y2):
        return [Violation("bad box", f"box {list(bbox)} is not well ordered", frame, fld)]
    if f.box_format == "normalized":
        hi_x = hi_y = 1.0
    elif f.image_size is not None:
        hi_x, hi_y = f.image_size
    else:
        return []
    if x1 < 0 or y1 < 0 or x2 > hi_x or y2 > hi_y:
        return [Violation("bad box", f"box {list(bbox)} leaves the frame", frame, fld)]
    return []


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------


def frame_labels(f: AnnotationFile) -> dict[int, set[tuple]]:
    """Per-frame label sets of ``(subject, object, category, predicate)``."""
    out: dict[int, set[tuple]] = {}
    for rec in f.data:
        labels = out.setdefault(rec.frame_index, set())
        for seg, ann in rec.subjects():
            for c in SINGLE_ACTOR:
                labels.update((seg.track_id, None, c, p) for p in ann.labels(c))
            for c in DOUBLE_ACTOR:
                labels.update((seg.track_id, t, c, p) for t, p in ann.labels(c))
    return out


def runs(indices: Iterable[int]) -> list[tuple[int, int]]:
    """Maximal runs of consecutive integers, as inclusive (first, last) pairs."""
    spans: list[tuple[int, int]] = []
    for i in sorted(set(indices)):
        if spans and i == spans[-1][1] + 1:
            spans[-1] = (spans[-1][0], i)
        else:
            spans.append((i, i))
    return spans


def extract_ground_truth_triplets(f: AnnotationFile) -> list[Triplet]:
    frames_by_key: dict[tuple, list[int]] = {}
    for fi, labels in frame_labels(f).items():
        for key in labels:
            frames_by_key.setdefault(key, []).append(fi)
    triplets = [Triplet(*key, span) for key, frames in frames_by_key.items() for span in runs(frames)]
    return sorted(triplets, key=Triplet.sort_key)


def expand_triplets(triplets: Iterable[Triplet]) -> dict[int, set[tuple]]:
    """Inverse of span extraction: per-frame label sets."""
    out: dict[int, set[tuple]] = {}
    for tr in triplets:
        for fi in range(tr.span[0], tr.span[1] + 1):
            out.setdefault(fi, set()).add(tr.key)
    return out


def subsample_frames(f: AnnotationFile, rate: int) -> AnnotationFile:
    """Keep every ``rate``-th frame counted from the first and renumber them contiguously."""
    if rate < 1:
        raise ValueError("rate must be >= 1")
    if rate == 1 or not f.data:
        return f
    first = f.data[0].frame_index
    kept = [replace(rec, frame_index=first + (rec.frame_index - first) // rate)
            for rec in f.data if (rec.frame_index - first) % rate == 0]
    return replace(f, data=kept, fps=None if f.fps is None else f.fps / rate)


def normalize_frames(f: AnnotationFile) -> AnnotationFile:
    """Renumber frames 1..T in file order."""
    return replace(f, data=[replace(rec, frame_index=i) for i, rec in enumerate(f.data, start=1)])
