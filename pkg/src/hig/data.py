"""Dataset directory I/O: feature tables, manifests and ready-to-train video samples.

Layout::

    <root>/manifest.json
    <root>/videos/<id>.annotations.json
    <root>/videos/<id>.features.json
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .annotations import (
    AnnotationFile,
    Triplet,
    canonical_json,
    extract_ground_truth_triplets,
    normalize_frames,
    parse_annotations,
    subsample_frames,
)
from .errors import DimensionError
from .graph import SubjectNode

MANIFEST = "manifest.json"
VIDEOS_DIR = "videos"


def annotation_path(root: Path, video_id: str) -> Path:
    return Path(root) / VIDEOS_DIR / f"{video_id}.annotations.json"


def features_path(root: Path, video_id: str) -> Path:
    return Path(root) / VIDEOS_DIR / f"{video_id}.features.json"


@dataclass
class FeatureTable:
    """Per-frame subject feature vectors keyed by the annotation file's frame indices."""

    video_id: str
    dim: int
    frames: dict[int, dict[int, np.ndarray]]

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "dim": self.dim,
            "frames": [
                {"frame_index": fi,
                 "subjects": [{"track_id": tid, "feature": vec.tolist()} for tid, vec in sorted(subjects.items())]}
                for fi, subjects in sorted(self.frames.items())
            ],
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "FeatureTable":
        dim = int(doc["dim"])
        frames: dict[int, dict[int, np.ndarray]] = {}
        for rec in doc["frames"]:
            subjects = {}
            for s in rec["subjects"]:
                vec = np.asarray(s["feature"], dtype=np.float64)
                if vec.shape != (dim,):
                    raise DimensionError(f"frame {rec['frame_index']}, track {s['track_id']}: "
                                         f"feature length {vec.size} != {dim}")
                subjects[int(s["track_id"])] = vec
            frames[int(rec["frame_index"])] = subjects
        return cls(str(doc["video_id"]), dim, frames)

    def to_bytes(self) -> bytes:
        return canonical_json(self.to_json())


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass
class VideoSample:
    """One video prepared for the graph: frames renumbered 1..T, spans in that numbering."""

    video_id: str
    frames: list[list[SubjectNode]]
    triplets: list[Triplet]

    @property
    def num_frames(self) -> int:
        return len(self.frames)


def make_sample(ann: AnnotationFile, table: FeatureTable, sampling_rate: int = 1) -> VideoSample:
    if not ann.data:
        return VideoSample(ann.video_id, [], [])
    first = ann.data[0].frame_index
    kept = [rec.frame_index for rec in ann.data if (rec.frame_index - first) % sampling_rate == 0]
    reduced = normalize_frames(subsample_frames(ann, sampling_rate))
    frames = []
    for original, rec in zip(kept, reduced.data):
        vectors = table.frames.get(original, {})
        subjects = []
        for seg, region in rec.subjects():
            if seg.track_id not in vectors:
                raise KeyError(f"{ann.video_id}: no feature for track {seg.track_id} in frame {original}")
            subjects.append(SubjectNode(seg.track_id, seg.kind, seg.category_id,
                                        _normalized_box(ann, region.bbox), vectors[seg.track_id]))
        frames.append(subjects)
    return VideoSample(ann.video_id, frames, extract_ground_truth_triplets(reduced))


def _normalized_box(ann: AnnotationFile, bbox) -> tuple[float, float, float, float]:
    if ann.box_format == "pixel":
        w, h = ann.image_size
        x1, y1, x2, y2 = bbox
        return (x1 / w, y1 / h, x2 / w, y2 / h)
    return tuple(bbox)


def read_manifest(root: Path) -> dict:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"missing manifest: {path}")
    return json.loads(path.read_text("utf-8"))


def load_video(root: Path, video_id: str, sampling_rate: int = 1) -> VideoSample:
    ann_file = annotation_path(root, video_id)
    feat_file = features_path(root, video_id)
    for p in (ann_file, feat_file):
        if not p.is_file():
            raise FileNotFoundError(f"missing file: {p}")
    ann = parse_annotations(ann_file.read_bytes())
    table = FeatureTable.from_json(json.loads(feat_file.read_text("utf-8")))
    return make_sample(ann, table, sampling_rate)


def load_dataset(root: Path, split: str | None = None, sampling_rate: int = 1) -> list[VideoSample]:
    manifest = read_manifest(root)
    ids = [v["id"] for v in manifest["videos"] if split is None or v.get("split") == split]
    return [load_video(root, vid, sampling_rate) for vid in ids]


def load_ground_truth(root: Path, video_ids: Sequence[str] | None = None,
                      sampling_rate: int = 1) -> dict[str, list[Triplet]]:
    manifest = read_manifest(root)
    out = {}
    for v in manifest["videos"]:
        if video_ids is not None and v["id"] not in video_ids:
            continue
        path = annotation_path(root, v["id"])
        if not path.is_file():
            raise FileNotFoundError(f"missing file: {path}")
        ann = normalize_frames(subsample_frames(parse_annotations(path.read_bytes()), sampling_rate))
        out[v["id"]] = extract_ground_truth_triplets(ann)
    return out
