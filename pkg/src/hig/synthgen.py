"""Planted-truth synthetic videos.

Each video has a handful of tracked subjects with drifting boxes and a
schedule of interactivity spans.  The feature of a subject in a frame is

    embed(category_id) + sum of the embeddings of every label active on it + N(0, noise^2)

so the labels are recoverable from the features and ``noise`` sets how hard
that is.  Double-actor predicates carry two embeddings, one added to the
subject and one to the object, so the direction of a pair is visible too.

Embeddings come from the scenario's master seed and are shared by every video
of a dataset.  Everything else in a video comes from that video's own seed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np

from .annotations import (
    SCHEMA_VERSION,
    AnnotationFile,
    FrameRecord,
    RegionAnnotation,
    SegmentInfo,
    Triplet,
    Vocabulary,
    canonical_json,
    write_annotations,
)
from .classifier import CATEGORIES, DOUBLE_ACTOR, FULL_VOCAB, SINGLE_ACTOR, ApplicabilityMask, Category
from .data import MANIFEST, VIDEOS_DIR, FeatureTable, annotation_path, features_path, sha256
from .errors import ConfigError, EmptyInputError
from .graph import Kind

DEFAULT_OBJECT_CATEGORIES = 833


@dataclass
class ScenarioConfig:
    videos: int = 3
    frames: int = 8
    min_subjects: int = 2
    max_subjects: int = 5
    person_ratio: float = 0.5
    vocab: dict = field(default_factory=lambda: {c.value: n for c, n in FULL_VOCAB.items()})
    object_categories: int = DEFAULT_OBJECT_CATEGORIES
    feature_dim: int = 32
    noise: float = 0.05
    density: float = 1.0          # expected double-actor spans per ordered subject pair
    single_density: float = 1.0   # expected spans per subject for each single-actor category
    drift: float = 0.02
    train_fraction: float = 0.8
    fps: float = 30.0
    seed: int = 0
    mask: dict | None = None      # ApplicabilityMask.to_dict() form; None means the default mask

    def __post_init__(self):
        self.vocab = {Category(c).value: int(n) for c, n in self.vocab.items()}
        missing = [c.value for c in CATEGORIES if c.value not in self.vocab]
        if missing:
            raise ConfigError(f"vocab sizes missing for {missing}")
        if self.videos < 1 or self.frames < 1:
            raise ConfigError("videos and frames must be positive")
        if not 0 <= self.min_subjects <= self.max_subjects:
            raise ConfigError("need 0 <= min_subjects <= max_subjects")
        if min(self.vocab.values()) < 1 or self.object_categories < 1 or self.feature_dim < 1:
            raise ConfigError("vocabulary sizes and feature_dim must be positive")
        if self.noise < 0 or self.density < 0 or self.single_density < 0 or self.drift < 0:
            raise ConfigError("noise, densities and drift must be non-negative")
        if not 0.0 <= self.person_ratio <= 1.0 or not 0.0 <= self.train_fraction <= 1.0:
            raise ConfigError("person_ratio and train_fraction must lie in [0, 1]")
        if self.fps <= 0:
            raise ConfigError("fps must be positive")
        self.applicability()  # fail early on a bad mask

    def applicability(self) -> ApplicabilityMask:
        return ApplicabilityMask.default() if self.mask is None else ApplicabilityMask.from_dict(self.mask)

    def category_sizes(self) -> dict[Category, int]:
        return {Category(c): n for c, n in self.vocab.items()}

    def vocabulary(self) -> Vocabulary:
        sizes = {"objects": self.object_categories}
        sizes.update({Category(c).descriptor: n for c, n in self.vocab.items()})
        return Vocabulary(sizes)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: Mapping) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown scenario keys: {unknown}")
        try:
            return cls(**doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad scenario: {exc}") from exc


@dataclass
class Embeddings:
    """``objects`` rows index category ids; ``subject[c]``/``object[c]`` rows index predicates."""

    objects: np.ndarray
    subject: dict[Category, np.ndarray]
    object: dict[Category, np.ndarray]

    @classmethod
    def draw(cls, config: ScenarioConfig) -> "Embeddings":
        rng = np.random.default_rng(config.seed)
        d = config.feature_dim

        def table(rows):
            return rng.standard_normal((rows, d)) / math.sqrt(d)

        objects = table(config.object_categories)
        sizes = config.category_sizes()
        subject = {c: table(sizes[c]) for c in CATEGORIES}
        obj = {c: table(sizes[c]) for c in DOUBLE_ACTOR}
        return cls(objects, subject, obj)


class GeneratedVideo(NamedTuple):
    annotations: AnnotationFile
    features: FeatureTable
    triplets: list[Triplet]


@dataclass
class _Track:
    track_id: int
    kind: Kind
    category_id: int
    boxes: list[tuple[float, float, float, float]]


def _tracks(config: ScenarioConfig, rng: np.random.Generator) -> list[_Track]:
    n = int(rng.integers(config.min_subjects, config.max_subjects + 1))
    out = []
    for i in range(n):
        kind = Kind.PERSON if rng.random() < config.person_ratio else Kind.OBJECT
        category = int(rng.integers(config.object_categories))
        w, h = rng.uniform(0.1, 0.3, size=2)
        cx, cy = rng.uniform(0.2, 0.8, size=2)
        vx, vy = rng.uniform(-config.drift, config.drift, size=2)
        boxes = []
        for t in range(config.frames):
            x = float(np.clip(cx + vx * t, w / 2, 1 - w / 2))
            y = float(np.clip(cy + vy * t, h / 2, 1 - h / 2))
            boxes.append(tuple(round(v, 6) for v in (x - w / 2, y - h / 2, x + w / 2, y + h / 2)))
        out.append(_Track(i + 1, kind, category, boxes))
    return out


def _clear_of(span: tuple[int, int], taken: list[tuple[int, int]]) -> bool:
    """True when ``span`` neither overlaps nor touches any span in ``taken``."""
    return all(span[1] < a - 1 or span[0] > b + 1 for a, b in taken)


def _schedule(key_base: tuple, size: int, count: int, frames: int, used: dict,
              rng: np.random.Generator) -> list[Triplet]:
    """Place ``count`` spans on ``key_base = (subject, object, category)``.

    Unused predicates are preferred so most triples own a single span.  A
    reused predicate only gets a span that stays clear of its earlier ones,
    which keeps span extraction exact.
    """
    out = []
    for _ in range(count):
        length = int(rng.integers(1, frames + 1))
        start = int(rng.integers(1, frames - length + 2))
        span = (start, start + length - 1)
        fresh = [p for p in range(size) if (*key_base, p) not in used]
        if fresh:
            predicate = int(fresh[rng.integers(len(fresh))])
        else:
            predicate = int(rng.integers(size))
            if not _clear_of(span, used[(*key_base, predicate)]):
                continue
        used.setdefault((*key_base, predicate), []).append(span)
        out.append(Triplet(key_base[0], key_base[1], key_base[2], predicate, span))
    return out


def generate_video(config: ScenarioConfig, seed: int, video_id: str = "video",
                   embeddings: Embeddings | None = None) -> GeneratedVideo:
    """One synthetic video: annotation file, feature table and the planted span schedule."""
    rng = np.random.default_rng(seed)
    emb = embeddings if embeddings is not None else Embeddings.draw(config)
    mask = config.applicability()
    sizes = config.category_sizes()
    tracks = _tracks(config, rng)
    if not tracks:
        raise EmptyInputError(f"{video_id}: scenario produced no subjects")
    T = config.frames

    used: dict[tuple, list] = {}
    planted: list[Triplet] = []
    for tr in tracks:
        for c in SINGLE_ACTOR:
            planted += _schedule((tr.track_id, None, c), sizes[c], int(rng.poisson(config.single_density)),
                                 T, used, rng)
    for si in tracks:
        for oj in tracks:
            if si is oj:
                continue
            allowed = [c for c in DOUBLE_ACTOR if mask.allows(c, si.kind, oj.kind)]
            if not allowed:
                continue
            for _ in range(int(rng.poisson(config.density))):
                c = allowed[int(rng.integers(len(allowed)))]
                planted += _schedule((si.track_id, oj.track_id, c), sizes[c], 1, T, used, rng)
    planted.sort(key=Triplet.sort_key)

    noise = rng.standard_normal((T, len(tracks), config.feature_dim)) * config.noise
    frames, table = [], {}
    for t in range(1, T + 1):
        active = [p for p in planted if p.span[0] <= t <= p.span[1]]
        vectors = {}
        segments, regions = [], []
        for i, tr in enumerate(tracks):
            vec = emb.objects[tr.category_id] + noise[t - 1, i]
            labels = {c: [] for c in CATEGORIES}
            for p in active:
                if p.subject == tr.track_id:
                    vec = vec + emb.subject[p.category][p.predicate]
                    labels[p.category].append(p.predicate if p.object is None else (p.object, p.predicate))
                elif p.object == tr.track_id:
                    vec = vec + emb.object[p.category][p.predicate]
            vectors[tr.track_id] = vec
            segments.append(SegmentInfo(i + 1, tr.category_id, tr.kind, tr.track_id))
            regions.append(RegionAnnotation(
                segment_id=i + 1,
                bbox=tr.boxes[t - 1],
                appearances=sorted(labels[Category.APPEARANCE]),
                situations=sorted(labels[Category.SITUATION]),
                positions=sorted(labels[Category.POSITION]),
                interactions=sorted(labels[Category.INTERACTION]),
                relations=sorted(labels[Category.RELATION]),
            ))
        frames.append(FrameRecord(t, segments, regions))
        table[t] = vectors
    ann = AnnotationFile(video_id=video_id, vocabulary=config.vocabulary(), data=frames, fps=config.fps)
    return GeneratedVideo(ann, FeatureTable(video_id, config.feature_dim, table), planted)


def video_seeds(config: ScenarioConfig) -> list[int]:
    """Per-video seeds derived from the master seed; independent of generation order."""
    children = np.random.SeedSequence(config.seed).spawn(config.videos)
    return [int(child.generate_state(1, dtype=np.uint64)[0]) for child in children]


def split_ids(ids: list[str], fraction: float, seed: int) -> dict[str, str]:
    n_train = int(math.floor(fraction * len(ids) + 0.5))
    order = np.random.default_rng(seed).permutation(len(ids))
    train = {ids[i] for i in order[:n_train]}
    return {vid: "train" if vid in train else "val" for vid in ids}


def generate_dataset(config: ScenarioConfig, out_dir: Path) -> dict:
    """Write every video plus ``manifest.json`` under ``out_dir``; returns the manifest."""
    out_dir = Path(out_dir)
    (out_dir / VIDEOS_DIR).mkdir(parents=True, exist_ok=True)
    emb = Embeddings.draw(config)
    ids = [f"video_{i:04d}" for i in range(config.videos)]
    splits = split_ids(ids, config.train_fraction, config.seed)
    entries = []
    for vid, seed in zip(ids, video_seeds(config)):
        video = generate_video(config, seed, vid, emb)
        ann_bytes = write_annotations(video.annotations)
        feat_bytes = video.features.to_bytes()
        ann_file, feat_file = annotation_path(out_dir, vid), features_path(out_dir, vid)
        ann_file.write_bytes(ann_bytes)
        feat_file.write_bytes(feat_bytes)
        entries.append({
            "id": vid,
            "split": splits[vid],
            "seed": seed,
            "frames": video.annotations.num_frames,
            "subjects": len(video.annotations.data[0].segments_info),
            "annotations": ann_file.relative_to(out_dir).as_posix(),
            "features": feat_file.relative_to(out_dir).as_posix(),
            "sha256": {"annotations": sha256(ann_bytes), "features": sha256(feat_bytes)},
        })
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "scenario": config.to_json(),
        "vocabulary": config.vocabulary().to_json(),
        "videos": entries,
    }
    (out_dir / MANIFEST).write_bytes(canonical_json(manifest))
    return manifest
