"""Triplet matching and recall metrics (R@K, mR@K).

A prediction matches a ground-truth triplet when category and predicate agree,
the subject/object track ids agree (unless identity matching is switched off)
and the temporal IoU of the spans reaches ``tau``.  The top ``K`` predictions
are matched greedily in rank order, each to at most one unmatched triplet.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .annotations import Triplet, canonical_json
from .classifier import CATEGORIES, Category, InteractivityPrediction, rank_key
from .data import load_ground_truth, read_manifest

DEFAULT_KS = (20, 50, 100)
PREDICTIONS_SUFFIX = ".predictions.json"


@dataclass(frozen=True)
class MatchCriteria:
    identity: bool = True
    tau: float = 0.5
    average: str = "macro"  # or "micro"

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.average not in ("macro", "micro"):
            raise ValueError("average must be 'macro' or 'micro'")


def temporal_iou(a: Sequence[int], b: Sequence[int]) -> float:
    """IoU of two inclusive integer frame intervals."""
    if a[0] > a[1] or b[0] > b[1]:
        raise ValueError(f"spans must be ordered: {a}, {b}")
    inter = min(a[1], b[1]) - max(a[0], b[0]) + 1
    if inter <= 0:
        return 0.0
    union = max(a[1], b[1]) - min(a[0], b[0]) + 1
    return inter / union


def is_match(pred: InteractivityPrediction, gt: Triplet, criteria: MatchCriteria = MatchCriteria()) -> bool:
    if pred.category is not gt.category or pred.predicate != gt.predicate:
        return False
    if criteria.identity and (pred.subject != gt.subject or pred.object != gt.object):
        return False
    return temporal_iou(pred.span, gt.span) >= criteria.tau


def rank(predictions: Iterable[InteractivityPrediction]) -> list[InteractivityPrediction]:
    return sorted(predictions, key=rank_key)


def greedy_match(predictions: Sequence[InteractivityPrediction], ground_truth: Sequence[Triplet], k: int,
                 criteria: MatchCriteria = MatchCriteria()) -> list[tuple[int, int]]:
    """``(prediction index, gt index)`` pairs, indices into the ranked top-``k`` and ``ground_truth``."""
    top = rank(predictions)[:k]
    taken = [False] * len(ground_truth)
    pairs = []
    for i, p in enumerate(top):
        for j, g in enumerate(ground_truth):
            if not taken[j] and is_match(p, g, criteria):
                taken[j] = True
                pairs.append((i, j))
                break
    return pairs


def video_recall(predictions: Sequence[InteractivityPrediction], ground_truth: Sequence[Triplet], k: int,
                 criteria: MatchCriteria = MatchCriteria()) -> float | None:
    """Matched fraction of ``ground_truth``; ``None`` when there is no ground truth."""
    if not ground_truth:
        return None
    return len(greedy_match(predictions, ground_truth, k, criteria)) / len(ground_truth)


def _class_counts(predictions, ground_truth, k, criteria) -> dict[tuple, list[int]]:
    """Per predicate class ``(category, predicate)``: [matched, total]."""
    counts: dict[tuple, list[int]] = defaultdict(lambda: [0, 0])
    for g in ground_truth:
        counts[(g.category, g.predicate)][1] += 1
    for _, j in greedy_match(predictions, ground_truth, k, criteria):
        g = ground_truth[j]
        counts[(g.category, g.predicate)][0] += 1
    return counts


def video_mean_recall(predictions: Sequence[InteractivityPrediction], ground_truth: Sequence[Triplet], k: int,
                      criteria: MatchCriteria = MatchCriteria()) -> float | None:
    """Unweighted mean over predicate classes present in ``ground_truth`` of their recall."""
    if not ground_truth:
        return None
    counts = _class_counts(predictions, ground_truth, k, criteria)
    return math.fsum(m / n for m, n in counts.values()) / len(counts)


@dataclass
class RecallResult:
    value: float
    per_video: dict[str, float] = field(default_factory=dict)
    excluded: list[str] = field(default_factory=list)  # videos without ground truth


def _video_ids(predictions: Mapping, ground_truth: Mapping) -> list[str]:
    return sorted(set(predictions) | set(ground_truth))


def recall_at_k(predictions: Mapping[str, Sequence[InteractivityPrediction]],
                ground_truth: Mapping[str, Sequence[Triplet]], k: int,
                criteria: MatchCriteria = MatchCriteria()) -> RecallResult:
    per_video, excluded = {}, []
    matched = total = 0
    for vid in _video_ids(predictions, ground_truth):
        gt = list(ground_truth.get(vid, ()))
        if not gt:
            excluded.append(vid)
            continue
        m = len(greedy_match(predictions.get(vid, ()), gt, k, criteria))
        per_video[vid] = m / len(gt)
        matched += m
        total += len(gt)
    if not per_video:
        return RecallResult(0.0, per_video, excluded)
    if criteria.average == "micro":
        value = matched / total
    else:
        value = math.fsum(per_video.values()) / len(per_video)
    return RecallResult(value, per_video, excluded)


def mean_recall_at_k(predictions: Mapping[str, Sequence[InteractivityPrediction]],
                     ground_truth: Mapping[str, Sequence[Triplet]], k: int,
                     criteria: MatchCriteria = MatchCriteria()) -> RecallResult:
    per_video, excluded = {}, []
    pooled: dict[tuple, list[int]] = defaultdict(lambda: [0, 0])
    for vid in _video_ids(predictions, ground_truth):
        gt = list(ground_truth.get(vid, ()))
        if not gt:
            excluded.append(vid)
            continue
        counts = _class_counts(predictions.get(vid, ()), gt, k, criteria)
        per_video[vid] = math.fsum(m / n for m, n in counts.values()) / len(counts)
        for cls, (m, n) in counts.items():
            pooled[cls][0] += m
            pooled[cls][1] += n
    if not per_video:
        return RecallResult(0.0, per_video, excluded)
    if criteria.average == "micro":
        value = math.fsum(m / n for m, n in pooled.values()) / len(pooled)
    else:
        value = math.fsum(per_video.values()) / len(per_video)
    return RecallResult(value, per_video, excluded)


# ---------------------------------------------------------------------------
# Metric tables
# ---------------------------------------------------------------------------


@dataclass
class MetricRow:
    category: str
    k: int
    recall: float
    mean_recall: float
    videos: int
    excluded: int


def evaluate_predictions(predictions: Mapping[str, Sequence[InteractivityPrediction]],
                         ground_truth: Mapping[str, Sequence[Triplet]],
                         ks: Sequence[int] = DEFAULT_KS,
                         criteria: MatchCriteria = MatchCriteria()) -> list[MetricRow]:
    """One row per (category, K); each category ranks and matches only its own predictions."""
    rows = []
    for c in CATEGORIES:
        preds_c = {v: [p for p in ps if p.category is c] for v, ps in predictions.items()}
        gt_c = {v: [g for g in gs if g.category is c] for v, gs in ground_truth.items()}
        for k in ks:
            r = recall_at_k(preds_c, gt_c, k, criteria)
            mr = mean_recall_at_k(preds_c, gt_c, k, criteria)
            rows.append(MetricRow(c.value, int(k), r.value, mr.value, len(r.per_video), len(r.excluded)))
    return rows


def metrics_csv(rows: Sequence[MetricRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["category", "K", "R", "mR", "videos", "excluded"])
    for r in rows:
        writer.writerow([r.category, r.k, f"{r.recall:.6f}", f"{r.mean_recall:.6f}", r.videos, r.excluded])
    return buf.getvalue()


def write_metrics(rows: Sequence[MetricRow], out_dir: Path, extra: Mapping | None = None) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.csv").write_text(metrics_csv(rows), "utf-8")
    doc = {"metrics": [asdict(r) for r in rows], **dict(extra or {})}
    (out_dir / "metrics.json").write_bytes(canonical_json(doc))
    return doc


# ---------------------------------------------------------------------------
# Prediction interchange
# ---------------------------------------------------------------------------


def predictions_path(pred_dir: Path, video_id: str) -> Path:
    return Path(pred_dir) / f"{video_id}{PREDICTIONS_SUFFIX}"


def write_predictions(path: Path, predictions: Iterable[InteractivityPrediction]) -> None:
    Path(path).write_bytes(canonical_json([p.to_dict() for p in predictions]))


def read_predictions(path: Path) -> list[InteractivityPrediction]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing predictions file: {path}")
    return [InteractivityPrediction.from_dict(d) for d in json.loads(path.read_text("utf-8"))]


def ground_truth_as_predictions(triplets: Iterable[Triplet], confidence: float = 1.0) -> list[InteractivityPrediction]:
    return [InteractivityPrediction(t.subject, t.object, t.category, t.predicate, confidence, t.span,
                                    t.span[1] - t.span[0] + 1) for t in triplets]


def evaluate_run(pred_dir: Path, dataset_dir: Path, ks: Sequence[int] = DEFAULT_KS,
                 criteria: MatchCriteria = MatchCriteria(), split: str | None = None,
                 sampling_rate: int = 1) -> list[MetricRow]:
    """Score ``<pred_dir>/<video_id>.predictions.json`` against the dataset's annotations."""
    ids = [v["id"] for v in read_manifest(dataset_dir)["videos"] if split is None or v.get("split") == split]
    ground_truth = load_ground_truth(dataset_dir, ids, sampling_rate)
    predictions = {vid: read_predictions(predictions_path(pred_dir, vid)) for vid in ids}
    return evaluate_predictions(predictions, ground_truth, ks, criteria)


def category_rows(rows: Sequence[MetricRow], category: Category | str) -> list[MetricRow]:
    value = Category(category).value
    return [r for r in rows if r.category == value]
