"""Focal-loss training over every hierarchy level with staged unfreezing."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .annotations import Triplet, canonical_json
from .classifier import DOUBLE_ACTOR, SINGLE_ACTOR, ApplicabilityMask, Category
from .data import VideoSample
from .errors import DivergenceError
from .graph import GraphCell, HierarchyConfig, build_base_level
from .model import CellLogits, HIGModel

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "hig-checkpoint/1"


@dataclass(frozen=True)
class FocalLossParams:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.gamma < 0.0:
            raise ValueError("gamma must be >= 0")


def focal_loss(p: float, y: int, params: FocalLossParams = FocalLossParams()) -> float:
    """``-a_t (1 - p_t)^gamma log(p_t)`` with ``p_t = p`` for positives and ``1 - p`` otherwise."""
    return float(nx.focal_terms(np.float64(p), np.float64(y), params.alpha, params.gamma))


# ---------------------------------------------------------------------------
# Unfreezing schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Stage:
    epochs: int
    levels: frozenset[int]


@dataclass(frozen=True)
class UnfreezeSchedule:
    stages: tuple[Stage, ...]

    def __post_init__(self):
        if not self.stages:
            raise ValueError("schedule needs at least one stage")
        prev: frozenset[int] = frozenset()
        for s in self.stages:
            if s.epochs < 1:
                raise ValueError("every stage needs at least one epoch")
            if not prev <= s.levels:
                raise ValueError("levels must unfreeze monotonically")
            prev = s.levels

    @classmethod
    def sequential(cls, levels: int, epochs_per_stage: int) -> "UnfreezeSchedule":
        """Level 1 alone first, then one more level per stage."""
        return cls(tuple(Stage(epochs_per_stage, frozenset(range(1, n + 1))) for n in range(1, levels + 1)))

    @classmethod
    def single(cls, levels: int, epochs: int) -> "UnfreezeSchedule":
        return cls((Stage(epochs, frozenset(range(1, levels + 1))),))

    @property
    def total_epochs(self) -> int:
        return sum(s.epochs for s in self.stages)

    def stage_index(self, epoch: int) -> int:
        end = 0
        for i, s in enumerate(self.stages):
            end += s.epochs
            if epoch < end:
                return i
        return len(self.stages) - 1

    def to_json(self) -> list:
        return [{"epochs": s.epochs, "levels": sorted(s.levels)} for s in self.stages]

    @classmethod
    def from_json(cls, data: Sequence[Mapping]) -> "UnfreezeSchedule":
        return cls(tuple(Stage(int(s["epochs"]), frozenset(int(l) for l in s["levels"])) for s in data))


def apply_unfreezing(schedule: UnfreezeSchedule, epoch: int) -> frozenset[int]:
    """Trainable levels at 0-based ``epoch``; epochs past the end stay in the last stage."""
    return schedule.stages[schedule.stage_index(epoch)].levels


@dataclass
class TrainConfig:
    epochs_per_stage: int = 20
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 1
    alpha: float = 0.25
    gamma: float = 2.0
    seed: int = 0
    shuffle: bool = True
    sequential: bool = True
    schedule: list | None = None  # explicit stages override epochs_per_stage/sequential
    clip_norm: float | None = None  # rescale the global gradient norm down to this value

    def __post_init__(self):
        if self.epochs_per_stage < 1 or self.batch_size < 1:
            raise ValueError("epochs_per_stage and batch_size must be positive")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")

    @property
    def focal(self) -> FocalLossParams:
        return FocalLossParams(self.alpha, self.gamma)

    def build_schedule(self, levels: int) -> UnfreezeSchedule:
        if self.schedule is not None:
            return UnfreezeSchedule.from_json(self.schedule)
        if self.sequential:
            return UnfreezeSchedule.sequential(levels, self.epochs_per_stage)
        return UnfreezeSchedule.single(levels, self.epochs_per_stage)


# ---------------------------------------------------------------------------
# Targets and losses
# ---------------------------------------------------------------------------


@dataclass
class CellTargets:
    """Positive predicate sets per node ``(track, category)`` and per pair ``((subject, object), category)``."""

    nodes: dict[tuple[int, Category], set[int]] = field(default_factory=dict)
    pairs: dict[tuple[tuple[int, int], Category], set[int]] = field(default_factory=dict)

    def node_row(self, track: int, category: Category, size: int) -> np.ndarray:
        row = np.zeros(size)
        row[list(self.nodes.get((track, category), ()))] = 1.0
        return row

    def pair_row(self, subject: int, obj: int, category: Category, size: int) -> np.ndarray:
        row = np.zeros(size)
        row[list(self.pairs.get(((subject, obj), category), ()))] = 1.0
        return row


def assign_labels(triplets: Sequence[Triplet], level: int, start: int,
                  vocab: Mapping[Category, int] | None = None) -> CellTargets:
    """A predicate is positive for the cell iff its window lies inside the triplet's span."""
    lo, hi = start, start + level - 1
    out = CellTargets()
    for tr in triplets:
        if not (tr.span[0] <= lo and hi <= tr.span[1]):
            continue
        if vocab is not None and not 0 <= tr.predicate < vocab[tr.category]:
            continue
        if tr.object is None:
            out.nodes.setdefault((tr.subject, tr.category), set()).add(tr.predicate)
        else:
            out.pairs.setdefault(((tr.subject, tr.object), tr.category), set()).add(tr.predicate)
    return out


def cell_targets(cl: CellLogits, triplets: Sequence[Triplet],
                 vocab: Mapping[Category, int]) -> dict[Category, np.ndarray]:
    """Dense 0/1 target matrices for one cell, rows aligned with its nodes or edges."""
    cell = cl.cell
    targets = assign_labels(triplets, cell.level, cell.start, vocab)
    out = {}
    for c in SINGLE_ACTOR:
        if c in cl.node:
            out[c] = np.stack([targets.node_row(n.track_id, c, vocab[c]) for n in cell.nodes])
    for c in DOUBLE_ACTOR:
        if c in cl.edge:
            out[c] = np.stack([targets.pair_row(r, s, c, vocab[c]) for s, r in cell.edges])
    return out


def cell_loss_terms(cl: CellLogits, targets: Mapping[Category, np.ndarray], vocab: Mapping[Category, int],
                    params: FocalLossParams) -> tuple[list[nx.Tensor], int]:
    """Summed focal terms for one cell and the number of unmasked entries they cover."""
    terms, count = [], 0
    for c in SINGLE_ACTOR:
        if c not in cl.node:
            continue
        y = targets[c]
        terms.append(nx.focal_loss_sum(cl.node[c], y, np.ones_like(y), params.alpha, params.gamma))
        count += y.size
    for c in DOUBLE_ACTOR:
        if c not in cl.edge:
            continue
        allowed = cl.edge_mask[c]
        if not allowed.any():
            continue
        w = np.repeat(allowed[:, None], vocab[c], axis=1)
        terms.append(nx.focal_loss_sum(cl.edge[c], targets[c], w, params.alpha, params.gamma))
        count += int(w.sum())
    return terms, count


class TargetCache:
    """Memoizes per-cell target matrices; keys include the cell's node and edge sets."""

    def __init__(self, triplets: Sequence[Triplet], vocab: Mapping[Category, int]):
        self.triplets = list(triplets)
        self.vocab = vocab
        self._store: dict[tuple, dict[Category, np.ndarray]] = {}

    def __call__(self, cl: CellLogits) -> dict[Category, np.ndarray]:
        cell = cl.cell
        key = (cell.level, cell.start, tuple(cell.track_ids), tuple(cell.edges))
        if key not in self._store:
            self._store[key] = cell_targets(cl, self.triplets, self.vocab)
        return self._store[key]


def level_loss(level_logits: Sequence[CellLogits], triplets: Sequence[Triplet] | TargetCache,
               vocab: Mapping[Category, int], params: FocalLossParams) -> nx.Tensor | None:
    """Mean focal loss over every unmasked entry of every cell at one level."""
    targets_for = triplets if isinstance(triplets, TargetCache) else TargetCache(triplets, vocab)
    terms, count = [], 0
    for cl in level_logits:
        t, n = cell_loss_terms(cl, targets_for(cl), vocab, params)
        terms.extend(t)
        count += n
    if not count:
        return None
    return nx.scale(nx.add_n(terms), 1.0 / count)


def total_loss(level_losses: Sequence[nx.Tensor]) -> nx.Tensor:
    return nx.add_n(level_losses)


def video_losses(model: HIGModel, cells: Sequence[GraphCell], triplets: Sequence[Triplet] | TargetCache,
                 params: FocalLossParams) -> dict[int, nx.Tensor]:
    """Per-level losses for one video, keyed by level."""
    _, logits = model.forward(cells)
    if not isinstance(triplets, TargetCache):
        triplets = TargetCache(triplets, model.vocab)
    out = {}
    for l, level in enumerate(logits, start=1):
        loss = level_loss(level, triplets, model.vocab, params)
        if loss is not None:
            out[l] = loss
    return out


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def clip_gradients(params: Sequence[nx.Parameter], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if norm > max_norm:
        for p in params:
            p.grad *= max_norm / norm
    return norm


@dataclass
class EpochMetrics:
    epoch: int
    stage: int
    trainable: list[int]
    loss: float
    level_losses: dict[int, float]


@dataclass
class Trainer:
    model: HIGModel
    config: TrainConfig
    optimizer: nx.AdamW = None
    rng: np.random.Generator = None
    epoch: int = 0
    history: list[EpochMetrics] = field(default_factory=list)

    def __post_init__(self):
        if self.optimizer is None:
            self.optimizer = nx.AdamW(lr=self.config.lr, weight_decay=self.config.weight_decay)
        if self.rng is None:
            self.rng = np.random.default_rng(self.config.seed)
        self.schedule = self.config.build_schedule(self.model.config.levels)
        self._cells: dict[str, list[GraphCell]] = {}
        self._targets: dict[str, TargetCache] = {}

    def base_cells(self, sample: VideoSample) -> list[GraphCell]:
        if sample.video_id not in self._cells:
            self._cells[sample.video_id] = build_base_level(sample.frames, self.model.config.k,
                                                            self.model.config.dims[0])
        return self._cells[sample.video_id]

    def train_epoch(self, samples: Sequence[VideoSample]) -> EpochMetrics:
        trainable = apply_unfreezing(self.schedule, self.epoch)
        self.model.set_trainable_levels(set(trainable))
        params = self.model.parameters()
        focal = self.config.focal
        order = np.arange(len(samples))
        if self.config.shuffle:
            self.rng.shuffle(order)
        totals, per_level = [], {}
        bs = self.config.batch_size
        for b in range(0, len(order), bs):
            roots = []
            for idx in order[b:b + bs]:
                sample = samples[idx]
                if not sample.frames:
                    continue
                targets = self._targets.setdefault(sample.video_id, TargetCache(sample.triplets, self.model.vocab))
                losses = video_losses(self.model, self.base_cells(sample), targets, focal)
                for l, loss in losses.items():
                    if not math.isfinite(loss.item()):
                        raise DivergenceError(f"non-finite loss in video {sample.video_id}, level {l}",
                                              video_id=sample.video_id, level=l)
                    per_level.setdefault(l, []).append(loss.item())
                totals.append(sum(loss.item() for loss in losses.values()))
                active = [loss for l, loss in losses.items() if l in trainable]
                if active:
                    roots.append(total_loss(active))
            if not roots:
                continue
            root = nx.scale(nx.add_n(roots), 1.0 / len(roots))
            nx.run_backward(root, params)
            for p in params:
                if not np.all(np.isfinite(p.grad)):
                    raise DivergenceError(f"non-finite gradient for {p.name}")
            if self.config.clip_norm is not None:
                clip_gradients([p for p in params if not p.frozen], self.config.clip_norm)
            self.optimizer.step(params)
        metrics = EpochMetrics(
            epoch=self.epoch,
            stage=self.schedule.stage_index(self.epoch),
            trainable=sorted(trainable),
            loss=float(np.mean(totals)) if totals else 0.0,
            level_losses={l: float(np.mean(v)) for l, v in sorted(per_level.items())},
        )
        self.history.append(metrics)
        self.epoch += 1
        return metrics

    def fit(self, samples: Sequence[VideoSample], epochs: int | None = None,
            callback: Callable[[EpochMetrics], None] | None = None) -> list[EpochMetrics]:
        end = self.schedule.total_epochs if epochs is None else self.epoch + epochs
        while self.epoch < end:
            m = self.train_epoch(samples)
            log.info("epoch %d stage %d levels %s loss %.6f", m.epoch, m.stage, m.trainable, m.loss)
            if callback is not None:
                callback(m)
        return self.history


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def hierarchy_config_to_json(cfg: HierarchyConfig) -> dict:
    return {"levels": cfg.levels, "dims": list(cfg.dims), "k": cfg.k, "weight_sharing": cfg.weight_sharing.value,
            "confidence_threshold": cfg.confidence_threshold, "nonlinearity": cfg.nonlinearity.value}


def _rng_state(rng: np.random.Generator) -> dict:
    return json.loads(json.dumps(rng.bit_generator.state))


def _restore_rng(state: Mapping) -> np.random.Generator:
    bit_gen = getattr(np.random, state["bit_generator"])()
    bit_gen.state = dict(state)
    return np.random.Generator(bit_gen)


def checkpoint_dict(trainer: Trainer, extra: Mapping | None = None) -> dict:
    model = trainer.model
    return {
        "format": CHECKPOINT_FORMAT,
        "hierarchy": hierarchy_config_to_json(model.config),
        "vocab": {c.value: v for c, v in model.vocab.items()},
        "hidden": model.hidden,
        "mask": model.mask.to_dict(),
        "train": asdict(trainer.config),
        "params": model.state_dict(),
        "optimizer": trainer.optimizer.state_dict(),
        "rng": _rng_state(trainer.rng),
        "epoch": trainer.epoch,
        "history": [asdict(m) for m in trainer.history],
        "meta": dict(extra or {}),
    }


def save_checkpoint(trainer: Trainer, path: Path, extra: Mapping | None = None) -> None:
    Path(path).write_bytes(canonical_json(checkpoint_dict(trainer, extra)))


def model_from_checkpoint(doc: Mapping) -> HIGModel:
    cfg = HierarchyConfig(**doc["hierarchy"])
    model = HIGModel(cfg, {Category(c): v for c, v in doc["vocab"].items()}, doc["hidden"],
                     ApplicabilityMask.from_dict(doc["mask"]))
    model.load_state_dict(doc["params"])
    return model


def load_checkpoint(path: Path) -> tuple[Trainer, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    doc = json.loads(path.read_text("utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    model = model_from_checkpoint(doc)
    trainer = Trainer(
        model=model,
        config=TrainConfig(**doc["train"]),
        optimizer=nx.AdamW.from_state_dict(doc["optimizer"]),
        rng=_restore_rng(doc["rng"]),
        epoch=int(doc["epoch"]),
        history=[EpochMetrics(m["epoch"], m["stage"], m["trainable"], m["loss"],
                              {int(k): v for k, v in m["level_losses"].items()}) for m in doc["history"]],
    )
    return trainer, doc
