"""Interactivity heads and cross-level prediction selection."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .errors import DimensionError
from .graph import Kind


class Category(str, Enum):
    APPEARANCE = "appearance"
    SITUATION = "situation"
    POSITION = "position"
    INTERACTION = "interaction"
    RELATION = "relation"

    @property
    def is_single_actor(self) -> bool:
        return self in SINGLE_ACTOR

    @property
    def descriptor(self) -> str:
        """Plural key used by the annotation files (``appearances``, ``positions`` ...)."""
        return self.value + "s"


SINGLE_ACTOR = (Category.APPEARANCE, Category.SITUATION)
DOUBLE_ACTOR = (Category.POSITION, Category.INTERACTION, Category.RELATION)
CATEGORIES = SINGLE_ACTOR + DOUBLE_ACTOR
CATEGORY_ORDER = {c: i for i, c in enumerate(CATEGORIES)}

# Interactivity vocabulary sizes of the real dataset.
FULL_VOCAB = {
    Category.APPEARANCE: 722,
    Category.SITUATION: 2902,
    Category.POSITION: 130,
    Category.INTERACTION: 565,
    Category.RELATION: 230,
}


@dataclass(frozen=True)
class ApplicabilityMask:
    """Which (subject kind, object kind) pairs may carry each double-actor category."""

    allowed: Mapping[Category, frozenset]

    def __post_init__(self):
        for c in DOUBLE_ACTOR:
            if not self.allowed.get(c):
                raise ValueError(f"mask allows no kind pair for {c.value}")

    @classmethod
    def default(cls) -> "ApplicabilityMask":
        P, O = Kind.PERSON, Kind.OBJECT
        return cls({
            Category.POSITION: frozenset({(P, P), (P, O)}),
            Category.INTERACTION: frozenset({(O, P)}),
            Category.RELATION: frozenset({(P, P), (P, O)}),
        })

    def allows(self, category: Category, subject: Kind, obj: Kind) -> bool:
        return (subject, obj) in self.allowed[category]

    def to_dict(self) -> dict:
        return {c.value: sorted([s.value, o.value] for s, o in self.allowed[c]) for c in DOUBLE_ACTOR}

    @classmethod
    def from_dict(cls, data: Mapping) -> "ApplicabilityMask":
        return cls({Category(c): frozenset((Kind(s), Kind(o)) for s, o in pairs) for c, pairs in data.items()})


@dataclass(frozen=True)
class InteractivityPrediction:
    subject: int
    object: int | None
    category: Category
    predicate: int
    confidence: float
    span: tuple[int, int]
    level: int = 1

    def __post_init__(self):
        object.__setattr__(self, "category", Category(self.category))
        object.__setattr__(self, "span", (int(self.span[0]), int(self.span[1])))
        if self.span[0] > self.span[1]:
            raise ValueError(f"span {self.span} is not ordered")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.category.is_single_actor != (self.object is None):
            raise ValueError(f"{self.category.value} prediction has wrong arity")

    @property
    def triple(self) -> tuple:
        return (self.subject, self.object, self.category, self.predicate)

    @property
    def pair_category(self) -> tuple:
        return (self.subject, self.object, self.category)

    def to_dict(self) -> dict:
        return {
            "subject": self.subject,
            "object": self.object,
            "category": self.category.value,
            "predicate": self.predicate,
            "confidence": self.confidence,
            "span": list(self.span),
            "level": self.level,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "InteractivityPrediction":
        return cls(
            subject=int(d["subject"]),
            object=None if d.get("object") is None else int(d["object"]),
            category=Category(d["category"]),
            predicate=int(d["predicate"]),
            confidence=float(d["confidence"]),
            span=tuple(d["span"]),
            level=int(d.get("level", 1)),
        )


def rank_key(p: InteractivityPrediction) -> tuple:
    """Confidence descending, then a total order on the remaining fields."""
    return (-p.confidence, CATEGORY_ORDER[p.category], p.subject,
            -1 if p.object is None else p.object, p.predicate, p.span, -p.level)


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------


class ClassifierHead:
    """Per-category linear read-outs, optionally behind one rectified hidden layer.

    The edge branch reads ``[message ; receiver feature]``; the node branch reads
    the node feature alone.
    """

    def __init__(self, feature_dim: int, vocab: Mapping[Category, int], hidden: int | None = None,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.feature_dim = int(feature_dim)
        self.vocab = {Category(c): int(v) for c, v in vocab.items()}
        self.hidden = int(hidden) if hidden else None
        self.params: dict[str, nx.Parameter] = {}

        def glorot(name, fan_in, fan_out):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.params[name] = nx.Parameter(rng.uniform(-bound, bound, (fan_in, fan_out)), name=name)

        def zeros(name, width):
            self.params[name] = nx.Parameter(np.zeros((1, width)), name=name)

        edge_in, node_in = 2 * self.feature_dim, self.feature_dim
        if self.hidden:
            glorot("head.edge.hidden.w", edge_in, self.hidden)
            zeros("head.edge.hidden.b", self.hidden)
            glorot("head.node.hidden.w", node_in, self.hidden)
            zeros("head.node.hidden.b", self.hidden)
            edge_in = node_in = self.hidden
        for c in CATEGORIES:
            glorot(f"head.{c.value}.w", edge_in if c in DOUBLE_ACTOR else node_in, self.vocab[c])
            zeros(f"head.{c.value}.b", self.vocab[c])

    def parameters(self) -> list[nx.Parameter]:
        return list(self.params.values())

    def _read_out(self, x: nx.Tensor, branch: str, categories) -> dict[Category, nx.Tensor]:
        p = self.params
        if self.hidden:
            x = nx.relu(nx.add(nx.mm(x, p[f"head.{branch}.hidden.w"]), p[f"head.{branch}.hidden.b"]))
        return {c: nx.add(nx.mm(x, p[f"head.{c.value}.w"]), p[f"head.{c.value}.b"]) for c in categories}

    def edge_logits(self, messages: nx.Tensor, receivers: nx.Tensor) -> dict[Category, nx.Tensor]:
        if messages.shape[1] != self.feature_dim or receivers.shape[1] != self.feature_dim:
            raise DimensionError(
                f"edge head expects width {self.feature_dim}, got {messages.shape[1]} and {receivers.shape[1]}"
            )
        return self._read_out(nx.concat([messages, receivers], axis=1), "edge", DOUBLE_ACTOR)

    def node_logits(self, features: nx.Tensor) -> dict[Category, nx.Tensor]:
        if features.shape[1] != self.feature_dim:
            raise DimensionError(f"node head expects width {self.feature_dim}, got {features.shape[1]}")
        return self._read_out(features, "node", SINGLE_ACTOR)


def classify_edge(message, feature_i, head: ClassifierHead, kinds: tuple[Kind, Kind] | None = None,
                  mask: ApplicabilityMask | None = None) -> dict[Category, np.ndarray]:
    """Double-actor logits for one edge; categories the mask rules out come back as ``-inf``."""
    m = nx.as_matrix(message).reshape(1, -1)
    f = nx.as_matrix(feature_i).reshape(1, -1)
    logits = {c: t.value[0] for c, t in head.edge_logits(nx.Tensor(m), nx.Tensor(f)).items()}
    if kinds is not None:
        mask = mask or ApplicabilityMask.default()
        for c in DOUBLE_ACTOR:
            if not mask.allows(c, *kinds):
                logits[c] = np.full(head.vocab[c], -np.inf)
    return logits


def classify_node(feature_i, head: ClassifierHead) -> dict[Category, np.ndarray]:
    f = nx.as_matrix(feature_i).reshape(1, -1)
    return {c: t.value[0] for c, t in head.node_logits(nx.Tensor(f)).items()}


# ---------------------------------------------------------------------------
# Selection across levels
# ---------------------------------------------------------------------------


def select_predictions(candidates: Iterable[InteractivityPrediction],
                       threshold: float = 0.9) -> list[InteractivityPrediction]:
    """Keep one prediction per triple from the highest level where it clears ``threshold``.

    Ties at that level go to the more confident (then earlier) cell.  A
    (pair, category) with nothing above threshold anywhere falls back to all of
    its level-1 predictions, whatever their confidence.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    candidates = list(candidates)
    best: dict[tuple, InteractivityPrediction] = {}
    for p in candidates:
        if p.confidence < threshold:
            continue
        cur = best.get(p.triple)
        if cur is None or (-p.level, rank_key(p)) < (-cur.level, rank_key(cur)):
            best[p.triple] = p
    confident_pairs = {p.pair_category for p in best.values()}
    fallback = [p for p in candidates if p.level == 1 and p.pair_category not in confident_pairs]
    return sorted(list(best.values()) + fallback, key=rank_key)


def group_by_level(predictions: Sequence[InteractivityPrediction]) -> dict[int, list[InteractivityPrediction]]:
    out = defaultdict(list)
    for p in predictions:
        out[p.level].append(p)
    return dict(out)
