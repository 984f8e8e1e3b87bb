"""Graph cells, hierarchy construction and the message-passing forward pass.

Level 1 holds one cell per frame.  A level-``l`` cell at start ``t`` is built
from the two consecutive level-``l-1`` cells at ``t`` and ``t+1``: subjects are
fused by ``track_id`` (mean of features, min/max of boxes) and edges are
re-selected by cosine similarity on the fused features.  Features then move one
level up through

    F_l(i) = act( sum_{j in N(i)} W_l F_{l-1}(j) )

with a weighted self-message for nodes that have no neighbours.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import DimensionError, EmptyInputError, HierarchyError, HIGError, NumericError

DEFAULT_K = 12
DEFAULT_CONFIDENCE = 0.9
# Similarities are compared after rounding so that floating-point noise cannot
# reorder neighbours that are tied in exact arithmetic.
SIMILARITY_DECIMALS = 12


class Kind(str, Enum):
    PERSON = "person"
    OBJECT = "object"


class WeightSharing(str, Enum):
    PER_LEVEL = "per_level"
    SHARED = "shared"


class Nonlinearity(str, Enum):
    NONE = "none"
    RELU = "relu"


Box = tuple[float, float, float, float]


def check_box(box: Sequence[float]) -> Box:
    x1, y1, x2, y2 = (float(v) for v in box)
    if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
        raise ValueError(f"box {box} is not a well-ordered normalized box")
    return (x1, y1, x2, y2)


@dataclass
class SubjectNode:
    track_id: int
    kind: Kind
    category_id: int
    box: Box
    feature: np.ndarray

    def __post_init__(self):
        if not isinstance(self.kind, Kind):
            self.kind = Kind(self.kind)
        self.box = check_box(self.box)
        self.feature = np.asarray(self.feature, dtype=np.float64).ravel()
        if self.category_id < 0:
            raise ValueError("category_id must be non-negative")


@dataclass
class GraphCell:
    level: int
    start: int
    nodes: list[SubjectNode]
    edges: list[tuple[int, int]] = field(default_factory=list)  # (sender, receiver) track ids

    @property
    def window(self) -> tuple[int, int]:
        return (self.start, self.start + self.level - 1)

    @property
    def track_ids(self) -> list[int]:
        return [n.track_id for n in self.nodes]

    def index_of(self, track_id: int) -> int:
        for i, n in enumerate(self.nodes):
            if n.track_id == track_id:
                return i
        raise KeyError(track_id)

    def node(self, track_id: int) -> SubjectNode:
        return self.nodes[self.index_of(track_id)]


@dataclass(frozen=True)
class HierarchyConfig:
    levels: int
    dims: tuple[int, ...]
    k: int = DEFAULT_K
    weight_sharing: WeightSharing = WeightSharing.PER_LEVEL
    confidence_threshold: float = DEFAULT_CONFIDENCE
    nonlinearity: Nonlinearity = Nonlinearity.RELU

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "weight_sharing", WeightSharing(self.weight_sharing))
        object.__setattr__(self, "nonlinearity", Nonlinearity(self.nonlinearity))
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if len(self.dims) != self.levels + 1 or min(self.dims) < 1:
            raise ValueError(f"dims needs {self.levels + 1} positive widths, got {self.dims}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 < self.confidence_threshold <= 1.0:
            raise ValueError("confidence_threshold must lie in (0, 1]")
        if self.weight_sharing is WeightSharing.SHARED and len(set(self.dims)) != 1:
            raise ValueError("shared weights need one width for every level")

    def depth(self, num_frames: int) -> int:
        """Number of levels actually built for a video of ``num_frames`` frames."""
        return min(self.levels, num_frames)

    def weight_shape(self, level: int) -> tuple[int, int]:
        return (self.dims[level], self.dims[level - 1])


# ---------------------------------------------------------------------------
# Cell construction
# ---------------------------------------------------------------------------


def select_neighbors(nodes: Sequence[SubjectNode], k: int = DEFAULT_K) -> list[tuple[int, int]]:
    """Directed edges ``(sender, receiver)``; each receiver takes its ``min(k, n-1)`` most similar peers.

    Ties in similarity (to ``SIMILARITY_DECIMALS`` places) go to the lower ``track_id``.
    """
    n = len(nodes)
    if n < 2:
        return []
    tracks = [node.track_id for node in nodes]
    if k >= n - 1:
        # Every peer is selected, so the ranking does not matter.
        return sorted(((s, r) for r in tracks for s in tracks if s != r), key=lambda e: (e[1], e[0]))
    sims = np.round(nx.cosine_matrix(np.stack([node.feature for node in nodes])), SIMILARITY_DECIMALS)
    edges = []
    for i in range(n):
        ranked = sorted((j for j in range(n) if j != i), key=lambda j: (-sims[i, j], tracks[j]))
        edges.extend((tracks[j], tracks[i]) for j in ranked[:k])
    return sorted(edges, key=lambda e: (e[1], e[0]))


def build_base_level(frames: Sequence[Sequence[SubjectNode]], k: int = DEFAULT_K,
                     dim: int | None = None) -> list[GraphCell]:
    if not frames:
        raise EmptyInputError("video has no frames")
    cells = []
    for t, subjects in enumerate(frames, start=1):
        seen = set()
        for s in subjects:
            if dim is not None and s.feature.size != dim:
                raise DimensionError(
                    f"frame {t}, track {s.track_id}: feature length {s.feature.size} != {dim}"
                )
            if s.track_id in seen:
                raise HierarchyError(f"frame {t}: duplicate track_id {s.track_id}")
            seen.add(s.track_id)
        nodes = sorted(subjects, key=lambda s: s.track_id)
        cells.append(GraphCell(level=1, start=t, nodes=list(nodes), edges=select_neighbors(nodes, k)))
    return cells


def node_summary(boxes: Sequence[Sequence[float]]) -> Box:
    """The smallest box enclosing every constituent box."""
    x1, y1, x2, y2 = zip(*boxes)
    return float(min(x1)), float(min(y1)), float(max(x2)), float(max(y2))


def _fusion(cell_a: GraphCell, cell_b: GraphCell) -> tuple[list[int], list[list[int]], np.ndarray]:
    """Fused track order, each track's rows in the stacked parents, and the averaging matrix."""
    na = len(cell_a.nodes)
    members: dict[int, list[int]] = {}
    for i, n in enumerate(cell_a.nodes):
        members.setdefault(n.track_id, []).append(i)
    for i, n in enumerate(cell_b.nodes):
        members.setdefault(n.track_id, []).append(na + i)
    tracks = sorted(members)
    rows = [members[t] for t in tracks]
    weights = np.zeros((len(tracks), na + len(cell_b.nodes)))
    for r, cols in enumerate(rows):
        weights[r, cols] = 1.0 / len(cols)
    return tracks, rows, weights


def fusion_weights(cell_a: GraphCell, cell_b: GraphCell) -> tuple[list[int], np.ndarray]:
    """Fused track order and the averaging matrix mapping stacked parent rows to fused rows."""
    tracks, _, weights = _fusion(cell_a, cell_b)
    return tracks, weights


def _check_parents(cell_a: GraphCell, cell_b: GraphCell, level: int) -> None:
    if cell_a.level != level - 1 or cell_b.level != level - 1:
        raise HierarchyError(
            f"level-{level} cell needs level-{level - 1} parents, got {cell_a.level} and {cell_b.level}"
        )
    if cell_b.start != cell_a.start + 1:
        raise HierarchyError(f"parents start at {cell_a.start} and {cell_b.start}; not consecutive")


def _derived_node(track_id: int, kind: Kind, category_id: int, box: Box, feature: np.ndarray) -> SubjectNode:
    """A fused node.  Its parts were validated when the level-1 nodes were built, so checks are skipped."""
    node = object.__new__(SubjectNode)
    node.__dict__.update(track_id=track_id, kind=kind, category_id=category_id, box=box, feature=feature)
    return node


def _fused_cell(cell_a: GraphCell, cell_b: GraphCell, level: int, k: int, tracks: list[int],
                rows: list[list[int]], fused: np.ndarray) -> GraphCell:
    parents = cell_a.nodes + cell_b.nodes
    nodes = []
    for r, (tid, members) in enumerate(zip(tracks, rows)):
        first = parents[members[0]]
        box = first.box if len(members) == 1 else node_summary([parents[i].box for i in members])
        nodes.append(_derived_node(tid, first.kind, first.category_id, box, fused[r]))
    return GraphCell(level=level, start=cell_a.start, nodes=nodes, edges=select_neighbors(nodes, k))


def construct_graph(cell_a: GraphCell, cell_b: GraphCell, level: int, k: int = DEFAULT_K,
                    parent_features: tuple[np.ndarray, np.ndarray] | None = None) -> GraphCell:
    """Fuse two consecutive cells into one cell a level higher.

    ``parent_features`` optionally replaces the parents' node features (rows in
    node order), which is how the forward pass feeds in refined features.
    """
    _check_parents(cell_a, cell_b, level)
    tracks, rows, weights = _fusion(cell_a, cell_b)
    if parent_features is None:
        blocks = [np.stack([n.feature for n in c.nodes]) for c in (cell_a, cell_b) if c.nodes]
    else:
        blocks = [np.asarray(b, dtype=np.float64) for b in parent_features if len(b)]
    fused = weights @ np.concatenate(blocks) if tracks else np.zeros((0, 0))
    return _fused_cell(cell_a, cell_b, level, k, tracks, rows, fused)


# ---------------------------------------------------------------------------
# Message passing
# ---------------------------------------------------------------------------


@dataclass
class Messages:
    """``per_node`` row ``j`` is ``W F(j)``, the message node ``j`` sends on every out-edge."""

    per_node: nx.Tensor
    edges: list[tuple[int, int]]
    senders: np.ndarray
    receivers: np.ndarray

    @property
    def per_edge(self) -> nx.Tensor:
        return nx.take_rows(self.per_node, self.senders)


_NO_EDGES = np.zeros(0, dtype=np.intp)
_NO_EDGES.flags.writeable = False


def compute_messages(cell: GraphCell, weight: nx.Tensor, prev: nx.Tensor) -> Messages:
    weight = nx.constant(weight)
    return _messages(cell, weight.shape, nx.transpose(weight), nx.constant(prev))


def _messages(cell: GraphCell, weight_shape: tuple[int, int], weight_t: nx.Tensor, prev: nx.Tensor) -> Messages:
    """``compute_messages`` with the weight already transposed, so a level can share one transpose."""
    if weight_shape[1] != prev.shape[1]:
        raise DimensionError(f"weight {weight_shape} cannot act on features of width {prev.shape[1]}")
    if prev.shape[0] != len(cell.nodes):
        raise DimensionError(f"{prev.shape[0]} feature rows for {len(cell.nodes)} nodes")
    per_node = nx.mm(prev, weight_t)
    if not cell.edges:
        return Messages(per_node, [], _NO_EDGES, _NO_EDGES)
    pos = {tid: i for i, tid in enumerate(cell.track_ids)}
    senders = np.array([pos[s] for s, _ in cell.edges], dtype=np.intp)
    receivers = np.array([pos[r] for _, r in cell.edges], dtype=np.intp)
    return Messages(per_node, list(cell.edges), senders, receivers)


def aggregation_matrix(cell: GraphCell) -> np.ndarray:
    pos = {tid: i for i, tid in enumerate(cell.track_ids)}
    senders = [pos[s] for s, _ in cell.edges]
    receivers = [pos[r] for _, r in cell.edges]
    adj = _aggregation(len(cell.nodes), senders, receivers)
    return np.eye(len(cell.nodes)) if adj is None else adj


def _aggregation(n: int, senders, receivers) -> np.ndarray | None:
    """Row ``i`` sums the messages ``i`` receives; a node with no in-edges keeps its own message.

    Returns ``None`` when no node has in-edges, i.e. the matrix would be the identity.
    """
    if not len(senders):
        return None
    adj = np.zeros((n, n))
    adj[receivers, senders] = 1.0
    isolated = ~adj.any(axis=1)
    adj[isolated, isolated] = 1.0
    return adj


def aggregate_features(cell: GraphCell, messages: Messages,
                       nonlinearity: Nonlinearity = Nonlinearity.RELU) -> nx.Tensor:
    adj = _aggregation(len(cell.nodes), messages.senders, messages.receivers)
    summed = messages.per_node if adj is None else nx.mm(nx.Tensor(adj), messages.per_node)
    return nx.relu(summed) if nonlinearity == Nonlinearity.RELU else summed


@dataclass
class CellOutput:
    cell: GraphCell
    inputs: nx.Tensor       # F_{l-1} rows aligned with cell.nodes
    messages: Messages
    features: nx.Tensor     # F_l rows aligned with cell.nodes


@dataclass
class Hierarchy:
    num_frames: int
    levels: list[list[CellOutput]]

    @property
    def depth(self) -> int:
        return len(self.levels)

    def level(self, l: int) -> list[CellOutput]:
        return self.levels[l - 1]

    def sizes(self) -> list[int]:
        return [len(cells) for cells in self.levels]

    def cells(self):
        for outputs in self.levels:
            yield from outputs


def forward_hierarchy(base_cells: Sequence[GraphCell], weights: Sequence[nx.Tensor],
                      config: HierarchyConfig) -> Hierarchy:
    """Run every level of the hierarchy; ``weights[l-1]`` is the level-``l`` weight."""
    if not base_cells:
        raise EmptyInputError("no level-1 cells")
    T = len(base_cells)
    depth = config.depth(T)
    if len(weights) < depth:
        raise DimensionError(f"{len(weights)} weight matrices for {depth} levels")
    levels: list[list[CellOutput]] = []
    # Consecutive cells usually hold the same tracks, so fusion plans are shared.
    plans: dict[tuple[tuple[int, ...], tuple[int, ...]], tuple] = {}
    for l in range(1, depth + 1):
        weight = nx.constant(weights[l - 1])
        weight_t = nx.transpose(weight)
        current = []
        for t in range(1, T - l + 2):
            try:
                if l == 1:
                    cell = base_cells[t - 1]
                    rows = [n.feature for n in cell.nodes]
                    inputs = nx.Tensor(np.stack(rows) if rows else np.zeros((0, config.dims[0])))
                else:
                    pa, pb = levels[-1][t - 1], levels[-1][t]
                    _check_parents(pa.cell, pb.cell, l)
                    key = (tuple(pa.cell.track_ids), tuple(pb.cell.track_ids))
                    if key not in plans:
                        tracks, members, fuse = _fusion(pa.cell, pb.cell)
                        plans[key] = tracks, members, nx.Tensor(fuse)
                    tracks, members, fuse = plans[key]
                    inputs = nx.mm(fuse, nx.concat([pa.features, pb.features], axis=0))
                    cell = _fused_cell(pa.cell, pb.cell, l, config.k, tracks, members, inputs.value)
                if inputs.shape[1] != config.dims[l - 1]:
                    raise DimensionError(f"input width {inputs.shape[1]} != D_{l - 1}={config.dims[l - 1]}")
                messages = _messages(cell, weight.shape, weight_t, inputs)
                features = aggregate_features(cell, messages, config.nonlinearity)
                if not np.isfinite(features.value).all():
                    raise NumericError("non-finite features")
            except HIGError as exc:
                raise type(exc)(f"level {l}, cell {t}: {exc}") from exc
            current.append(CellOutput(cell, inputs, messages, features))
        levels.append(current)
    return Hierarchy(T, levels)
