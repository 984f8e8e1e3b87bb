"""HIG parameters bundled with the code that turns a video into scored predictions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .classifier import (
    DOUBLE_ACTOR,
    SINGLE_ACTOR,
    ApplicabilityMask,
    Category,
    ClassifierHead,
    InteractivityPrediction,
    select_predictions,
)
from .graph import (
    CellOutput,
    GraphCell,
    Hierarchy,
    HierarchyConfig,
    WeightSharing,
    forward_hierarchy,
)


@dataclass
class CellLogits:
    """Logits for one cell.  Edge rows follow ``cell.edges``; node rows follow ``cell.nodes``."""

    output: CellOutput
    node: dict[Category, nx.Tensor]
    edge: dict[Category, nx.Tensor]
    edge_mask: dict[Category, np.ndarray]  # 1.0 where the kind pair allows the category

    @property
    def cell(self) -> GraphCell:
        return self.output.cell


class HIGModel:
    def __init__(self, config: HierarchyConfig, vocab: Mapping[Category, int], hidden: int | None = None,
                 mask: ApplicabilityMask | None = None, seed: int = 0):
        dims = config.dims[1:]
        if len(set(dims)) != 1:
            raise ValueError(f"the shared classifier needs D_1..D_L equal, got {dims}")
        rng = np.random.default_rng(seed)
        self.config = config
        self.mask = mask or ApplicabilityMask.default()
        self.vocab = {Category(c): int(v) for c, v in vocab.items()}
        self.hidden = hidden
        if config.weight_sharing is WeightSharing.SHARED:
            shared = self._init_weight("graph.weight", config.weight_shape(1), rng)
            self.level_weights = [shared] * config.levels
        else:
            self.level_weights = [self._init_weight(f"graph.weight.{l}", config.weight_shape(l), rng)
                                  for l in range(1, config.levels + 1)]
        self.head = ClassifierHead(dims[0], self.vocab, hidden, rng)

    @staticmethod
    def _init_weight(name, shape, rng) -> nx.Parameter:
        rows, cols = shape
        bound = np.sqrt(6.0 / (rows + cols))
        return nx.Parameter(rng.uniform(-bound, bound, shape), name=name)

    # -- parameters ---------------------------------------------------------

    def graph_parameters(self) -> list[nx.Parameter]:
        seen, out = set(), []
        for w in self.level_weights:
            if id(w) not in seen:
                seen.add(id(w))
                out.append(w)
        return out

    def parameters(self) -> list[nx.Parameter]:
        return self.graph_parameters() + self.head.parameters()

    def named_parameters(self) -> dict[str, nx.Parameter]:
        return {p.name: p for p in self.parameters()}

    def level_parameters(self, level: int) -> list[nx.Parameter]:
        return [self.level_weights[level - 1]]

    def set_trainable_levels(self, levels: set[int]) -> None:
        """Freeze every level weight not used by a trainable level.  The head stays trainable."""
        for w in self.graph_parameters():
            w.frozen = True
        for l in levels:
            if 1 <= l <= self.config.levels:
                self.level_weights[l - 1].frozen = False
        for p in self.head.parameters():
            p.frozen = not levels

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    # -- forward ------------------------------------------------------------

    def forward(self, base_cells: Sequence[GraphCell]) -> tuple[Hierarchy, list[list[CellLogits]]]:
        hierarchy = forward_hierarchy(base_cells, self.level_weights, self.config)
        logits = [[self.cell_logits(out) for out in level] for level in hierarchy.levels]
        return hierarchy, logits

    def cell_logits(self, out: CellOutput) -> CellLogits:
        cell = out.cell
        node = self.head.node_logits(out.features) if cell.nodes else {}
        edge, edge_mask = {}, {}
        if cell.edges:
            msgs = out.messages
            edge = self.head.edge_logits(msgs.per_edge, nx.take_rows(out.features, msgs.receivers))
            kinds = [(cell.nodes[r].kind, cell.nodes[s].kind) for s, r in zip(msgs.senders, msgs.receivers)]
            edge_mask = {c: np.array([1.0 if self.mask.allows(c, *k) else 0.0 for k in kinds])
                         for c in DOUBLE_ACTOR}
        return CellLogits(out, node, edge, edge_mask)

    def candidates(self, logits: Sequence[Sequence[CellLogits]]) -> list[InteractivityPrediction]:
        """Every scored (subject, [object], category, predicate) at every cell."""
        preds = []
        for level in logits:
            for cl in level:
                cell = cl.cell
                span = cell.window
                for c in SINGLE_ACTOR:
                    if c not in cl.node:
                        continue
                    probs = nx.sigmoid_np(cl.node[c].value)
                    for i, node in enumerate(cell.nodes):
                        for pid, conf in enumerate(probs[i]):
                            preds.append(InteractivityPrediction(node.track_id, None, c, pid,
                                                                 float(conf), span, cell.level))
                for c in DOUBLE_ACTOR:
                    if c not in cl.edge:
                        continue
                    probs = nx.sigmoid_np(cl.edge[c].value)
                    for e, (sender, receiver) in enumerate(cell.edges):
                        if not cl.edge_mask[c][e]:
                            continue
                        for pid, conf in enumerate(probs[e]):
                            preds.append(InteractivityPrediction(receiver, sender, c, pid,
                                                                 float(conf), span, cell.level))
        return preds

    def predict(self, base_cells: Sequence[GraphCell], threshold: float | None = None) -> list[InteractivityPrediction]:
        _, logits = self.forward(base_cells)
        threshold = self.config.confidence_threshold if threshold is None else threshold
        return select_predictions(self.candidates(logits), threshold)

    # -- serialization ------------------------------------------------------

    def state_dict(self) -> dict:
        return {name: p.value.tolist() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Mapping) -> None:
        params = self.named_parameters()
        if set(state) != set(params):
            raise ValueError(f"parameter names differ: {sorted(set(state) ^ set(params))}")
        for name, value in state.items():
            arr = nx.as_matrix(value)
            if arr.shape != params[name].value.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {params[name].value.shape}")
            params[name].value[...] = arr
