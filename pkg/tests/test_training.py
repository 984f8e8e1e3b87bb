import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hig import numerics as nx
from hig.annotations import Triplet
from hig.classifier import CATEGORIES, DOUBLE_ACTOR, SINGLE_ACTOR, Category
from hig.data import VideoSample
from hig.graph import HierarchyConfig, build_base_level
from hig.model import HIGModel
from hig.training import (
    FocalLossParams,
    Trainer,
    TrainConfig,
    UnfreezeSchedule,
    apply_unfreezing,
    assign_labels,
    clip_gradients,
    focal_loss,
    level_loss,
    load_checkpoint,
    save_checkpoint,
    total_loss,
    video_losses,
)

from instances import random_frames

VOCAB = {c: 3 for c in CATEGORIES}
A = Category.APPEARANCE


def sample(seed=0, frames=4, subjects=3, dim=4, name="v"):
    rng = np.random.default_rng(seed)
    fr = random_frames(rng, frames, subjects, dim)
    trips = [Triplet(1, None, A, 0, (1, frames)), Triplet(2, None, Category.SITUATION, 2, (2, 3))]
    tracks = {n.track_id: n.kind for n in fr[0]}
    for s, o in [(1, 2), (2, 1), (1, 3), (3, 1)]:
        for c in DOUBLE_ACTOR:
            if HIGModel(HierarchyConfig(1, (dim, dim)), VOCAB).mask.allows(c, tracks[s], tracks[o]):
                trips.append(Triplet(s, o, c, 1, (1, 2)))
                break
    return VideoSample(name, fr, trips)


def model(levels=3, dim=4, sharing="per_level", seed=0):
    cfg = HierarchyConfig(levels=levels, dims=(dim,) * (levels + 1), weight_sharing=sharing)
    return HIGModel(cfg, VOCAB, hidden=5, seed=seed)


class TestAssignLabels:
    def test_containment(self):
        tr = [Triplet(1, None, A, 2, (1, 5))]
        assert assign_labels(tr, 3, 2).nodes == {(1, A): {2}}
        assert assign_labels(tr, 3, 4).nodes == {}

    def test_level_one_matches_frames(self):
        tr = [Triplet(1, 2, Category.RELATION, 0, (3, 4))]
        positive = [t for t in range(1, 7) if assign_labels(tr, 1, t).pairs]
        assert positive == [3, 4]

    def test_out_of_vocabulary_dropped(self):
        assert assign_labels([Triplet(1, None, A, 9, (1, 1))], 1, 1, VOCAB).nodes == {}

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 10), st.integers(1, 10), st.integers(1, 6), st.integers(1, 10))
    def test_rule(self, a, length, level, start):
        span = (a, a + length - 1)
        got = bool(assign_labels([Triplet(1, None, A, 0, span)], level, start).nodes)
        assert got == all(span[0] <= f <= span[1] for f in range(start, start + level))


class TestFocalLoss:
    def test_hand_value(self):
        assert focal_loss(0.9, 1, FocalLossParams(0.25, 2.0)) == pytest.approx(2.634e-4, abs=1e-7)

    def test_negative_uses_one_minus_alpha(self):
        expected = -0.75 * 0.9 ** 2 * math.log(0.1)
        assert focal_loss(0.9, 0, FocalLossParams(0.25, 2.0)) == pytest.approx(expected, rel=1e-12)

    def test_gamma_zero_is_weighted_cross_entropy(self):
        rng = np.random.default_rng(0)
        for p, y in zip(rng.uniform(0.01, 0.99, 200), rng.integers(0, 2, 200)):
            weighted_ce = -0.25 * math.log(p) if y else -0.75 * math.log(1 - p)
            assert focal_loss(p, int(y), FocalLossParams(0.25, 0.0)) == pytest.approx(weighted_ce, abs=1e-12)

    def test_clamped_at_extremes(self):
        assert math.isfinite(focal_loss(0.0, 1))
        assert math.isfinite(focal_loss(1.0, 0))

    @pytest.mark.parametrize("alpha,gamma", [(0.0, 2.0), (1.5, 2.0), (0.25, -1.0)])
    def test_params_domain(self, alpha, gamma):
        with pytest.raises(ValueError):
            FocalLossParams(alpha, gamma)


class TestLossAggregation:
    def test_level_loss_is_mean_over_entries(self):
        s = sample()
        m = model()
        _, logits = m.forward(build_base_level(s.frames, m.config.k))
        params = FocalLossParams()
        for level in logits:
            total, count = 0.0, 0
            for cl in level:
                cell = cl.cell
                lo, hi = cell.window
                inside = [t for t in s.triplets if t.span[0] <= lo and hi <= t.span[1]]
                for c in SINGLE_ACTOR:
                    probs = nx.sigmoid_np(cl.node[c].value)
                    for i, node in enumerate(cell.nodes):
                        for p in range(3):
                            y = any(t.subject == node.track_id and t.category is c and t.predicate == p
                                    for t in inside)
                            total += focal_loss(probs[i, p], int(y), params)
                            count += 1
                for c in DOUBLE_ACTOR:
                    probs = nx.sigmoid_np(cl.edge[c].value)
                    for e, (snd, rcv) in enumerate(cell.edges):
                        if not m.mask.allows(c, cell.node(rcv).kind, cell.node(snd).kind):
                            continue
                        for p in range(3):
                            y = any(t.subject == rcv and t.object == snd and t.category is c and t.predicate == p
                                    for t in inside)
                            total += focal_loss(probs[e, p], int(y), params)
                            count += 1
            assert level_loss(level, s.triplets, VOCAB, params).item() == pytest.approx(total / count, rel=1e-10)

    def test_total_is_sum_of_levels(self):
        s, m = sample(), model()
        losses = video_losses(m, build_base_level(s.frames), s.triplets, FocalLossParams())
        assert sorted(losses) == [1, 2, 3]
        assert total_loss(list(losses.values())).item() == pytest.approx(sum(v.item() for v in losses.values()))

    def test_end_to_end_gradient(self):
        s, m = sample(dim=3), model(levels=2, dim=3)
        cells = build_base_level(s.frames)

        def loss():
            return total_loss(list(video_losses(m, cells, s.triplets, FocalLossParams()).values()))

        assert nx.gradient_check(loss, m.parameters()) < 1e-4


class TestSchedule:
    def test_sequential_stages(self):
        sched = UnfreezeSchedule.sequential(3, 2)
        assert [sorted(apply_unfreezing(sched, e)) for e in range(7)] == \
            [[1], [1], [1, 2], [1, 2], [1, 2, 3], [1, 2, 3], [1, 2, 3]]

    def test_rejects_non_monotone(self):
        with pytest.raises(ValueError):
            UnfreezeSchedule.from_json([{"epochs": 1, "levels": [1, 2]}, {"epochs": 1, "levels": [1]}])

    def test_json_round_trip(self):
        sched = UnfreezeSchedule.sequential(4, 3)
        assert UnfreezeSchedule.from_json(sched.to_json()) == sched


class TestTrainer:
    def test_lr_zero_leaves_parameters(self):
        m = model()
        before = {k: v.copy() for k, v in ((p.name, p.value) for p in m.parameters())}
        Trainer(m, TrainConfig(epochs_per_stage=2, lr=0.0, sequential=False)).fit([sample()])
        for p in m.parameters():
            assert np.array_equal(p.value, before[p.name])

    def test_frozen_levels_untouched_in_stage_one(self):
        m = model()
        tr = Trainer(m, TrainConfig(epochs_per_stage=3, lr=1e-2))
        upper = [w.value.copy() for w in m.level_weights[1:]]
        for _ in range(3):
            tr.train_epoch([sample()])
            assert all(np.array_equal(w.value, u) for w, u in zip(m.level_weights[1:], upper))
        tr.train_epoch([sample()])
        assert not np.array_equal(m.level_weights[1].value, upper[0])

    def test_shared_weights_are_one_parameter(self):
        m = model(sharing="shared")
        assert len(m.graph_parameters()) == 1
        assert all(w is m.level_weights[0] for w in m.level_weights)
        Trainer(m, TrainConfig(epochs_per_stage=1, lr=1e-2, sequential=False)).fit([sample()])

    def test_loss_decreases(self):
        m = model()
        tr = Trainer(m, TrainConfig(epochs_per_stage=30, lr=1e-2, sequential=False, alpha=0.5, gamma=0.0))
        hist = tr.fit([sample(0), sample(1, name="w")])
        assert hist[-1].loss < 0.5 * hist[0].loss

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            m = model()
            Trainer(m, TrainConfig(epochs_per_stage=2, lr=1e-3, seed=3)).fit([sample(0), sample(1, name="w")])
            runs.append(m.state_dict())
        assert runs[0] == runs[1]

    def test_resume_is_bit_exact(self, tmp_path):
        data = [sample(0), sample(1, name="w"), sample(2, name="x")]
        cfg = TrainConfig(epochs_per_stage=2, lr=1e-3, seed=5)
        full = Trainer(model(), cfg)
        full.fit(data)

        half = Trainer(model(), cfg)
        half.fit(data, epochs=3)
        save_checkpoint(half, tmp_path / "ck.json")
        resumed, _ = load_checkpoint(tmp_path / "ck.json")
        resumed.fit(data)
        assert resumed.model.state_dict() == full.model.state_dict()
        assert [h.loss for h in resumed.history] == [h.loss for h in full.history]

    def test_clip_gradients(self):
        p = nx.Parameter(np.zeros((1, 2)), "p")
        p.grad = np.array([[3.0, 4.0]])
        assert clip_gradients([p], 1.0) == 5.0
        np.testing.assert_allclose(p.grad, [[0.6, 0.8]])

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope.json")
