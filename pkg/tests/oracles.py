"""Slow, independent re-implementations used as test oracles.

Nothing here imports the package's graph, training or evaluation code: the
point is to recompute the same quantities from their definitions with plain
Python loops.
"""

from __future__ import annotations

import math
from itertools import combinations


# ---------------------------------------------------------------------------
# Hierarchy forward pass
# ---------------------------------------------------------------------------


def _cos(u, v):
    nu = math.sqrt(sum(x * x for x in u))
    nv = math.sqrt(sum(x * x for x in v))
    if nu == 0 or nv == 0:
        return 0.0
    return sum(a * b for a, b in zip(u, v)) / (nu * nv)


def _neighbours(feats: dict, k: int) -> dict:
    """receiver track -> sender tracks: top-k cosine, compared to 12 places, ties to the lower id."""
    tracks = sorted(feats)
    out = {}
    for i in tracks:
        others = [j for j in tracks if j != i]
        others.sort(key=lambda j: (-round(_cos(feats[i], feats[j]), 12), j))
        out[i] = others[:min(k, len(others))]
    return out


def _matvec(w, x):
    return [sum(w[r][c] * x[c] for c in range(len(x))) for r in range(len(w))]


def _propagate(feats: dict, w, k: int, relu: bool) -> dict:
    nbrs = _neighbours(feats, k)
    out = {}
    for i in sorted(feats):
        senders = nbrs[i] or [i]
        total = [0.0] * len(w)
        for j in senders:
            m = _matvec(w, feats[j])
            total = [a + b for a, b in zip(total, m)]
        out[i] = [max(0.0, v) for v in total] if relu else total
    return out


def naive_forward(frames, weights, levels: int, k: int, relu: bool = True):
    """``frames``: list of {track: feature list}.  Returns ``[level][start-1] -> {track: F_l}``."""
    T = len(frames)
    depth = min(levels, T)
    # level 1
    current_inputs = [dict(f) for f in frames]
    outputs = [[_propagate(inp, weights[0], k, relu) for inp in current_inputs]]
    for l in range(2, depth + 1):
        prev = outputs[-1]
        row = []
        for t in range(T - l + 1):
            a, b = prev[t], prev[t + 1]
            fused = {}
            for tid in sorted(set(a) | set(b)):
                parts = [p[tid] for p in (a, b) if tid in p]
                fused[tid] = [sum(vals) / len(parts) for vals in zip(*parts)]
            row.append(_propagate(fused, weights[l - 1], k, relu))
        outputs.append(row)
    return outputs


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------


def span_iou(a, b):
    inter = len(set(range(a[0], a[1] + 1)) & set(range(b[0], b[1] + 1)))
    union = len(set(range(a[0], a[1] + 1)) | set(range(b[0], b[1] + 1)))
    return inter / union


def compatible(pred: dict, gt: dict, tau: float = 0.5) -> bool:
    return (pred["subject"] == gt["subject"] and pred["object"] == gt["object"]
            and pred["category"] == gt["category"] and pred["predicate"] == gt["predicate"]
            and span_iou(pred["span"], gt["span"]) >= tau)


def max_matching(preds: list[dict], gts: list[dict], tau: float = 0.5) -> list[tuple[int, int]]:
    """A maximum-cardinality matching found by exhaustive search (small inputs only)."""
    options = [[i for i, p in enumerate(preds) if compatible(p, g, tau)] for g in gts]
    best: list[tuple[int, int]] = []

    def search(g, used, chosen):
        nonlocal best
        if len(chosen) + (len(gts) - g) <= len(best):
            return
        if g == len(gts):
            best = list(chosen)
            return
        for i in options[g]:
            if i not in used:
                used.add(i)
                chosen.append((i, g))
                search(g + 1, used, chosen)
                chosen.pop()
                used.discard(i)
        search(g + 1, used, chosen)

    search(0, set(), [])
    return best


def top_k(preds: list[dict], k: int) -> list[dict]:
    order = ("appearance", "situation", "position", "interaction", "relation")

    def key(p):
        obj = -1 if p["object"] is None else p["object"]
        return (-p["confidence"], order.index(p["category"]), p["subject"], obj, p["predicate"],
                tuple(p["span"]), -p["level"])

    return sorted(preds, key=key)[:k]


def brute_recall(preds, gts, k, tau=0.5):
    if not gts:
        return None
    return len(max_matching(top_k(preds, k), gts, tau)) / len(gts)


def brute_mean_recall(preds, gts, k, tau=0.5):
    if not gts:
        return None
    matched = max_matching(top_k(preds, k), gts, tau)
    hit = {g for _, g in matched}
    classes = sorted({(g["category"], g["predicate"]) for g in gts})
    recalls = []
    for cls in classes:
        members = [i for i, g in enumerate(gts) if (g["category"], g["predicate"]) == cls]
        recalls.append(sum(1 for i in members if i in hit) / len(members))
    return math.fsum(recalls) / len(recalls)


# ---------------------------------------------------------------------------
# Run-length encoding
# ---------------------------------------------------------------------------


def rle(frames_with_label: set[int]) -> list[tuple[int, int]]:
    spans = []
    for f in sorted(frames_with_label):
        if spans and spans[-1][1] == f - 1:
            spans[-1][1] = f
        else:
            spans.append([f, f])
    return [tuple(s) for s in spans]


def subsets(items, max_size):
    for r in range(max_size + 1):
        yield from combinations(items, r)
