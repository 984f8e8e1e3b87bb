"""Dense float64 matrices, a fixed-primitive reverse-mode engine, and AdamW.

Only the primitives the HIG architecture needs are differentiable: matrix
product, (broadcast) addition, row gathering, concatenation, rectification,
sigmoid and the summed focal loss.  Everything is a 2-D ``numpy`` array.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateVectorError, DimensionError, NumericError

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce ``values`` to a finite float64 2-D array, optionally checking its shape."""
    arr = np.array(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1) if cols == 1 else arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DimensionError(f"expected a non-empty 2-D matrix, got shape {arr.shape}")
    if rows is not None and arr.shape[0] != rows or cols is not None and arr.shape[1] != cols:
        raise DimensionError(f"expected shape ({rows} x {cols}), got {arr.shape[0]} x {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise NumericError("matrix contains non-finite entries")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"cannot multiply ({' x '.join(map(str, a.shape))}) by ({' x '.join(map(str, b.shape))})"
        )
    return a @ b


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise DimensionError(f"vector lengths differ: {u.size} vs {v.size}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector is undefined")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def cosine_matrix(features: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities between rows; zero-norm rows score 0 against everything."""
    features = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(features, axis=1)
    degenerate = norms == 0.0
    if degenerate.any():
        log.warning("%d zero-norm feature vector(s); similarity set to 0", int(degenerate.sum()))
    safe = np.where(degenerate, 1.0, norms)
    unit = features / safe[:, None]
    sims = np.clip(unit @ unit.T, -1.0, 1.0)
    sims[degenerate, :] = 0.0
    sims[:, degenerate] = 0.0
    return sims


# ---------------------------------------------------------------------------
# Reverse mode
# ---------------------------------------------------------------------------


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, parents: tuple = (), backward=None):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 2:
            value = np.atleast_2d(value)
        self.value = value
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value[0, 0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A trainable leaf.  ``frozen`` parameters are skipped by the optimizer."""

    __slots__ = ("name", "frozen")

    def __init__(self, value, name: str = "", frozen: bool = False):
        super().__init__(as_matrix(value), requires_grad=True)
        self.name = name
        self.frozen = frozen
        self.grad = np.zeros_like(self.value)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(value, parents, backward) -> Tensor:
    for p in parents:
        if p.requires_grad:
            return Tensor(value, True, parents, backward)
    return Tensor(value)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def mm(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(
            f"cannot multiply ({' x '.join(map(str, a.shape))}) by ({' x '.join(map(str, b.shape))})"
        )
    out_value = a.value @ b.value

    def backward(g):
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)

    return _node(out_value, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a single row broadcast over ``a``'s rows."""
    a, b = constant(a), constant(b)
    if a.shape != b.shape and not (b.shape[0] == 1 and b.shape[1] == a.shape[1]):
        raise DimensionError(f"cannot add {a.shape} and {b.shape}")
    broadcast = a.shape != b.shape

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g.sum(axis=0, keepdims=True) if broadcast else g)

    return _node(a.value + b.value, (a, b), backward)


def add_n(terms: Sequence[Tensor]) -> Tensor:
    terms = [constant(t) for t in terms]
    total = np.sum([t.value for t in terms], axis=0)

    def backward(g):
        for t in terms:
            _accumulate(t, g)

    return _node(total, tuple(terms), backward)


def scale(a: Tensor, c: float) -> Tensor:
    a = constant(a)
    return _node(a.value * c, (a,), lambda g: _accumulate(a, g * c))


def relu(a: Tensor) -> Tensor:
    a = constant(a)
    return _node(np.maximum(a.value, 0.0), (a,), lambda g: _accumulate(a, g * (a.value > 0.0)))


def sigmoid_np(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = constant(a)
    s = sigmoid_np(a.value)
    return _node(s, (a,), lambda g: _accumulate(a, g * s * (1.0 - s)))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [constant(t) for t in tensors]
    value = np.concatenate([t.value for t in tensors], axis=axis)
    bounds = list(itertools.accumulate((t.value.shape[axis] for t in tensors), initial=0))

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            _accumulate(t, g[:, lo:hi] if axis == 1 else g[lo:hi, :])

    return _node(value, tuple(tensors), backward)


def transpose(a: Tensor) -> Tensor:
    a = constant(a)
    return _node(a.value.T.copy(), (a,), lambda g: _accumulate(a, g.T))


def take_rows(a: Tensor, index: Sequence[int]) -> Tensor:
    a = constant(a)
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.value)
            np.add.at(full, index, g)
            _accumulate(a, full)

    return _node(a.value[index], (a,), backward)


def focal_terms(p: np.ndarray, y: np.ndarray, alpha: float, gamma: float) -> np.ndarray:
    """Elementwise focal loss on probabilities ``p`` against binary targets ``y``."""
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pt = np.where(y > 0.5, p, 1.0 - p)
    at = np.where(y > 0.5, alpha, 1.0 - alpha)
    return -at * (1.0 - pt) ** gamma * np.log(pt)


def focal_loss_sum(logits: Tensor, targets: np.ndarray, weights: np.ndarray,
                   alpha: float, gamma: float) -> Tensor:
    """Sum of ``weights * focal(sigmoid(logits), targets)`` as a 1x1 tensor.

    Entries whose probability falls outside the clamp range get zero gradient.
    """
    logits = constant(logits)
    targets = np.asarray(targets, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    p_raw = sigmoid_np(logits.value)
    clamped = (p_raw < PROB_CLAMP) | (p_raw > 1.0 - PROB_CLAMP)
    p = np.clip(p_raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = targets > 0.5
    pt = np.where(pos, p, 1.0 - p)
    at = np.where(pos, alpha, 1.0 - alpha)
    one_m = 1.0 - pt
    log_pt = np.log(pt)
    terms = -at * one_m**gamma * log_pt
    total = float(np.sum(weights * terms))

    def backward(g):
        if gamma == 0.0:
            dl_dpt = -at / pt
        else:
            dl_dpt = at * (gamma * one_m ** (gamma - 1.0) * log_pt - one_m**gamma / pt)
        sign = np.where(pos, 1.0, -1.0)
        dz = weights * dl_dpt * sign * pt * one_m
        dz[clamped] = 0.0
        _accumulate(logits, g[0, 0] * dz)

    return _node(np.array([[total]]), (logits,), backward)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if root.shape != (1, 1):
        raise DimensionError(f"backward needs a scalar root, got {root.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    root.grad = np.ones((1, 1))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def run_backward(root: Tensor, params: Iterable[Parameter]) -> None:
    """Zero ``params`` gradients, then backpropagate from ``root``.

    Intermediate nodes are created fresh per forward pass, so only leaves need
    resetting.
    """
    for p in params:
        p.zero_grad()
    backward(root)


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------


def gradient_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter], eps: float = 1e-5) -> float:
    """Largest relative disagreement between reverse-mode and central-difference gradients.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    every call.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    root = loss_fn()
    if not math.isfinite(root.item()):
        raise NumericError("loss is not finite")
    run_backward(root, params)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, g_ad in zip(params, analytic):
        flat = p.value.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = loss_fn().item()
            flat[idx] = orig - eps
            down = loss_fn().item()
            flat[idx] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError(f"non-finite loss while perturbing {p.name}[{idx}]")
            g_fd = (up - down) / (2.0 * eps)
            g = g_ad.reshape(-1)[idx]
            err = abs(g - g_fd) / max(abs(g), abs(g_fd), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay.

    Moment buffers are keyed by parameter name so they survive a checkpoint
    round-trip.
    """

    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: dict[str, int] = field(default_factory=dict)
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Iterable[Parameter]) -> None:
        b1, b2 = self.betas
        for p in params:
            if p.frozen:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            m = self.exp_avg.setdefault(p.name, np.zeros_like(p.value))
            v = self.exp_avg_sq.setdefault(p.name, np.zeros_like(p.value))
            t = self.step_count.get(p.name, 0) + 1
            self.step_count[p.name] = t
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.value
            p.value -= self.lr * update

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "betas": list(self.betas),
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "step_count": dict(self.step_count),
            "exp_avg": {k: v.tolist() for k, v in self.exp_avg.items()},
            "exp_avg_sq": {k: v.tolist() for k, v in self.exp_avg_sq.items()},
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "AdamW":
        return cls(
            lr=state["lr"],
            betas=tuple(state["betas"]),
            eps=state["eps"],
            weight_decay=state["weight_decay"],
            step_count={k: int(v) for k, v in state["step_count"].items()},
            exp_avg={k: np.array(v, dtype=np.float64) for k, v in state["exp_avg"].items()},
            exp_avg_sq={k: np.array(v, dtype=np.float64) for k, v in state["exp_avg_sq"].items()},
        )
