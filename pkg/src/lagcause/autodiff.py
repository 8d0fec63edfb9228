"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

Every forward primitive records a closure on the active tape; a backward pass
replays the tape in reverse and accumulates gradients per node id. Two backward
modes are supported: ``exact`` (true gradients) and an epsilon-stabilised
relevance mode in which layer normalisation is treated as a linear map with
detached statistics and softmax outputs are detached, so that relevance flows
through value paths only. All other rules are shared between the modes.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass

import numpy as np
from scipy.special import expit


class DimensionError(ValueError):
    """Shape mismatch between operands of a primitive."""


class UnknownNodeError(KeyError):
    """Backward was asked to start from a tensor that is not on the tape."""


@dataclass(frozen=True)
class BackwardMode:
    """Backward rule selector: exact gradients or epsilon-stabilised relevance."""

    lrp: bool = False
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.lrp and not self.epsilon > 0:
            raise ValueError("relevance mode requires epsilon > 0")


EXACT = BackwardMode(lrp=False)


def lrp_epsilon(epsilon: float = 1e-6) -> BackwardMode:
    return BackwardMode(lrp=True, epsilon=epsilon)


_ids = itertools.count()


class Tensor:
    """Dense float64 array plus a node identity on the tape."""

    __slots__ = ("values", "requires_grad", "node_id")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id = next(_ids)

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


_current = threading.local()


def _active_tape():
    return getattr(_current, "tape", None)


class Tape:
    """Ordered record of forward ops; one instance per forward pass."""

    def __init__(self):
        self._ops: list[tuple[int, object]] = []
        self._known: set[int] = set()

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("nested tapes are not supported; one tape per forward pass")
        _current.tape = self
        return self

    def __exit__(self, *exc):
        _current.tape = None
        return False

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn):
        self._known.update(t.node_id for t in inputs)
        self._known.add(out.node_id)
        self._ops.append((out.node_id, backward_fn))

    def backward(
        self,
        output: Tensor,
        seed: np.ndarray | float | None = None,
        mode: BackwardMode = EXACT,
        keep: set[int] | None = None,
    ) -> dict[int, np.ndarray]:
        """Accumulate gradients of ``output`` (weighted by ``seed``) per node id.

        ``seed`` must broadcast to the output shape; it defaults to ones, which
        for a scalar loss is the conventional starting gradient. A one-hot seed
        selects a single output coordinate. Gradients of intermediate nodes are
        released once consumed unless their ids are listed in ``keep``.
        """
        if not self._ops:
            raise UnknownNodeError("tape is empty")
        if output.node_id not in self._known:
            raise UnknownNodeError(f"node {output.node_id} was not recorded on this tape")
        if seed is None:
            g0 = np.ones_like(output.values)
        else:
            g0 = np.broadcast_to(np.asarray(seed, dtype=np.float64), output.values.shape).copy()
        keep = keep or set()
        grads: dict[int, np.ndarray] = {output.node_id: g0}
        for out_id, fn in reversed(self._ops):
            g = grads.get(out_id)
            if g is None:
                continue
            for in_id, contrib in fn(g, mode):
                if contrib is None:
                    continue
                acc = grads.get(in_id)
                grads[in_id] = contrib if acc is None else acc + contrib
            if out_id not in keep:
                # Leaves never appear as op outputs, so their grads survive.
                del grads[out_id]
        return grads


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _result(values: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(values, requires_grad=any(t.requires_grad for t in inputs))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._record(out, inputs, backward_fn)
    return out


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def bw(g, mode):
        return ((a.node_id, _unbroadcast(g, a.shape) if a.requires_grad else None),
                (b.node_id, _unbroadcast(g, b.shape) if b.requires_grad else None))

    return _result(a.values + b.values, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def bw(g, mode):
        return ((a.node_id, _unbroadcast(g, a.shape) if a.requires_grad else None),
                (b.node_id, -_unbroadcast(g, b.shape) if b.requires_grad else None))

    return _result(a.values - b.values, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def bw(g, mode):
        ga = _unbroadcast(g * b.values, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.values, b.shape) if b.requires_grad else None
        return ((a.node_id, ga), (b.node_id, gb))

    return _result(a.values * b.values, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul requires >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree, {a.shape} vs {b.shape}")

    def bw(g, mode):
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 2:
                ga = g @ b.values.T
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.values, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # One flat GEMM instead of a batched one summed over the batch.
                gb = a.values.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.values, -1, -2) @ g, b.shape)
        return ((a.node_id, ga), (b.node_id, gb))

    return _result(a.values @ b.values, (a, b), bw)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b for a 2-d weight and trailing-dim bias."""
    if x.shape[-1] != w.shape[-2] or w.ndim != 2:
        raise DimensionError(f"affine: {x.shape} @ {w.shape}")
    if b.shape != (w.shape[-1],):
        raise DimensionError(f"affine bias {b.shape} does not match {w.shape}")
    out = x.values @ w.values
    out += b.values

    def bw(g, mode):
        gx = gw = gb = None
        if x.requires_grad:
            gx = g @ w.values.T
        if w.requires_grad:
            gw = x.values.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if b.requires_grad:
            gb = _unbroadcast(g, b.shape)
        return ((x.node_id, gx), (w.node_id, gw), (b.node_id, gb))

    return _result(out, (x, w, b), bw)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.values, 0.0)

    def bw(g, mode):
        return ((x.node_id, g * (x.values > 0)),)

    return _result(y, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.values)

    def bw(g, mode):
        return ((x.node_id, g * y * (1.0 - y)),)

    return _result(y, (x,), bw)


def softmax(x: Tensor, axis: int = -1, mask_add: np.ndarray | None = None) -> Tensor:
    """Softmax along an axis; an optional constant additive mask is fused in."""
    if mask_add is not None:
        y = x.values + mask_add
        y -= y.max(axis=axis, keepdims=True)
    else:
        y = x.values - x.values.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def bw(g, mode):
        if mode.lrp:
            # Attention weights are detached in relevance mode.
            return ((x.node_id, np.zeros_like(x.values)),)
        gx = g - (g * y).sum(axis=axis, keepdims=True)
        gx *= y
        return ((x.node_id, gx),)

    return _result(y, (x,), bw)


def attention(q: Tensor, k: Tensor, v: Tensor, mask_add: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Fused masked softmax attention: softmax(q k^T + mask) v.

    Returns the context tensor and the attention probabilities (for readout).
    In relevance mode the probabilities are detached, so gradient flows only
    through the value path.
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise DimensionError(f"attention expects matching shapes, got {q.shape}/{k.shape}/{v.shape}")
    probs = q.values @ np.swapaxes(k.values, -1, -2)
    probs += mask_add
    probs -= probs.max(axis=-1, keepdims=True)
    np.exp(probs, out=probs)
    probs /= probs.sum(axis=-1, keepdims=True)
    ctx = probs @ v.values

    def bw(g, mode):
        gv = np.swapaxes(probs, -1, -2) @ g if v.requires_grad else None
        if mode.lrp or not (q.requires_grad or k.requires_grad):
            zq = np.zeros_like(q.values) if q.requires_grad else None
            zk = np.zeros_like(k.values) if k.requires_grad else None
            return ((q.node_id, zq), (k.node_id, zk), (v.node_id, gv))
        dprobs = g @ np.swapaxes(v.values, -1, -2)
        dscores = dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)
        dscores *= probs
        gq = dscores @ k.values if q.requires_grad else None
        gk = np.swapaxes(dscores, -1, -2) @ q.values if k.requires_grad else None
        return ((q.node_id, gq), (k.node_id, gk), (v.node_id, gv))

    return _result(ctx, (q, k, v), bw), probs


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    mu = x.values.mean(axis=axis, keepdims=True)
    xhat = x.values - mu
    var = (xhat * xhat).mean(axis=axis, keepdims=True)
    denom = np.sqrt(var + eps)
    xhat /= denom
    y = xhat * gamma.values + beta.values

    def bw(g, mode):
        gxhat = g * gamma.values
        if mode.lrp:
            # Statistics detached: the map acts as a fixed diagonal rescale.
            gx = gxhat / (denom + mode.epsilon)
        else:
            gx = gxhat - gxhat.mean(axis=axis, keepdims=True) \
                - xhat * (gxhat * xhat).mean(axis=axis, keepdims=True)
            gx /= denom
        ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = _unbroadcast(g * xhat, gamma.shape)
        if beta.requires_grad:
            gbeta = _unbroadcast(g, beta.shape)
        return ((x.node_id, gx if x.requires_grad else None),
                (gamma.node_id, ggamma), (beta.node_id, gbeta))

    return _result(y, (x, gamma, beta), bw)


def embedding_lookup(table: Tensor, indices: np.ndarray) -> Tensor:
    idx = np.asarray(indices)

    def bw(g, mode):
        if not table.requires_grad:
            return ((table.node_id, None),)
        gt = np.zeros_like(table.values)
        np.add.at(gt, idx, g)
        return ((table.node_id, gt),)

    return _result(table.values[idx], (table,), bw)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise DimensionError("concat of an empty list")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g, mode):
        parts = np.split(g, splits, axis=axis)
        return tuple((t.node_id, p if t.requires_grad else None)
                     for t, p in zip(tensors, parts))

    return _result(np.concatenate([t.values for t in tensors], axis=axis), tuple(tensors), bw)


def slice_(x: Tensor, key) -> Tensor:
    def bw(g, mode):
        if not x.requires_grad:
            return ((x.node_id, None),)
        gx = np.zeros_like(x.values)
        np.add.at(gx, key, g)
        return ((x.node_id, gx),)

    return _result(x.values[key], (x,), bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bw(g, mode):
        return ((x.node_id, g.reshape(x.shape)),)

    return _result(x.values.reshape(shape), (x,), bw)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)

    # Contiguous results keep downstream GEMMs on the fast BLAS path.
    def bw(g, mode):
        return ((x.node_id, np.ascontiguousarray(np.transpose(g, inv))),)

    return _result(np.ascontiguousarray(np.transpose(x.values, axes)), (x,), bw)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g, mode):
        if axis is None:
            gx = np.broadcast_to(g, x.shape).copy()
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            gx = np.broadcast_to(gg, x.shape).copy()
        return ((x.node_id, gx),)

    return _result(x.values.sum(axis=axis, keepdims=keepdims), (x,), bw)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: shapes differ, {pred.shape} vs {target.shape}")
    diff = pred.values - target.values
    n = diff.size

    def bw(g, mode):
        scale = 2.0 * g / n
        gp = scale * diff if pred.requires_grad else None
        gt = -scale * diff if target.requires_grad else None
        return ((pred.node_id, gp), (target.node_id, gt))

    return _result(np.float64(np.mean(diff * diff)), (pred, target), bw)


def input_times_gradient(window_input, grad) -> np.ndarray:
    """Elementwise product of an input window with its gradient (relevance)."""
    a = window_input.values if isinstance(window_input, Tensor) else np.asarray(window_input)
    b = grad.values if isinstance(grad, Tensor) else np.asarray(grad)
    if a.shape != b.shape:
        raise DimensionError(f"input_times_gradient: shapes differ, {a.shape} vs {b.shape}")
    return a * b
