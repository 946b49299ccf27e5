"""Dense float64 tensors with reverse-mode automatic differentiation.

The operation set is exactly what the pipeline needs: affine maps, general
matmul, layer normalization, softmax, multi-head self-attention over row
segments, embedding lookups, row gathering, segment mean pooling,
cross-entropy, GELU, and a handful of elementwise/reduction helpers. A
central finite-difference gradient checker serves as the numerical oracle
for all of it.

Values are float64 throughout. A tensor produced by an op is treated as
immutable; each op allocates fresh output storage. ``backward`` walks the
tape in reverse topological order and accumulates gradients into
``Parameter.grad`` without clearing previous contents, which is what makes
micro-batch gradient accumulation a plain sequence of backward calls.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ConfigError(ValueError):
    """Structural configuration is invalid (head counts, table sizes, ...)."""


class Tensor:
    """A float64 array plus the tape edge that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, tensor has shape {self.data.shape}")
        return float(self.data.flat[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self, seed: float = 1.0) -> None:
        """Accumulate d(self)/d(leaf) into every reachable grad-requiring leaf.

        ``seed`` scales the root gradient; passing a micro-batch weight here
        makes accumulated gradients sum to the weighted-mean gradient.
        """
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.full(self.data.shape, float(seed))}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


class Parameter(Tensor):
    """A trainable tensor. When ``trainable`` is false the backward pass
    leaves its gradient identically zero and optimizers skip it."""

    __slots__ = ("trainable", "decay", "name")

    def __init__(self, data, trainable: bool = True, decay: bool = True, name: str = ""):
        super().__init__(data, requires_grad=trainable)
        self.grad = np.zeros_like(self.data)
        self.trainable = trainable
        self.decay = decay
        self.name = name

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def freeze(self) -> None:
        self.trainable = False
        self.requires_grad = False
        self.grad.fill(0.0)

    def unfreeze(self) -> None:
        self.trainable = True
        self.requires_grad = True


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def constant(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64))


# ---------------------------------------------------------------------------
# linear maps
# ---------------------------------------------------------------------------

def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for x [n, d_in], w [d_in, d_out], b [d_out]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine mismatch: x {x.shape} vs w {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"affine bias {b.shape} does not match output dim {w.shape[1]}")
    y = x.data @ w.data
    y += b.data

    def bwd(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _result(y, (x, w, b), bwd)


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    bd = b.data.T if transpose_b else b.data
    if a.ndim != 2 or bd.ndim != 2 or a.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul mismatch: {a.shape} vs {b.shape} (transpose_b={transpose_b})")
    y = a.data @ bd

    def bwd(g):
        ga = g @ bd.T if a.requires_grad else None
        if b.requires_grad:
            gb = a.data.T @ g
            gb = gb.T if transpose_b else gb
        else:
            gb = None
        return ga, gb

    return _result(y, (a, b), bwd)


# ---------------------------------------------------------------------------
# elementwise / structural
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs matching shapes, got {a.shape} and {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def add_detached(a: Tensor, delta: np.ndarray) -> Tensor:
    """a + delta where delta is raw data outside the tape (straight-through)."""
    if a.shape != np.shape(delta):
        raise ShapeError(f"add_detached shape mismatch: {a.shape} vs {np.shape(delta)}")
    return _result(a.data + delta, (a,), lambda g: (g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def mul_mask(a: Tensor, mask: np.ndarray) -> Tensor:
    """Elementwise product with constant data (dropout masks)."""
    if a.shape != mask.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match operand {a.shape}")
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh form.

    y = 0.5 x (1 + tanh(c (x + 0.044715 x^3))), c = sqrt(2/pi). Written with
    explicit multiplies and in-place updates: integer powers and temporaries
    dominate the feed-forward cost otherwise. tanh is evaluated through the
    vectorized exponential, tanh(u) = 1 - 2/(exp(2u) + 1), which saturates
    cleanly to +/-1 when exp overflows or underflows.
    """
    c = math.sqrt(2.0 / math.pi)
    xd = x.data
    x2 = xd * xd
    u = x2 * xd
    u *= 0.044715
    u += xd
    u *= 2.0 * c
    with np.errstate(over="ignore"):
        np.exp(u, out=u)
    u += 1.0
    np.divide(2.0, u, out=u)
    t = np.subtract(1.0, u, out=u)
    y = 1.0 + t
    y *= xd
    y *= 0.5

    def bwd(g):
        du = x2 * (3.0 * 0.044715)
        du += 1.0
        du *= c
        dx = t * t
        np.subtract(1.0, dx, out=dx)  # sech^2 = 1 - tanh^2
        dx *= du
        dx *= xd
        dx += 1.0
        dx += t
        dx *= 0.5
        dx *= g
        return (dx,)

    return _result(y, (x,), bwd)


def mean_sq_diff(x: Tensor, ref: np.ndarray) -> Tensor:
    """Scalar mean((x - ref)^2) against constant reference data."""
    if x.shape != np.shape(ref):
        raise ShapeError(f"mean_sq_diff shape mismatch: {x.shape} vs {np.shape(ref)}")
    diff = x.data - ref
    y = np.mean(diff * diff)
    return _result(y, (x,), lambda g: (g * 2.0 * diff / diff.size,))


def sum_all(x: Tensor) -> Tensor:
    return _result(x.data.sum(), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _result(x.data.mean(), (x,), lambda g: (np.full(x.shape, float(g) / n),))


# ---------------------------------------------------------------------------
# normalization and softmax
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization with learned gain and bias."""
    if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(
            f"layer_norm operands inconsistent: x {x.shape}, gain {gain.shape}, bias {bias.shape}"
        )
    y, cache = kernels.layer_norm_fwd(x.data, gain.data, bias.data, eps)

    def bwd(g):
        return kernels.layer_norm_bwd(
            g, gain.data, cache,
            x.requires_grad, gain.requires_grad, bias.requires_grad,
        )

    return _result(y, (x, gain, bias), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along one axis."""
    s = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), bwd)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def attention_core(q: Tensor, k: Tensor, v: Tensor, heads: int,
                   causal: bool = False, offsets: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention (scale 1/sqrt(d/heads)) within segments.

    q, k, v are [n, d] stacks; ``offsets`` delimits independent segments
    (default: one segment spanning all rows). With ``causal`` set, position
    i attends only to positions <= i of its own segment.
    """
    if not (q.shape == k.shape == v.shape) or q.ndim != 2:
        raise ShapeError(f"attention operands must share [n, d]: {q.shape} {k.shape} {v.shape}")
    d = q.shape[1]
    if heads < 1 or d % heads != 0:
        raise ConfigError(f"model dim {d} not divisible by heads {heads}")
    if offsets is None:
        offsets = kernels.single_segment(q.shape[0])
    out, cache = kernels.seg_attention_fwd(q.data, k.data, v.data, offsets, heads, causal)

    def bwd(g):
        gq, gk, gv = kernels.seg_attention_bwd(
            g, q.data, k.data, v.data, offsets, heads, causal, cache
        )
        return gq, gk, gv

    return _result(out, (q, k, v), bwd)


def multi_head_self_attention(x: Tensor, params: dict, heads: int,
                              causal: bool = False,
                              offsets: np.ndarray | None = None) -> Tensor:
    """Full attention block: Q/K/V projections, per-head scaled dot-product
    attention, output projection. ``params`` maps wq,bq,wk,bk,wv,bv,wo,bo
    to tensors."""
    q = affine(x, params["wq"], params["bq"])
    k = affine(x, params["wk"], params["bk"])
    v = affine(x, params["wv"], params["bv"])
    core = attention_core(q, k, v, heads, causal=causal, offsets=offsets)
    return affine(core, params["wo"], params["bo"])


# ---------------------------------------------------------------------------
# lookups and pooling
# ---------------------------------------------------------------------------

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embedding ids must be a vector, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding id out of range [0, {table.shape[0]}): min={ids.min()} max={ids.max()}"
        )
    y = table.data[ids]

    def bwd(g):
        if not table.requires_grad:
            return (None,)
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _result(y, (table,), bwd)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"row index out of range [0, {x.shape[0]})")
    y = x.data[idx]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(y, (x,), bwd)


def segment_mean_pool(x: Tensor, offsets: np.ndarray, k: int) -> Tensor:
    """Pool each segment of x to exactly k rows (contiguous near-equal mean
    bins, longer bins first; nearest-index upsampling when a segment is
    shorter than k)."""
    out, spans = kernels.seg_pool_fwd(x.data, offsets, k)

    def bwd(g):
        return (kernels.seg_pool_bwd(g, spans, x.shape[0]),)

    return _result(out, (x,), bwd)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, targets: np.ndarray,
                  row_weights: np.ndarray | None = None) -> Tensor:
    """Cross-entropy of integer targets under row-wise softmax.

    Mean reduction by default; explicit ``row_weights`` (summing to 1 for a
    plain mean) support per-sample weighting so that micro-batch sums match
    full-batch means exactly.
    """
    t = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or t.ndim != 1 or t.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy got logits {logits.shape}, targets {t.shape}")
    n, c = logits.shape
    if n == 0:
        raise ShapeError("cross_entropy needs at least one row")
    if t.min() < 0 or t.max() >= c:
        raise ShapeError(f"target id out of range [0, {c}): min={t.min()} max={t.max()}")
    if row_weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(row_weights, dtype=np.float64)
        if w.shape != (n,):
            raise ShapeError(f"row_weights shape {w.shape} does not match {n} rows")
    m = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=1)) + m[:, 0]
    nll = lse - logits.data[np.arange(n), t]
    loss = float(nll @ w)

    def bwd(g):
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        gl = probs * w[:, None]
        gl[np.arange(n), t] -= w
        return (gl * float(g),)

    return _result(loss, (logits,), bwd)


def perplexity_from_nll(mean_nll: float) -> float:
    return math.exp(mean_nll)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter],
               h: float = 1e-5) -> float:
    """Worst relative error between backward gradients and central finite
    differences over every element of every trainable parameter.

    The relative error denominator is floored at 1e-3 to absorb
    finite-difference noise near zero. ``loss_fn`` must be deterministic;
    this is verified by evaluating it twice.
    """
    first = loss_fn().item()
    second = loss_fn().item()
    if first != second:
        raise ValueError(
            f"loss_fn is not deterministic ({first!r} != {second!r}); grad_check requires pure evaluation"
        )

    checked = [p for p in params if p.trainable]
    for p in checked:
        p.zero_grad()
    loss_fn().backward()
    analytic = [p.grad.copy() for p in checked]

    worst = 0.0
    for p, an in zip(checked, analytic):
        flat = p.data.reshape(-1)
        an_flat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            err = abs(fd - an_flat[i]) / max(abs(fd), abs(an_flat[i]), 1e-3)
            worst = max(worst, err)
    return worst
