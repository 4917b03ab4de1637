"""Reverse-mode autodiff over dense numpy arrays.

A `Node` wraps a value array and remembers how it was computed; `backward()`
walks the graph once and accumulates gradients into every reachable parameter.
Only the operations the selection/scoring pipeline needs are provided; inputs
of rank <= 3 (conv feature maps) are supported, everything else is 0/1/2-D.

Hard index selections (top-k neighbors, argmax classes, pool-row gathers) take
plain integer arrays and are treated as constants during backward: gradients
flow through the gathered values, never through the choice of index.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import ContractViolationError, InvalidInputError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (evaluation fast path)."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name", "_done")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=None, name=""):
        self.value = np.asarray(value)
        self.grad = None
        self.name = name
        self._done = False
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        # op nodes stop tracking when grads are off or no parent needs them;
        # leaves (parameters, constants) keep their flag as given
        if backward_fn is not None and (not grad_enabled() or not requires_grad):
            parents, backward_fn, requires_grad = (), None, False
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        tag = self.name or "node"
        return f"<Node {tag} shape={self.value.shape} dtype={self.value.dtype}>"

    def zero_grad(self):
        self.grad = None
        self._done = False


def parameter(value, name=""):
    """A trainable leaf; gradients accumulate here."""
    node = Node(np.asarray(value), requires_grad=True, name=name)
    return node


def constant(value, name=""):
    return Node(np.asarray(value), requires_grad=False, name=name)


def as_node(x):
    return x if isinstance(x, Node) else constant(x)


def _accumulate(node, grad):
    if node.grad is None:
        node.grad = np.array(grad, copy=True)
    else:
        node.grad = node.grad + grad


def backward(loss: Node):
    """Populate `.grad` on every node reachable from `loss`.

    The loss must be scalar (size 1). A graph can be driven backward once;
    reset with `zero_grad` before reuse.
    """
    if loss.value.size != 1:
        raise ContractViolationError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    if loss._done:
        raise ContractViolationError("backward already ran on this graph; reset grads first")
    loss._done = True

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


def zero_grads(nodes):
    for node in nodes:
        node.zero_grad()


def _unbroadcast(grad, shape):
    # sum out axes that numpy broadcasting expanded
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    a, b = as_node(a), as_node(b)
    value = a.value + b.value

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.value.shape))
        _accumulate(b, _unbroadcast(g, b.value.shape))

    return Node(value, (a, b), bw, name="add")


def sub(a, b):
    a, b = as_node(a), as_node(b)
    value = a.value - b.value

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.value.shape))
        _accumulate(b, _unbroadcast(-g, b.value.shape))

    return Node(value, (a, b), bw, name="sub")


def neg(a):
    a = as_node(a)
    return Node(-a.value, (a,), lambda g: _accumulate(a, -g), name="neg")


def mul(a, b):
    a, b = as_node(a), as_node(b)
    value = a.value * b.value

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.value, a.value.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.value.shape))

    return Node(value, (a, b), bw, name="mul")


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise InvalidInputError("matmul expects 2-D operands")
    if a.value.shape[1] != b.value.shape[0]:
        raise InvalidInputError(f"matmul shape mismatch {a.value.shape} @ {b.value.shape}")
    value = a.value @ b.value

    def bw(g):
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)

    return Node(value, (a, b), bw, name="matmul")


def transpose(a):
    a = as_node(a)
    if a.value.ndim != 2:
        raise InvalidInputError("transpose expects a 2-D operand")
    return Node(a.value.T.copy(), (a,), lambda g: _accumulate(a, g.T), name="transpose")


def leaky_relu(a, slope=0.01):
    a = as_node(a)
    mask = a.value > 0
    value = np.where(mask, a.value, slope * a.value)

    def bw(g):
        _accumulate(a, g * np.where(mask, 1.0, slope))

    return Node(value, (a,), bw, name="leaky_relu")


def sigmoid(a):
    a = as_node(a)
    x = np.asarray(a.value, dtype=np.result_type(a.value.dtype, np.float32))
    # stable in both tails: never exponentiate a positive argument
    value = np.empty_like(x)
    pos = x >= 0
    value[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    value[~pos] = e / (1.0 + e)

    def bw(g):
        _accumulate(a, g * value * (1.0 - value))

    return Node(value, (a,), bw, name="sigmoid")


def exp(a):
    a = as_node(a)
    value = np.exp(a.value)
    return Node(value, (a,), lambda g: _accumulate(a, g * value), name="exp")


def log(a):
    a = as_node(a)
    if np.any(a.value <= 0):
        raise InvalidInputError("log requires strictly positive inputs")
    value = np.log(a.value)
    return Node(value, (a,), lambda g: _accumulate(a, g / a.value), name="log")


def powc(a, exponent):
    """Elementwise power with a constant exponent."""
    a = as_node(a)
    value = np.power(a.value, exponent)

    def bw(g):
        _accumulate(a, g * exponent * np.power(a.value, exponent - 1))

    return Node(value, (a,), bw, name="powc")


def softmax(a, axis):
    a = as_node(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * value).sum(axis=axis, keepdims=True)
        _accumulate(a, value * (g - inner))

    return Node(value, (a,), bw, name="softmax")


def reduce_sum(a, axis=None, keepdims=False):
    a = as_node(a)
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.value.shape).copy())
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(gg, a.value.shape).copy())

    return Node(value, (a,), bw, name="sum")


def reduce_mean(a, axis=None, keepdims=False):
    a = as_node(a)
    count = a.value.size if axis is None else a.value.shape[axis]
    value = a.value.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g / count, a.value.shape).copy())
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(gg / count, a.value.shape).copy())

    return Node(value, (a,), bw, name="mean")


def max_with_index(a, axis, keepdims=False):
    """Max along `axis` plus the (constant) argmax indices, lowest index on ties."""
    a = as_node(a)
    indices = np.argmax(a.value, axis=axis)
    value = np.max(a.value, axis=axis, keepdims=keepdims)

    def bw(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        out = np.zeros_like(a.value)
        np.put_along_axis(out, np.expand_dims(indices, axis), gg, axis=axis)
        _accumulate(a, out)

    return Node(value, (a,), bw, name="max"), indices


def concat(nodes, axis):
    nodes = [as_node(n) for n in nodes]
    value = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for node, lo, hi in zip(nodes, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(node, g[tuple(sl)])

    return Node(value, tuple(nodes), bw, name="concat")


def gather_rows(a, indices):
    """Select rows of a 2-D node; the index array is a constant."""
    a = as_node(a)
    indices = np.asarray(indices, dtype=np.int64)
    value = a.value[indices]

    def bw(g):
        out = np.zeros_like(a.value)
        np.add.at(out, indices, g)
        _accumulate(a, out)

    return Node(value, (a,), bw, name="gather_rows")


def gather_topk_sum(a, indices):
    """Per-row sum of selected columns of a 2-D node.

    `indices` is (m, k) int64 with -1 padding for rows that had fewer than k
    candidates; padded slots contribute 0 and receive no gradient.
    """
    a = as_node(a)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 2 or indices.shape[0] != a.value.shape[0]:
        raise InvalidInputError("gather_topk_sum index shape mismatch")
    valid = indices >= 0
    safe = np.where(valid, indices, 0)
    picked = np.take_along_axis(a.value, safe, axis=1)
    value = np.where(valid, picked, 0).sum(axis=1, keepdims=True)

    def bw(g):
        out = np.zeros_like(a.value)
        rows = np.repeat(np.arange(indices.shape[0]), indices.shape[1])
        cols = safe.ravel()
        contrib = (np.broadcast_to(g, valid.shape) * valid).ravel()
        np.add.at(out, (rows, cols), contrib)
        _accumulate(a, out)

    return Node(value, (a,), bw, name="gather_topk_sum")


def row_normalize(a, zero_norm="lenient"):
    """Scale each row of a 2-D node to unit L2 norm.

    Zero-norm rows either stay zero (`lenient`, gradient 0 there) or raise
    (`strict`).
    """
    a = as_node(a)
    x = a.value
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    zero = norms[:, 0] == 0
    if zero.any():
        if zero_norm == "strict":
            raise InvalidInputError("zero-norm row in cosine similarity (strict mode)")
        norms = norms.copy()
        norms[zero] = 1.0
    value = x / norms

    def bw(g):
        dot = (g * value).sum(axis=1, keepdims=True)
        grad = (g - value * dot) / norms
        if zero.any():
            grad[zero] = 0.0
        _accumulate(a, grad)

    return Node(value, (a,), bw, name="row_normalize")


def block_row_sum(a, block):
    """Sum consecutive row-blocks of size `block`: (B*block, n) -> (B, n)."""
    a = as_node(a)
    rows, cols = a.value.shape
    if rows % block != 0:
        raise InvalidInputError(f"block_row_sum: {rows} rows not divisible by block {block}")
    value = a.value.reshape(rows // block, block, cols).sum(axis=1)

    def bw(g):
        _accumulate(a, np.repeat(g, block, axis=0))

    return Node(value, (a,), bw, name="block_row_sum")


def cosine_matrix(a, b, zero_norm="lenient"):
    """All-pairs cosine similarity of row vectors: (m, d) x (p, d) -> (m, p)."""
    return matmul(row_normalize(a, zero_norm), transpose(row_normalize(b, zero_norm)))


def cosine_similarity(a, b, zero_norm="lenient"):
    """Cosine similarity of two 1-D vectors as a scalar node."""
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 1 or b.value.ndim != 1:
        raise InvalidInputError("cosine_similarity expects 1-D vectors")
    if a.value.shape != b.value.shape:
        raise InvalidInputError("cosine_similarity operands must share a dimension")
    ra = row_normalize(reshape_rows(a, (1, a.value.size)), zero_norm)
    rb = row_normalize(reshape_rows(b, (1, b.value.size)), zero_norm)
    return reduce_sum(mul(ra, rb))


def reshape_rows(a, shape):
    a = as_node(a)
    value = a.value.reshape(shape)

    def bw(g):
        _accumulate(a, g.reshape(a.value.shape))

    return Node(value, (a,), bw, name="reshape")


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of row-softmax against integer labels."""
    logits = as_node(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, n_classes = logits.value.shape
    if labels.shape != (n,):
        raise InvalidInputError(f"labels shape {labels.shape} does not match {n} logit rows")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise InvalidInputError("label outside [0, n_classes)")
    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logprobs = shifted - logsumexp
    value = -logprobs[np.arange(n), labels].mean()

    def bw(g):
        probs = np.exp(logprobs)
        probs[np.arange(n), labels] -= 1.0
        _accumulate(logits, g * probs / n)

    return Node(np.asarray(value), (logits,), bw, name="softmax_cross_entropy")


def conv3x3(image, weights, bias):
    """Same-padded 3x3 convolution on an (h, w, c_in) node.

    `weights` is (c_out, c_in, 3, 3), `bias` (c_out,). Output (h, w, c_out).
    """
    image, weights, bias = as_node(image), as_node(weights), as_node(bias)
    if image.value.ndim != 3:
        raise InvalidInputError("conv3x3 expects an (h, w, c) input")
    h, w, c_in = image.value.shape
    c_out = weights.value.shape[0]
    if weights.value.shape != (c_out, c_in, 3, 3):
        raise InvalidInputError(f"conv3x3 weight shape {weights.value.shape} incompatible with input c={c_in}")
    padded = np.zeros((h + 2, w + 2, c_in), dtype=image.value.dtype)
    padded[1:-1, 1:-1] = image.value
    # im2col: 9 shifted views stacked as (h*w, 9*c_in)
    cols = np.empty((h * w, 9 * c_in), dtype=image.value.dtype)
    for t, (di, dj) in enumerate(_OFFSETS_3X3):
        cols[:, t * c_in:(t + 1) * c_in] = padded[di:di + h, dj:dj + w].reshape(h * w, c_in)
    wmat = weights.value.transpose(1, 2, 3, 0)  # (c_in, 3, 3, c_out)
    wmat = wmat.transpose(1, 2, 0, 3).reshape(9 * c_in, c_out)  # rows ordered like cols
    out2d = cols @ wmat + bias.value
    value = out2d.reshape(h, w, c_out)

    def bw(g):
        g2d = g.reshape(h * w, c_out)
        _accumulate(bias, g2d.sum(axis=0))
        gw = cols.T @ g2d  # (9*c_in, c_out)
        gw = gw.reshape(3, 3, c_in, c_out).transpose(3, 2, 0, 1)
        _accumulate(weights, gw)
        gcols = g2d @ wmat.T  # (h*w, 9*c_in)
        gpad = np.zeros_like(padded)
        for t, (di, dj) in enumerate(_OFFSETS_3X3):
            gpad[di:di + h, dj:dj + w] += gcols[:, t * c_in:(t + 1) * c_in].reshape(h, w, c_in)
        _accumulate(image, gpad[1:-1, 1:-1])

    return Node(value, (image, weights, bias), bw, name="conv3x3")


_OFFSETS_3X3 = [(di, dj) for di in range(3) for dj in range(3)]


def maxpool2(image):
    """2x2 max pooling with stride 2 on an (h, w, c) node; odd edges truncate."""
    image = as_node(image)
    if image.value.ndim != 3:
        raise InvalidInputError("maxpool2 expects an (h, w, c) input")
    h, w, c = image.value.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise InvalidInputError("maxpool2 input smaller than the 2x2 window")
    cropped = image.value[:h2 * 2, :w2 * 2]
    windows = cropped.reshape(h2, 2, w2, 2, c).transpose(0, 2, 1, 3, 4).reshape(h2, w2, 4, c)
    argmax = windows.argmax(axis=2)  # (h2, w2, c)
    value = np.take_along_axis(windows, argmax[:, :, None, :], axis=2)[:, :, 0, :]

    def bw(g):
        gw = np.zeros((h2, w2, 4, c), dtype=g.dtype)
        np.put_along_axis(gw, argmax[:, :, None, :], g[:, :, None, :], axis=2)
        gcrop = gw.reshape(h2, w2, 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(h2 * 2, w2 * 2, c)
        gfull = np.zeros_like(image.value)
        gfull[:h2 * 2, :w2 * 2] = gcrop
        _accumulate(image, gfull)

    return Node(value, (image,), bw, name="maxpool2")
