"""Reverse-mode automatic differentiation over dense float64 arrays.

The rest of the package builds every differentiable computation (world
model objectives, policy losses, probe fits) out of the small op set
defined here.  Graphs are static: nodes are created once, input nodes are
rebound per step, and a cached topological order is replayed for forward
and backward passes.  Everything is plain numpy, single threaded, and
deterministic given the same bindings.

Ops: input, parameter, affine, tanh, relu, sigmoid, softplus, exp,
concat, mul (elementwise), add, scale, square, sum, l1-norm,
gaussian-nll, kl-diag-gaussian, log-softmax.
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass, field

import numpy as np

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)

_node_counter = itertools.count()


class Node:
    """One vertex of a computation DAG.

    Parents are always created before children, so creation order is a
    valid topological order and cycles cannot be formed.
    """

    __slots__ = ("uid", "op", "parents", "name", "shape", "payload", "value", "grad")

    def __init__(self, op, parents=(), name=None, shape=None, payload=None, value=None):
        self.uid = next(_node_counter)
        for p in parents:
            if not isinstance(p, Node):
                raise TypeError(f"parent of {op} node is not a Node: {type(p)!r}")
            if p.uid >= self.uid:
                raise ValueError("graph cycle: parent created after child")
        self.op = op
        self.parents = tuple(parents)
        self.name = name
        self.shape = shape
        self.payload = payload
        self.value = value
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"<Node {self.op}#{self.uid}{tag}>"


# ============================================================
# Node constructors
# ============================================================

def input_node(name, shape=None):
    """Placeholder bound at evaluation time.

    Args:
        name: binding key; must be unique within one graph.
        shape: optional expected shape; entries of None are wildcards
            (the leading batch axis is usually left as None).
    """
    return Node("input", name=name, shape=shape)


def parameter(name, value):
    """Trainable leaf. The array is owned by the node and updated in place
    by the optimizer between evaluations."""
    arr = np.asarray(value, dtype=np.float64)
    return Node("parameter", name=name, shape=arr.shape, value=arr)


def affine(x, w, b):
    """x @ w + b with x of shape (batch, n) or (n,)."""
    return Node("affine", (x, w, b))


def tanh(x):
    return Node("tanh", (x,))


def relu(x):
    return Node("relu", (x,))


def sigmoid(x):
    return Node("sigmoid", (x,))


def softplus(x):
    return Node("softplus", (x,))


def exp(x):
    return Node("exp", (x,))


def concat(xs):
    """Concatenate along the last axis."""
    xs = tuple(xs)
    if len(xs) == 0:
        raise ValueError("concat of zero nodes")
    if len(xs) == 1:
        return xs[0]
    return Node("concat", xs)


def mul(a, b):
    """Elementwise product with numpy broadcasting."""
    return Node("mul", (a, b))


def add(a, b):
    """Elementwise sum with numpy broadcasting."""
    return Node("add", (a, b))


def scale(x, alpha, beta=0.0):
    """alpha * x + beta with scalar constants."""
    return Node("scale", (x,), payload=(float(alpha), float(beta)))


def square(x):
    return Node("square", (x,))


def reduce_sum(x):
    """Sum of all entries, as a 0-d array."""
    return Node("sum", (x,))


def l1_norm(x):
    """Sum of absolute values, as a 0-d array."""
    return Node("l1-norm", (x,))


def gaussian_nll(x, mu, sigma):
    """Elementwise negative log density of x under N(mu, sigma^2).

    sigma may be a Node or a positive float constant (unit-variance
    decoders pass 1.0). Returns an array shaped like x; reduce separately.
    """
    if isinstance(sigma, Node):
        return Node("gaussian-nll", (x, mu, sigma))
    s = float(sigma)
    if s <= 0.0:
        raise ValueError("constant sigma must be positive")
    return Node("gaussian-nll", (x, mu), payload=s)


def kl_diag_gaussian(mu_q, sigma_q, mu_p, sigma_p):
    """Elementwise KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2))."""
    return Node("kl-diag-gaussian", (mu_q, sigma_q, mu_p, sigma_p))


def log_softmax(x):
    """Row-wise log softmax over the last axis."""
    return Node("log-softmax", (x,))


# ============================================================
# Forward / backward kernels
# ============================================================

def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _forward(node):
    op = node.op
    pv = [p.value for p in node.parents]
    if op == "affine":
        x, w, b = pv
        node.value = x @ w + b
    elif op == "tanh":
        node.value = np.tanh(pv[0])
    elif op == "relu":
        node.value = np.maximum(pv[0], 0.0)
    elif op == "sigmoid":
        x = pv[0]
        node.value = 1.0 / (1.0 + np.exp(-x))
    elif op == "softplus":
        node.value = np.logaddexp(0.0, pv[0])
    elif op == "exp":
        node.value = np.exp(pv[0])
    elif op == "concat":
        node.value = np.concatenate(pv, axis=-1)
    elif op == "mul":
        node.value = pv[0] * pv[1]
    elif op == "add":
        node.value = pv[0] + pv[1]
    elif op == "scale":
        alpha, beta = node.payload
        node.value = alpha * pv[0] + beta
    elif op == "square":
        node.value = pv[0] * pv[0]
    elif op == "sum":
        node.value = np.asarray(pv[0].sum())
    elif op == "l1-norm":
        node.value = np.asarray(np.abs(pv[0]).sum())
    elif op == "gaussian-nll":
        if node.payload is None:
            x, mu, sig = pv
            z = (x - mu) / sig
            node.value = _HALF_LOG_2PI + np.log(sig) + 0.5 * z * z
        else:
            x, mu = pv
            s = node.payload
            z = (x - mu) / s
            node.value = _HALF_LOG_2PI + np.log(s) + 0.5 * z * z
    elif op == "kl-diag-gaussian":
        mq, sq, mp_, sp = pv
        node.value = (np.log(sp) - np.log(sq)
                      + (sq * sq + (mq - mp_) ** 2) / (2.0 * sp * sp) - 0.5)
    elif op == "log-softmax":
        x = pv[0]
        m = x.max(axis=-1, keepdims=True)
        z = x - m
        node.value = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    else:
        raise ValueError(f"cannot evaluate op {op!r}")


def _backward(node):
    g = node.grad
    op = node.op
    ps = node.parents

    def acc(p, contrib):
        contrib = _unbroadcast(np.asarray(contrib, dtype=np.float64), p.value.shape)
        if p.grad is None:
            p.grad = contrib.copy() if contrib is not None else None
        else:
            p.grad += contrib

    if op == "affine":
        x, w, b = ps
        gx = g @ w.value.T
        if x.value.ndim == 1:
            gw = np.outer(x.value, g)
            gb = g
        else:
            gw = x.value.T @ g
            gb = g.sum(axis=tuple(range(g.ndim - 1)))
        acc(x, gx)
        acc(w, gw)
        acc(b, gb)
    elif op == "tanh":
        acc(ps[0], g * (1.0 - node.value * node.value))
    elif op == "relu":
        acc(ps[0], g * (ps[0].value > 0.0))
    elif op == "sigmoid":
        acc(ps[0], g * node.value * (1.0 - node.value))
    elif op == "softplus":
        acc(ps[0], g / (1.0 + np.exp(-ps[0].value)))
    elif op == "exp":
        acc(ps[0], g * node.value)
    elif op == "concat":
        sizes = [p.value.shape[-1] for p in ps]
        offs = np.cumsum([0] + sizes)
        for p, a, b2 in zip(ps, offs[:-1], offs[1:]):
            acc(p, g[..., a:b2])
    elif op == "mul":
        a, b = ps
        acc(a, g * b.value)
        acc(b, g * a.value)
    elif op == "add":
        acc(ps[0], g)
        acc(ps[1], g)
    elif op == "scale":
        alpha, _ = node.payload
        acc(ps[0], alpha * g)
    elif op == "square":
        acc(ps[0], 2.0 * ps[0].value * g)
    elif op == "sum":
        acc(ps[0], np.broadcast_to(g, ps[0].value.shape))
    elif op == "l1-norm":
        acc(ps[0], g * np.sign(ps[0].value))
    elif op == "gaussian-nll":
        if node.payload is None:
            x, mu, sig = ps
            diff = x.value - mu.value
            inv2 = 1.0 / (sig.value * sig.value)
            acc(x, g * diff * inv2)
            acc(mu, -g * diff * inv2)
            acc(sig, g * (1.0 / sig.value - diff * diff * inv2 / sig.value))
        else:
            x, mu = ps
            inv2 = 1.0 / (node.payload * node.payload)
            diff = x.value - mu.value
            acc(x, g * diff * inv2)
            acc(mu, -g * diff * inv2)
    elif op == "kl-diag-gaussian":
        mq, sq, mp_, sp = ps
        dmu = (mq.value - mp_.value) / (sp.value * sp.value)
        acc(mq, g * dmu)
        acc(mp_, -g * dmu)
        acc(sq, g * (sq.value / (sp.value * sp.value) - 1.0 / sq.value))
        acc(sp, g * (1.0 / sp.value
                     - (sq.value ** 2 + (mq.value - mp_.value) ** 2) / sp.value ** 3))
    elif op == "log-softmax":
        p = np.exp(node.value)
        acc(ps[0], g - p * g.sum(axis=-1, keepdims=True))
    elif op in ("input", "parameter"):
        pass
    else:
        raise ValueError(f"cannot differentiate op {op!r}")


# ============================================================
# Graph evaluation
# ============================================================

def topo_order(outputs):
    """All nodes reachable from `outputs`, in a valid evaluation order."""
    seen = {}
    stack = list(outputs)
    while stack:
        n = stack.pop()
        if n.uid in seen:
            continue
        seen[n.uid] = n
        stack.extend(n.parents)
    # creation order is topological: parents always predate children
    return [seen[k] for k in sorted(seen)]


def _shape_ok(expected, actual):
    if expected is None:
        return True
    if len(expected) != len(actual):
        return False
    return all(e is None or e == a for e, a in zip(expected, actual))


def _bind(order, bindings):
    for n in order:
        if n.op != "input":
            continue
        if n in bindings:
            v = bindings[n]
        elif n.name in bindings:
            v = bindings[n.name]
        else:
            raise KeyError(f"missing binding for input {n.name!r}")
        v = np.asarray(v, dtype=np.float64)
        if not _shape_ok(n.shape, v.shape):
            raise ValueError(
                f"binding for {n.name!r} has shape {v.shape}, expected {n.shape}")
        n.value = v


def evaluate(outputs, bindings=None):
    """Forward-evaluate a list of nodes.

    Args:
        outputs: nodes whose values are wanted.
        bindings: {Node or name: array} for every reachable input node.

    Returns:
        {node: value} for the requested outputs.
    """
    order = topo_order(outputs)
    _bind(order, bindings or {})
    for n in order:
        if n.op not in ("input", "parameter"):
            _forward(n)
    return {n: n.value for n in outputs}


def gradients(loss, params, bindings=None, order=None):
    """Forward + reverse pass; returns (loss value, {param: grad}).

    The loss must evaluate to a scalar (0-d or single-element array).
    Parameters not touching the loss get zero gradients.
    """
    if order is None:
        order = topo_order([loss])
        _bind(order, bindings or {})
        for n in order:
            if n.op not in ("input", "parameter"):
                _forward(n)
    if np.size(loss.value) != 1:
        raise ValueError("loss node must be scalar")
    for n in order:
        n.grad = None
    loss.grad = np.ones_like(loss.value)
    for n in reversed(order):
        if n.grad is not None:
            _backward(n)
    out = {}
    for p in params:
        out[p] = p.grad if p.grad is not None else np.zeros_like(p.value)
    return np.float64(loss.value), out


class Runner:
    """Static-graph executor with a cached topological order.

    Build the graph once, then call forward / forward_backward per step
    with fresh input bindings; parameter arrays are read live, so
    optimizer updates between calls take effect automatically.
    """

    def __init__(self, outputs=(), loss=None, params=()):
        self.outputs = list(outputs)
        self.loss = loss
        self.params = list(params)
        roots = list(self.outputs) + ([loss] if loss is not None else [])
        if not roots:
            raise ValueError("Runner needs at least one output or a loss")
        self.order = topo_order(roots)

    def forward(self, bindings=None):
        _bind(self.order, bindings or {})
        for n in self.order:
            if n.op not in ("input", "parameter"):
                _forward(n)
        return {n: n.value for n in self.outputs}

    def forward_backward(self, bindings=None):
        self.forward(bindings)
        return gradients(self.loss, self.params, order=self.order)


# ============================================================
# Optimizer
# ============================================================

@dataclass
class AdamState:
    """Adaptive-moment optimizer state. One instance per fit phase; a
    fresh state is required whenever the trainable subset changes so that
    frozen entries stay bit-identical."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, grads, masks=None):
    """Apply one optimizer update in place.

    Args:
        state: AdamState, mutated.
        grads: {parameter Node: gradient array}.
        masks: optional {parameter Node: 0/1 array}; entries with mask 0
            receive no update at all (their moments stay zero too).
    """
    state.steps += 1
    t = state.steps
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g in grads.items():
        if masks is not None and p in masks:
            g = g * masks[p]
        m = state.m.get(p)
        if m is None:
            m = np.zeros_like(p.value)
            state.m[p] = m
            state.v[p] = np.zeros_like(p.value)
        v = state.v[p]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if masks is not None and p in masks:
            update = update * masks[p]
        p.value -= update


# ============================================================
# RNG and initializers
# ============================================================

def make_rng(seed, *keys):
    """Generator seeded from an explicit 64-bit seed plus optional
    stream keys. No global RNG anywhere in the package."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


def uniform_fanin(rng, n_in, n_out=None):
    """Uniform(-1/sqrt(n_in), 1/sqrt(n_in)) weight init."""
    bound = 1.0 / np.sqrt(max(n_in, 1))
    if n_out is None:
        return rng.uniform(-bound, bound, size=(n_in,))
    return rng.uniform(-bound, bound, size=(n_in, n_out))


# ============================================================
# Named-array serialization
# ============================================================

_MAGIC = b"CWAR"
FORMAT_VERSION = 1


def save_arrays(path, arrays):
    """Write {name: array} to a self-describing binary container.

    Layout: magic, u32 header length, JSON header (format version and an
    array index of name/shape/offset), then packed little-endian float64
    payloads. Names are sorted so identical inputs give identical bytes.
    """
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload += np.ascontiguousarray(arr).astype("<f8").tobytes()
    header = json.dumps({"format_version": FORMAT_VERSION, "arrays": entries},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(bytes(payload))


def load_arrays(path):
    """Read a container written by save_arrays. Raises ValueError on bad
    magic, unknown format version, or truncated payload."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise ValueError("not a named-array container (bad magic)")
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {header.get('format_version')!r}")
    base = 8 + hlen
    out = {}
    for ent in header["arrays"]:
        shape = tuple(ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + ent["offset"]
        end = start + 8 * count
        if end > len(blob):
            raise ValueError(f"truncated payload for array {ent['name']!r}")
        arr = np.frombuffer(blob[start:end], dtype="<f8").astype(np.float64)
        out[ent["name"]] = arr.reshape(shape)
    return out
