"""Minimal reverse-mode autodiff and training utilities on numpy arrays.

Networks are flat stacks of four layer kinds: dense, relu, scaled_tanh and
concat. The recorded graph additionally supports the elementwise ops that the
variational objective and the latent attacks compose on top of network
outputs (add/sub/mul/exp/tanh/sums/cross-entropy). Network math runs in
float32; ops preserve dtype so tests can drive the same graph in float64.
"""

import json
import math
import os

import numpy as np


def finite_or_raise(x, what: str):
    """Raise when an array picked up NaN or inf; returns the array unchanged."""
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------------------
# Recorded computation


class Var:
    """Node in a recorded computation: value, accumulated grad, backward rule."""

    __slots__ = ("value", "grad", "_parents", "_vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value)
        self.grad = None
        self._parents = parents
        self._vjp = vjp

    def __repr__(self):
        return f"Var(shape={self.value.shape}, dtype={self.value.dtype})"

    # arithmetic sugar; operands may be Var, ndarray, or python scalars
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


def _is_rec(*xs):
    return any(isinstance(x, Var) for x in xs)


def _accum(node, g):
    if isinstance(node, Var):
        node.grad = g if node.grad is None else node.grad + g


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    av, bv = _val(a), _val(b)
    out = av + bv
    if not _is_rec(a, b):
        return out

    def vjp(g):
        _accum(a, _unbroadcast(g, av.shape))
        _accum(b, _unbroadcast(g, np.shape(bv)))

    return Var(out, (a, b), vjp)


def mul(a, b):
    av, bv = _val(a), _val(b)
    out = av * bv
    if not _is_rec(a, b):
        return out

    def vjp(g):
        _accum(a, _unbroadcast(g * bv, av.shape))
        _accum(b, _unbroadcast(g * av, np.shape(bv)))

    return Var(out, (a, b), vjp)


def matmul(a, b):
    av, bv = _val(a), _val(b)
    out = av @ bv
    if not _is_rec(a, b):
        return out

    def vjp(g):
        _accum(a, g @ bv.T)
        _accum(b, av.T @ g)

    return Var(out, (a, b), vjp)


def relu(a):
    av = _val(a)
    out = np.maximum(av, 0)
    if not _is_rec(a):
        return out

    def vjp(g):
        _accum(a, g * (av > 0))

    return Var(out, (a,), vjp)


def tanh(a):
    av = _val(a)
    out = np.tanh(av)
    if not _is_rec(a):
        return out

    def vjp(g):
        _accum(a, g * (1.0 - out * out))

    return Var(out, (a,), vjp)


def exp(a):
    av = _val(a)
    out = np.exp(av)
    if not _is_rec(a):
        return out

    def vjp(g):
        _accum(a, g * out)

    return Var(out, (a,), vjp)


def concat(parts):
    vals = [_val(p) for p in parts]
    out = np.concatenate(vals, axis=-1)
    if not _is_rec(*parts):
        return out
    widths = [v.shape[-1] for v in vals]

    def vjp(g):
        start = 0
        for p, w in zip(parts, widths):
            _accum(p, g[..., start:start + w])
            start += w

    return Var(out, tuple(parts), vjp)


def reshape(a, shape):
    av = _val(a)
    out = av.reshape(shape)
    if not _is_rec(a):
        return out

    def vjp(g):
        _accum(a, np.asarray(g).reshape(av.shape))

    return Var(out, (a,), vjp)


def sum_all(a):
    av = _val(a)
    out = av.sum()
    if not _is_rec(a):
        return out

    def vjp(g):
        _accum(a, np.broadcast_to(np.asarray(g, dtype=av.dtype), av.shape))

    return Var(out, (a,), vjp)


def row_sum(a):
    """Sum over the last axis: (B, m) -> (B,)."""
    av = _val(a)
    out = av.sum(axis=-1)
    if not _is_rec(a):
        return out

    def vjp(g):
        _accum(a, np.broadcast_to(np.expand_dims(g, -1), av.shape).astype(av.dtype))

    return Var(out, (a,), vjp)


def mean_all(a):
    av = _val(a)
    return mul(sum_all(a), 1.0 / av.size)


def cross_entropy(logits, labels):
    """Per-example softmax cross-entropy: (B, C) x (B,) int -> (B,)."""
    lv = _val(logits)
    labels = np.asarray(labels)
    m = lv.max(axis=-1, keepdims=True)
    z = lv - m
    lse = np.log(np.exp(z).sum(axis=-1)) + m[..., 0]
    picked = np.take_along_axis(lv, labels[:, None], axis=-1)[:, 0]
    out = lse - picked
    if not _is_rec(logits):
        return out

    softmax = np.exp(z)
    softmax /= softmax.sum(axis=-1, keepdims=True)

    def vjp(g):
        gg = softmax.copy()
        gg[np.arange(gg.shape[0]), labels] -= 1.0
        _accum(logits, gg * np.expand_dims(g, -1))

    return Var(out, (logits,), vjp)


def backward(loss, seed=1.0):
    """Reverse pass from a scalar Var; fills .grad on every reachable node."""
    if not isinstance(loss, Var):
        raise ValueError("loss is not a recorded value")
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if isinstance(p, Var) and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.asarray(seed, dtype=loss.value.dtype)
    for node in reversed(order):
        if node._vjp is not None and node.grad is not None:
            node._vjp(node.grad)


# ---------------------------------------------------------------------------
# Parameters and the Adam optimizer


class ParamSet:
    """Named parameter tensors plus Adam moment state and a shared step count."""

    def __init__(self, values=None):
        self.values: dict[str, np.ndarray] = dict(values or {})
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def copy(self):
        out = ParamSet({k: v.copy() for k, v in self.values.items()})
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        out.step = self.step
        return out

    def __contains__(self, name):
        return name in self.values

    def __getitem__(self, name):
        return self.values[name]


class Rec:
    """Recording context tying one loss graph to a ParamSet's leaves."""

    def __init__(self, params: ParamSet):
        self.params = params
        self._vars: dict[str, Var] = {}

    def param(self, name: str) -> Var:
        if name not in self._vars:
            self._vars[name] = Var(self.params.values[name])
        return self._vars[name]

    def grads(self) -> dict[str, np.ndarray]:
        """Gradients for every parameter; zeros where the graph never used one."""
        out = {}
        for name, value in self.params.values.items():
            node = self._vars.get(name)
            if node is None or node.grad is None:
                out[name] = np.zeros_like(value)
            else:
                out[name] = np.asarray(node.grad, dtype=value.dtype).reshape(value.shape)
        return out


def backprop_gradients(rec: Rec, loss: Var, seed=1.0) -> dict[str, np.ndarray]:
    backward(loss, seed)
    return rec.grads()


def adam_step(params: ParamSet, grads: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update over every parameter, in place."""
    for name in params.values:
        if name not in grads:
            raise ValueError(f"missing gradient for parameter {name!r}")
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, value in params.values.items():
        g = grads[name]
        if g.shape != value.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {value.shape} for {name!r}")
        g = g.astype(value.dtype, copy=False)
        if name not in params.m:
            params.m[name] = np.zeros_like(value)
            params.v[name] = np.zeros_like(value)
        m = params.m[name]
        v = params.v[name]
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        value -= (lr / c1) * m / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# Networks


_LAYER_KINDS = ("dense", "relu", "scaled_tanh", "concat")


class Network:
    """A named stack of layers over one or more input streams.

    Layers are tuples: ("dense", out_dim), ("relu",), ("scaled_tanh", lo, hi),
    ("concat",). Multiple input streams must be merged by a concat before any
    other layer touches them.
    """

    def __init__(self, name: str, in_dims, layers):
        self.name = name
        self.in_dims = [int(d) for d in (in_dims if isinstance(in_dims, (list, tuple)) else [in_dims])]
        if any(d < 1 for d in self.in_dims):
            raise ValueError(f"{name}: input widths must be positive, got {self.in_dims}")
        self.layers = [tuple(l) for l in layers]
        self._shapes = {}
        width, streams = None, len(self.in_dims)
        if streams == 1:
            width = self.in_dims[0]
        dense_i = 0
        for layer in self.layers:
            kind = layer[0]
            if kind not in _LAYER_KINDS:
                raise ValueError(f"{name}: unknown layer kind {kind!r}")
            if kind == "concat":
                if streams < 1:
                    raise ValueError(f"{name}: nothing to concat")
                width, streams = sum(self.in_dims), 1
                continue
            if streams != 1:
                raise ValueError(f"{name}: {kind} needs a single stream; concat first")
            if kind == "dense":
                out = int(layer[1])
                if out < 1:
                    raise ValueError(f"{name}: dense width must be positive, got {out}")
                self._shapes[f"{name}/w{dense_i}"] = (width, out)
                self._shapes[f"{name}/b{dense_i}"] = (out,)
                dense_i += 1
                width = out
            elif kind == "scaled_tanh":
                lo, hi = float(layer[1]), float(layer[2])
                if not lo < hi:
                    raise ValueError(f"{name}: scaled_tanh needs lo < hi, got ({lo}, {hi})")
        if streams != 1:
            raise ValueError(f"{name}: multiple input streams never merged by concat")
        self.out_dim = width

    def param_shapes(self) -> dict:
        return dict(self._shapes)

    def init(self, params: ParamSet, rng: np.random.Generator):
        """Add this network's parameters: Glorot-uniform weights, zero biases."""
        for pname, shape in self._shapes.items():
            if len(shape) == 2:
                bound = math.sqrt(6.0 / (shape[0] + shape[1]))
                params.values[pname] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
            else:
                params.values[pname] = np.zeros(shape, dtype=np.float32)

    def apply(self, params: ParamSet, inputs, rec: Rec = None):
        """Forward pass. `inputs` is an array or list of arrays/Vars, shaped
        (B, d) or (d,). Returns ndarray, or a Var when recording (rec given
        or any input is a Var)."""
        if not isinstance(inputs, (list, tuple)):
            inputs = [inputs]
        if len(inputs) != len(self.in_dims):
            raise ValueError(f"{self.name}: expected {len(self.in_dims)} inputs, got {len(inputs)}")
        single = _val(inputs[0]).ndim == 1
        streams = []
        for x, d in zip(inputs, self.in_dims):
            if _val(x).ndim == 1:
                x = reshape(x, (1, d))
            if _val(x).shape[-1] != d:
                raise ValueError(f"{self.name}: input width {_val(x).shape[-1]} != declared {d}")
            streams.append(x)
        h = streams[0] if len(streams) == 1 else None
        dense_i = 0
        for layer in self.layers:
            kind = layer[0]
            if kind == "concat":
                h = concat(streams)
            elif kind == "dense":
                w = rec.param(f"{self.name}/w{dense_i}") if rec else params.values[f"{self.name}/w{dense_i}"]
                b = rec.param(f"{self.name}/b{dense_i}") if rec else params.values[f"{self.name}/b{dense_i}"]
                h = add(matmul(h, w), b)
                dense_i += 1
            elif kind == "relu":
                h = relu(h)
            else:
                lo, hi = layer[1], layer[2]
                h = add(mul(add(tanh(h), 1.0), 0.5 * (hi - lo)), lo)
        if single:
            h = reshape(h, (self.out_dim,))
        return h


# ---------------------------------------------------------------------------
# Schedules


class Schedule:
    """Piecewise-linear schedule over training epochs.

    Exact at the knots, linear between them, clamped to the end values
    outside the knot range. Knot positions must strictly increase.
    """

    def __init__(self, epochs, values):
        self.epochs = [float(e) for e in epochs]
        self.values = [float(v) for v in values]
        if len(self.epochs) != len(self.values) or not self.epochs:
            raise ValueError("schedule needs matching, non-empty knot lists")
        if any(b <= a for a, b in zip(self.epochs, self.epochs[1:])):
            raise ValueError(f"schedule epochs must strictly increase, got {self.epochs}")

    def value(self, epoch: float) -> float:
        return float(np.interp(epoch, self.epochs, self.values))

    @staticmethod
    def cyclic(peak_value: float, peak_epoch: float, total_epochs: float) -> "Schedule":
        """Triangular ramp: 0 at epoch 0, peak at peak_epoch, 0 at total_epochs."""
        return Schedule([0.0, peak_epoch, total_epochs], [0.0, peak_value, 0.0])

    def to_json(self):
        return {"epochs": self.epochs, "values": self.values}

    @staticmethod
    def from_json(obj):
        return Schedule(obj["epochs"], obj["values"])


# ---------------------------------------------------------------------------
# Checkpoints


def save_params(params: ParamSet, stem: str, extra: dict = None):
    """Write `<stem>.json` (manifest) and `<stem>.bin` (little-endian float32
    blob, concatenated in manifest order). Parameter order is sorted by name
    so the byte layout is deterministic."""
    names = sorted(params.values)
    manifest = {
        "format": "pertsets-params-v1",
        "tensors": [{"name": n, "shape": list(params.values[n].shape)} for n in names],
        "extra": extra or {},
    }
    blob = b"".join(np.ascontiguousarray(params.values[n], dtype="<f4").tobytes() for n in names)
    with open(stem + ".json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(stem + ".bin", "wb") as f:
        f.write(blob)


def load_params(stem: str):
    """Inverse of save_params; returns (ParamSet, extra dict)."""
    for suffix in (".json", ".bin"):
        if not os.path.exists(stem + suffix):
            raise FileNotFoundError(f"checkpoint part missing: {stem}{suffix}")
    with open(stem + ".json", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format") != "pertsets-params-v1":
        raise ValueError(f"unrecognized checkpoint format in {stem}.json")
    raw = np.fromfile(stem + ".bin", dtype="<f4")
    params = ParamSet()
    pos = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        if pos + n > raw.size:
            raise ValueError(f"checkpoint blob too short for tensor {entry['name']!r}")
        params.values[entry["name"]] = raw[pos:pos + n].reshape(shape).copy()
        pos += n
    if pos != raw.size:
        raise ValueError(f"checkpoint blob has {raw.size - pos} trailing floats")
    return params, manifest.get("extra", {})
