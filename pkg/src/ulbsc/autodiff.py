"""Dense-tensor reverse-mode autodiff with an Adam optimizer.

A small numpy-backed engine: every op records a backward closure on the
tensor it produces and ``Tensor.backward()`` replays the closures in
reverse topological order. The kernel set covers exactly what the codecs
in this package need. Broadcasting is limited to numpy's trailing-dim
rules (bias adds); anything fancier raises.

Tests run at 64-bit; training code may pass 32-bit arrays throughout.
"""
from __future__ import annotations

import json
import os
import threading

import numpy as np

FINITE_CHECK = True  # raise NumericError as soon as an op produces NaN/Inf

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested kernel."""


class NumericError(ValueError):
    """A value became NaN/Inf; the tape is in an error state."""


class ContractError(RuntimeError):
    """An API precondition was violated (non-scalar loss, missing grad, ...)."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager: ops built inside record no tape (pure evaluation)."""

    def __enter__(self):
        self.prev = _grad_enabled()
        _state.grad_enabled = False

    def __exit__(self, exc_type, exc, tb):
        _state.grad_enabled = self.prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if FINITE_CHECK and not np.all(np.isfinite(arr)):
            raise NumericError("tensor constructed with non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        """Populate .grad of every reachable requires_grad tensor.

        Repeated calls without zeroing accumulate into existing grads.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward() needs a scalar loss, got shape {self.data.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; everything routes through the module-level kernels
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_coerce(other, self)))

    def __rsub__(self, other):
        return add(neg(self), _coerce(other, self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named trainable tensor; its .grad is filled by backward()."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(np.array(data), requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape})"


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(out_data: np.ndarray, parents, backward_fn) -> Tensor:
    if FINITE_CHECK and not np.all(np.isfinite(out_data)):
        raise NumericError("op produced non-finite values")
    t = Tensor.__new__(Tensor)
    t.data = out_data
    t.grad = None
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    t.requires_grad = track
    t._prev = tuple(parents) if track else ()
    t._backward = backward_fn if track else None
    return t


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy trailing-dim broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise kernels


def add(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: cannot combine {a.shape} and {b.shape}") from e

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, -g)

    return _make(-a.data, (a,), bwd)


def mul(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: cannot combine {a.shape} and {b.shape}") from e

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def bwd(g):
        _accum(a, g * (a.data > 0))

    return _make(out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(over="ignore"):
        out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))

    def bwd(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def bwd(g):
        _accum(a, g / a.data)

    return _make(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out)

    return _make(out, (a,), bwd)


def pow_scalar(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for real p; inputs must be positive when p is not integral."""
    out = a.data ** p

    def bwd(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _make(out, (a,), bwd)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    out = np.maximum(a.data, lo)

    def bwd(g):
        _accum(a, g * (a.data > lo))

    return _make(out, (a,), bwd)


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# reductions


def _axes_tuple(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        return (axes % ndim,)
    return tuple(ax % ndim for ax in axes)


def tsum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _axes_tuple(axes, a.data.ndim)
    out = a.data.sum(axis=ax, keepdims=keepdims)

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, ax)
        _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(np.asarray(out), (a,), bwd)


def mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _axes_tuple(axes, a.data.ndim)
    n = int(np.prod([a.data.shape[i] for i in ax])) if ax else 1
    out = a.data.mean(axis=ax, keepdims=keepdims)

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, ax)
        _accum(a, np.broadcast_to(gg, a.data.shape) / n)

    return _make(np.asarray(out), (a,), bwd)


def sumsq(a: Tensor) -> Tensor:
    """Scalar sum of squares."""
    out = np.asarray((a.data ** 2).sum())

    def bwd(g):
        _accum(a, 2.0 * g * a.data)

    return _make(out, (a,), bwd)


def tmax(a: Tensor) -> float:
    """Detached max over all elements (stabiliser constant, not an op)."""
    return float(a.data.max())


# ---------------------------------------------------------------------------
# shape kernels


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size and -1 not in shape:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    out = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out, (a,), bwd)


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def bwd(g):
        _accum(a, g.transpose(inv))

    return _make(out, (a,), bwd)


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeError(f"concat_last: {a.shape} vs {b.shape}")
    na = a.data.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)

    def bwd(g):
        _accum(a, g[..., :na])
        _accum(b, g[..., na:])

    return _make(out, (a, b), bwd)


def index_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; duplicated indices accumulate gradient."""
    idx = np.asarray(idx)
    out = a.data[idx]

    def bwd(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx, g)
            _accum(a, acc)

    return _make(out, (a,), bwd)


def embedding(weights: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: weights (V,d), ids any int shape -> ids.shape + (d,)."""
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= weights.data.shape[0]:
        raise ShapeError("embedding: id out of range")
    out = weights.data[ids]

    def bwd(g):
        if weights.requires_grad:
            acc = np.zeros_like(weights.data)
            np.add.at(acc, ids, g)
            _accum(weights, acc)

    return _make(out, (weights,), bwd)


def gather_last(a: Tensor, ids: np.ndarray) -> Tensor:
    """Pick one entry along the last axis per leading position."""
    ids = np.asarray(ids)
    if ids.shape != a.data.shape[:-1]:
        raise ShapeError(f"gather_last: ids {ids.shape} vs data {a.shape}")
    out = np.take_along_axis(a.data, ids[..., None], axis=-1)[..., 0]

    def bwd(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.put_along_axis(acc, ids[..., None], g[..., None], axis=-1)
            _accum(a, acc)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D or batched 3-D matrix product (batch dims must match exactly)."""
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 3):
        raise ShapeError(f"matmul: ndim {a.data.ndim} @ {b.data.ndim} unsupported")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape}")
    if a.data.ndim == 3 and a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"matmul: batch dims {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        _accum(a, g @ b.data.swapaxes(-1, -2))
        _accum(b, a.data.swapaxes(-1, -2) @ g)

    return _make(out, (a, b), bwd)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accum(a, out * (g - dot))

    return _make(out, (a,), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError("layer_norm: gain/bias must match the last axis")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        _accum(bias, g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(a, inv * (gx - m1 - xhat * m2))

    return _make(out, (a, gain, bias), bwd)


# ---------------------------------------------------------------------------
# convolution kernels (NCHW layout)


def _conv_out_dim(n, k, s, p):
    o = (n + 2 * p - k) // s + 1
    if o <= 0:
        raise ShapeError(f"conv: size {n} with kernel {k} stride {s} pad {p}")
    return o


def _im2col(x: np.ndarray, kh, kw, s, p):
    """(B,C,H,W) -> cols (C*kh*kw, B*Ho*Wo) so convs run as one 2-D GEMM."""
    b, c, h, w = x.shape
    ho = _conv_out_dim(h, kh, s, p)
    wo = _conv_out_dim(w, kw, s, p)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::s, ::s]  # (b, c, ho, wo, kh, kw) strided view
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, b * ho * wo)
    return cols, ho, wo


def _col2im(cols: np.ndarray, b, c, h, w, kh, kw, s, p, ho, wo):
    """Adjoint of _im2col: scatter-add cols back to (B,C,H,W)."""
    out = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    cols6 = cols.reshape(c, kh, kw, b, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + s * ho : s, j : j + s * wo : s] += cols6[:, i, j].transpose(1, 0, 2, 3)
    if p:
        out = out[:, :, p : p + h, p : p + w]
    return np.ascontiguousarray(out)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """x (B,Ci,H,W) * w (Co,Ci,kh,kw) -> (B,Co,Ho,Wo)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d: expects 4-D input and weight")
    bs, ci, h, wd = x.data.shape
    co, ciw, kh, kw = w.data.shape
    if ci != ciw:
        raise ShapeError(f"conv2d: input channels {ci} != weight channels {ciw}")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    w2 = w.data.reshape(co, ci * kh * kw)
    out = (w2 @ cols).reshape(co, bs, ho, wo).swapaxes(0, 1)
    if b is not None:
        if b.data.shape != (co,):
            raise ShapeError("conv2d: bias must be (Co,)")
        out = out + b.data.reshape(co, 1, 1)
    else:
        out = np.ascontiguousarray(out)

    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gm = g.swapaxes(0, 1).reshape(co, bs * ho * wo)
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            _accum(w, (gm @ cols.T).reshape(w.data.shape))
        if x.requires_grad:
            dcols = w2.T @ gm
            _accum(x, _col2im(dcols, bs, ci, h, wd, kh, kw, stride, padding, ho, wo))

    return _make(out, parents, bwd)


def conv2d_transpose(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """x (B,Ci,H,W) * w (Ci,Co,kh,kw) -> (B,Co,Ho,Wo), the conv2d adjoint."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d_transpose: expects 4-D input and weight")
    if not 0 <= output_padding < stride:
        raise ShapeError("conv2d_transpose: output_padding must be in [0, stride)")
    bs, ci, h, wd = x.data.shape
    ciw, co, kh, kw = w.data.shape
    if ci != ciw:
        raise ShapeError(f"conv2d_transpose: channels {ci} != weight {ciw}")
    ho = (h - 1) * stride - 2 * padding + kh + output_padding
    wo = (wd - 1) * stride - 2 * padding + kw + output_padding
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d_transpose: non-positive output size")
    xm = x.data.swapaxes(0, 1).reshape(ci, bs * h * wd)
    w2 = w.data.reshape(ci, co * kh * kw)
    cols = w2.T @ xm  # (Co*kh*kw, B*H*W)
    out = _col2im(cols, bs, co, ho, wo, kh, kw, stride, padding, h, wd)
    if b is not None:
        if b.data.shape != (co,):
            raise ShapeError("conv2d_transpose: bias must be (Co,)")
        out = out + b.data.reshape(co, 1, 1)

    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))
        gcols, gho, gwo = _im2col(g, kh, kw, stride, padding)
        # windows past the output_padding rows never receive forward writes,
        # so _im2col covering exactly (h, wd) positions is the true adjoint
        assert (gho, gwo) == (h, wd)
        if x.requires_grad:
            _accum(x, (w2 @ gcols).reshape(ci, bs, h, wd).swapaxes(0, 1))
        if w.requires_grad:
            _accum(w, (xm @ gcols.T).reshape(w.data.shape))

    return _make(out, parents, bwd)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Standard Adam with bias correction."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                name = getattr(p, "name", "<tensor>")
                raise ContractError(f"adam step: parameter {name} has no gradient")
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def finite_diff_check(build_loss, tensors, eps: float = 1e-5) -> float:
    """Max relative error of autodiff grads vs central differences.

    build_loss rebuilds the graph from the current tensor data each call
    and returns a scalar Tensor; it must be deterministic.
    """
    for t in tensors:
        t.grad = None
    build_loss().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    for t, ag in zip(tensors, analytic):
        flat = t.data.ravel()
        ng = np.zeros_like(ag).ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(build_loss().data)
            flat[i] = orig - eps
            fm = float(build_loss().data)
            flat[i] = orig
            ng[i] = (fp - fm) / (2.0 * eps)
        worst = max(worst, relative_error(ag.ravel(), ng))
    return worst


# ---------------------------------------------------------------------------
# checkpoint format: manifest.json + raw little-endian float32 blob

MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"


class CheckpointError(ValueError):
    """Checkpoint directory is missing pieces or inconsistent."""


def save_checkpoint(dirpath: str, tensors: dict, extra: dict | None = None) -> str:
    """Write manifest.json + weights.bin; returns the manifest path."""
    os.makedirs(dirpath, exist_ok=True)
    entries = []
    blob = bytearray()
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append(
            {"name": name, "shape": list(np.shape(arr)), "offset": len(blob), "nbytes": len(raw)}
        )
        blob += raw
    manifest = {
        "dtype": "float32",
        "byte_order": "little",
        "weights_file": WEIGHTS_NAME,
        "tensors": entries,
        "extra": extra or {},
    }
    mpath = os.path.join(dirpath, MANIFEST_NAME)
    with open(os.path.join(dirpath, WEIGHTS_NAME), "wb") as f:
        f.write(bytes(blob))
    with open(mpath, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return mpath


def load_checkpoint(dirpath: str):
    """Read a checkpoint directory -> (dict name->float32 array, extra dict)."""
    mpath = os.path.join(dirpath, MANIFEST_NAME)
    if not os.path.isfile(mpath):
        raise CheckpointError(f"no {MANIFEST_NAME} in {dirpath}")
    with open(mpath) as f:
        manifest = json.load(f)
    if manifest.get("dtype") != "float32" or manifest.get("byte_order") != "little":
        raise CheckpointError("unsupported checkpoint dtype/byte order")
    with open(os.path.join(dirpath, manifest["weights_file"]), "rb") as f:
        blob = f.read()
    tensors = {}
    for ent in manifest["tensors"]:
        span = blob[ent["offset"] : ent["offset"] + ent["nbytes"]]
        if len(span) != ent["nbytes"]:
            raise CheckpointError(f"weights blob truncated at {ent['name']}")
        arr = np.frombuffer(span, dtype="<f4").reshape(ent["shape"]).copy()
        tensors[ent["name"]] = arr
    return tensors, manifest.get("extra", {})


def params_to_dict(params) -> dict:
    return {p.name: p.data for p in params}
