"""Minimal reverse-mode autodiff over numpy arrays.

Exactly the operations the recognition graph needs: spatial convolution,
max-pooling, fully connected layers, the usual activations, concatenation,
and a handful of scalar-reduction glue ops for the losses.  Gradients are
recorded on an explicit :class:`GradTape` and are verifiable coordinate by
coordinate with :func:`grad_check`.

Default dtype is float32.  All ops preserve the dtype of their inputs, so a
graph can be run in float64 for high-precision finite-difference checks.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "AutodiffError",
    "Tensor",
    "GradTape",
    "add",
    "sub",
    "mul",
    "scale",
    "add_const",
    "cmul",
    "linear",
    "conv2d",
    "maxpool2d",
    "flatten",
    "concat",
    "relu",
    "sigmoid",
    "softmax",
    "log",
    "sqrt",
    "clamp",
    "sum_all",
    "pick",
    "l2_normalize_rows",
    "pairwise_sqdist",
    "grad_check",
    "grad_check_params",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class AutodiffError(ValueError):
    """Raised on shape mismatches, tape misuse, or non-finite values."""


class Tensor:
    """A dense n-d array plus an optional link to the tape that records it.

    Only the tensors fed into a graph carry a tape reference; the reference
    propagates through every op so intermediate results are recorded
    automatically.  Parameters stay tape-free and still receive gradients,
    because they appear as op inputs.
    """

    __slots__ = ("data", "tape")

    def __init__(self, data, tape: "GradTape | None" = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.tape = tape

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
        return float(self.data.reshape(-1)[0])

    def __float__(self) -> float:
        if self.data.size != 1:
            raise AutodiffError(f"cannot convert shape {self.shape} tensor to float")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name})"


class GradTape:
    """Records operations in execution order; replays them in reverse.

    Because every op's inputs exist before the op runs, reverse execution
    order is a reverse topological order of the graph.  Gradient slots are
    keyed by tensor identity; a tensor with no path to the loss keeps a
    gradient of exactly zero.
    """

    def __init__(self):
        self._entries: list[tuple[tuple[Tensor, ...], Tensor, object]] = []
        self._grads: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self._entries)

    def record(self, inputs: tuple, output: Tensor, backward) -> None:
        """backward maps the output gradient to per-input gradients (or None)."""
        self._entries.append((inputs, output, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise AutodiffError("loss tensor was not recorded on this tape")
        if not np.isfinite(loss.data).all():
            raise AutodiffError("loss is not finite")
        self._grads = {id(loss): np.ones_like(loss.data)}
        for inputs, output, backward in reversed(self._entries):
            g_out = self._grads.get(id(output))
            if g_out is None:
                continue
            g_inputs = backward(g_out)
            for tensor, g in zip(inputs, g_inputs):
                if g is None:
                    continue
                slot = self._grads.get(id(tensor))
                if slot is None:
                    self._grads[id(tensor)] = g.astype(tensor.dtype, copy=False).copy()
                else:
                    slot += g

    def grad(self, tensor: Tensor) -> np.ndarray:
        """Gradient of the last backward() loss w.r.t. ``tensor`` (zeros if none)."""
        g = self._grads.get(id(tensor))
        if g is None:
            return np.zeros_like(tensor.data)
        return g


def _resolve_tape(*tensors: Tensor) -> GradTape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise AutodiffError("inputs belong to two different tapes")
    return tape


def _same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise AutodiffError(f"mixed dtypes in one op: {sorted(d.name for d in dtypes)}")


def _unary(x: Tensor, out_data: np.ndarray, backward) -> Tensor:
    tape = _resolve_tape(x)
    out = Tensor(out_data, tape)
    if tape is not None:
        tape.record((x,), out, backward)
    return out


# ---------------------------------------------------------------------------
# elementwise / glue ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise AutodiffError(f"add: shapes {a.shape} vs {b.shape}")
    tape = _resolve_tape(a, b)
    out = Tensor(a.data + b.data, tape)
    if tape is not None:
        tape.record((a, b), out, lambda g: (g, g))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise AutodiffError(f"sub: shapes {a.shape} vs {b.shape}")
    tape = _resolve_tape(a, b)
    out = Tensor(a.data - b.data, tape)
    if tape is not None:
        tape.record((a, b), out, lambda g: (g, -g))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise AutodiffError(f"mul: shapes {a.shape} vs {b.shape}")
    tape = _resolve_tape(a, b)
    out = Tensor(a.data * b.data, tape)
    if tape is not None:
        ad, bd = a.data, b.data
        tape.record((a, b), out, lambda g: (g * bd, g * ad))
    return out


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _unary(x, x.data * np.asarray(c, dtype=x.dtype), lambda g: (g * c,))


def add_const(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _unary(x, x.data + np.asarray(c, dtype=x.dtype), lambda g: (g,))


def cmul(x: Tensor, const: np.ndarray) -> Tensor:
    """Elementwise product with a constant array (no gradient into the constant)."""
    const = np.asarray(const, dtype=x.dtype)
    if const.shape != x.shape:
        raise AutodiffError(f"cmul: shapes {x.shape} vs {const.shape}")
    return _unary(x, x.data * const, lambda g: (g * const,))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """out = x @ w + b for x:[N,D], w:[D,M], b:[M]."""
    _same_dtype(x, w, b)
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise AutodiffError(f"linear: need 2-d input/weight, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise AutodiffError(f"linear: inner dims {x.shape} vs {w.shape}")
    if b.shape != (w.shape[1],):
        raise AutodiffError(f"linear: bias {b.shape} vs weight {w.shape}")
    tape = _resolve_tape(x, w, b)
    out = Tensor(x.data @ w.data + b.data, tape)
    if tape is not None:
        xd, wd = x.data, w.data

        def backward(g):
            return g @ wd.T, xd.T @ g, g.sum(axis=0)

        tape.record((x, w, b), out, backward)
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Spatial convolution: x:[N,C,H,W], w:[F,C,kh,kw], b:[F] -> [N,F,H',W'].

    H' = (H + 2*pad - kh)//stride + 1, implemented as column unfolding plus
    one GEMM so the backward pass is two GEMMs and a fold.
    """
    _same_dtype(x, w, b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise AutodiffError(f"conv2d: need 4-d input/kernel, got {x.shape}, {w.shape}")
    n, c, h, wdt = x.shape
    f, ck, kh, kw = w.shape
    if ck != c:
        raise AutodiffError(f"conv2d: channels differ, input {x.shape} vs kernel {w.shape}")
    if b.shape != (f,):
        raise AutodiffError(f"conv2d: bias {b.shape} vs kernel {w.shape}")
    if kh > h + 2 * pad or kw > wdt + 2 * pad:
        raise AutodiffError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wdt + 2 * pad - kw) // stride + 1

    xp = x.data
    if pad:
        xp = np.pad(xp, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    # [N*ho*wo, C*kh*kw] @ [C*kh*kw, F]
    cols_mat = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * kh * kw)
    w_mat = w.data.reshape(f, c * kh * kw)
    out_mat = cols_mat @ w_mat.T + b.data
    out_data = out_mat.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    tape = _resolve_tape(x, w, b)
    out = Tensor(np.ascontiguousarray(out_data), tape)
    if tape is not None:

        def backward(g):
            g_mat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
            gw = (g_mat.T @ cols_mat).reshape(f, c, kh, kw)
            gb = g_mat.sum(axis=0)
            gcols = (g_mat @ w_mat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, pad : pad + h, pad : pad + wdt] if pad else gxp
            return gx, gw, gb

        tape.record((x, w, b), out, backward)
    return out


def maxpool2d(x: Tensor, size: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling with a square window; window size must equal stride and
    divide the spatial dims (the only configuration the backbone uses)."""
    stride = size if stride is None else stride
    if stride != size:
        raise AutodiffError("maxpool2d: only size == stride is supported")
    if x.data.ndim != 4:
        raise AutodiffError(f"maxpool2d: need 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if h % size or w % size:
        raise AutodiffError(f"maxpool2d: window {size} does not divide dims of {x.shape}")
    ho, wo = h // size, w // size
    windows = x.data.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
    flat = windows.reshape(n, c, ho, wo, size * size)
    arg = flat.argmax(axis=4)
    out_data = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]

    tape = _resolve_tape(x)
    out = Tensor(np.ascontiguousarray(out_data), tape)
    if tape is not None:

        def backward(g):
            gflat = np.zeros((n, c, ho, wo, size * size), dtype=g.dtype)
            np.put_along_axis(gflat, arg[..., None], g[..., None], axis=4)
            gx = gflat.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
            return (np.ascontiguousarray(gx.reshape(n, c, h, w)),)

        tape.record((x,), out, backward)
    return out


def flatten(x: Tensor) -> Tensor:
    """[N, ...] -> [N, prod(...)]."""
    n = x.shape[0]
    orig = x.shape
    out_data = x.data.reshape(n, -1)
    return _unary(x, out_data, lambda g: (g.reshape(orig),))


def concat(a: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    _same_dtype(a, b)
    sa, sb = list(a.shape), list(b.shape)
    if len(sa) != len(sb) or sa[:axis] + sa[axis + 1 :] != sb[:axis] + sb[axis + 1 :]:
        raise AutodiffError(f"concat: shapes {a.shape} vs {b.shape} differ off axis {axis}")
    tape = _resolve_tape(a, b)
    out = Tensor(np.concatenate([a.data, b.data], axis=axis), tape)
    if tape is not None:
        boundary = a.shape[axis]

        def backward(g):
            ga, gb = np.split(g, [boundary], axis=axis)
            return ga, gb

        tape.record((a, b), out, backward)
    return out


# ---------------------------------------------------------------------------
# activations and reductions
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)
    mask = x.data > 0
    return _unary(x, out_data, lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out_data[~pos] = e / (1.0 + e)
    return _unary(x, out_data, lambda g: (g * out_data * (1.0 - out_data),))


def softmax(x: Tensor) -> Tensor:
    """Row softmax of a [N, C] tensor, computed with max subtraction."""
    if x.data.ndim != 2:
        raise AutodiffError(f"softmax: need 2-d input, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=1, keepdims=True)
        return (out_data * (g - dot),)

    return _unary(x, out_data, backward)


def log(x: Tensor) -> Tensor:
    d = x.data
    return _unary(x, np.log(d), lambda g: (g / d,))


def sqrt(x: Tensor) -> Tensor:
    out_data = np.sqrt(x.data)
    return _unary(x, out_data, lambda g: (g * (0.5 / out_data),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out_data = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)
    return _unary(x, out_data, lambda g: (g * mask,))


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar (shape ()) tensor."""
    out_data = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    shape = x.shape
    return _unary(x, out_data, lambda g: (np.broadcast_to(g, shape).astype(g.dtype),))


def pick(x: Tensor, idx) -> Tensor:
    """Select one column per row: out[i] = x[i, idx[i]] for x:[N, C]."""
    idx = np.asarray(idx)
    if x.data.ndim != 2:
        raise AutodiffError(f"pick: need 2-d input, got {x.shape}")
    if idx.shape != (x.shape[0],):
        raise AutodiffError(f"pick: index shape {idx.shape} vs input {x.shape}")
    if idx.min() < 0 or idx.max() >= x.shape[1]:
        raise AutodiffError(f"pick: index out of range for {x.shape[1]} columns")
    rows = np.arange(x.shape[0])
    out_data = x.data[rows, idx]
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[rows, idx] = g
        return (gx,)

    return _unary(x, out_data, backward)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of x:[N, D] to unit euclidean norm."""
    if x.data.ndim != 2:
        raise AutodiffError(f"l2_normalize_rows: need 2-d input, got {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True) + eps)
    out_data = x.data / norms
    xd = x.data

    def backward(g):
        proj = (g * xd).sum(axis=1, keepdims=True)
        return ((g - xd * (proj / (norms * norms))) / norms,)

    return _unary(x, out_data, backward)


def pairwise_sqdist(z: Tensor) -> Tensor:
    """All-pairs squared euclidean distances of the rows of z:[N, D] -> [N, N]."""
    if z.data.ndim != 2:
        raise AutodiffError(f"pairwise_sqdist: need 2-d input, got {z.shape}")
    diff = z.data[:, None, :] - z.data[None, :, :]
    out_data = (diff * diff).sum(axis=2)
    zd = z.data

    def backward(g):
        s = g + g.T
        gz = 2.0 * (s.sum(axis=1, keepdims=True) * zd - s @ zd)
        return (gz.astype(zd.dtype, copy=False),)

    return _unary(z, out_data, backward)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def grad_check(f, point: Tensor | np.ndarray, eps: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a tensor to a scalar tensor.  The analytic gradient comes from
    one taped evaluation at ``point``; the numeric one perturbs every
    coordinate by ±eps.  Relative error per coordinate is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    base = point.data if isinstance(point, Tensor) else np.asarray(point)
    tape = GradTape()
    p = Tensor(base.copy(), tape)
    out = f(p)
    if out.data.size != 1:
        raise AutodiffError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise AutodiffError("grad_check: f is not finite at the given point")
    tape.backward(out)
    analytic = tape.grad(p).reshape(-1).astype(np.float64)

    work = base.copy()
    flat = work.reshape(-1)
    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_hi = float(f(Tensor(work)).data)
        flat[i] = orig - eps
        f_lo = float(f(Tensor(work)).data)
        flat[i] = orig
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise AutodiffError(f"grad_check: f not finite near coordinate {i}")
        numeric[i] = (f_hi - f_lo) / (2.0 * eps)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0


def grad_check_params(loss_fn, params: dict[str, Tensor], eps: float = 1e-4) -> dict[str, float]:
    """Finite-difference check of a loss over a dict of named parameter tensors.

    ``loss_fn(tape)`` must evaluate the full objective against the current
    contents of ``params`` (tape=None means plain evaluation).  Returns the
    max relative error per parameter; perturbations are done in place and
    restored.
    """
    tape = GradTape()
    loss = loss_fn(tape)
    tape.backward(loss)
    errors: dict[str, float] = {}
    for name, tensor in params.items():
        analytic = tape.grad(tensor).reshape(-1).astype(np.float64)
        flat = tensor.data.reshape(-1)
        numeric = np.empty_like(analytic)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_hi = float(loss_fn(None).data)
            flat[i] = orig - eps
            f_lo = float(loss_fn(None).data)
            flat[i] = orig
            numeric[i] = (f_hi - f_lo) / (2.0 * eps)
        denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
        errors[name] = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
    return errors
