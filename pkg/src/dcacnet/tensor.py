"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` working on numpy arrays and a ``backward`` returning one gradient
per input.  Calling ``Function.apply`` records the op on the output tensor;
:meth:`Tensor.backward` walks the recorded graph in reverse topological order.

Gradients accumulate across calls to ``backward`` until :func:`zero_grads`
(or ``Tensor.zero_grad``) clears them.  Intermediate tensors receive a
``grad`` too, which is how stage taps expose per-frame gradient norms.
"""

import contextlib
import struct

import numpy as np

from .errors import NumericError, ShapeError, TensorFormatError

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_ctx", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._ctx = None
        self.name = name

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t._ctx = None
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=DTYPE).reshape(np.shape(x) or (1,)))


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


class Function:
    """Base class of a recorded operation.

    Subclasses implement ``forward(*arrays, **kwargs) -> ndarray`` and
    ``backward(grad) -> tuple`` (one entry per input, ``None`` allowed).
    State needed by ``backward`` is stored on ``self``.
    """

    def __init__(self, inputs):
        self.inputs = inputs

    @classmethod
    def apply(cls, *inputs, **kwargs):
        inputs = tuple(as_tensor(x) for x in inputs)
        fn = cls(inputs)
        out = Tensor._wrap(fn.forward(*(t.data for t in inputs), **kwargs))
        if _grad_enabled and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._ctx = fn
        return out

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(root, grad=None):
    """Accumulate d(root)/d(t) into ``t.grad`` for every reachable tensor."""
    if grad is None:
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        grad = np.ones_like(root.data)
    else:
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != root.shape:
            raise ShapeError(f"seed grad shape {grad.shape} != root shape {root.shape}")
    if not root.requires_grad:
        return
    pending = {id(root): grad}
    for node in reversed(_topo_order(root)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._ctx is None:
            continue
        parent_grads = node._ctx.backward(g)
        for parent, pg in zip(node._ctx.inputs, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(
                    f"{type(node._ctx).__name__} produced grad {pg.shape} for input {parent.shape}"
                )
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} are not broadcast-compatible") from None


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of trailing-dimension broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


class Add(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        return unbroadcast(grad, a.shape), unbroadcast(grad, b.shape)


class Sub(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        return a - b

    def backward(self, grad):
        a, b = self.inputs
        return unbroadcast(grad, a.shape), unbroadcast(-grad, b.shape)


class Mul(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        return (
            unbroadcast(grad * b.data, a.shape) if a.requires_grad else None,
            unbroadcast(grad * a.data, b.shape) if b.requires_grad else None,
        )


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class Sigmoid(Function):
    def forward(self, x):
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self.out = out
        return out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Tanh(Function):
    def forward(self, x):
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out**2),)


def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def relu(x):
    return ReLU.apply(x)


def sigmoid(x):
    return Sigmoid.apply(x)


def tanh(x):
    return Tanh.apply(x)


_ELEMENTWISE = {"add": add, "mul": mul, "sub": sub, "relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def elementwise(op_kind, a, b=None):
    """Dispatch an elementwise op by name (``add``, ``mul``, ``relu``, ``sigmoid``...)."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    if op_kind in ("add", "mul", "sub"):
        if b is None:
            raise ShapeError(f"{op_kind} needs two operands")
        return fn(a, b)
    return fn(a)


# ------------------------------------------------------------------- softmax


def _check_finite(x, what):
    if np.isnan(x).any():
        raise NumericError(f"NaN input to {what}")


class Softmax(Function):
    def forward(self, x, axis):
        _check_finite(x, "softmax")
        self.axis = axis
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - (grad * s).sum(axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    def forward(self, x, axis):
        _check_finite(x, "log_softmax")
        self.axis = axis
        z = x - x.max(axis=axis, keepdims=True)
        out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
        self.out = out
        return out

    def backward(self, grad):
        s = np.exp(self.out)
        return (grad - s * grad.sum(axis=self.axis, keepdims=True),)


def softmax(x, axis=-1):
    return Softmax.apply(x, axis=axis)


def log_softmax(x, axis=-1):
    return LogSoftmax.apply(x, axis=axis)


# -------------------------------------------------------------- linear maps


class MatmulFC(Function):
    def forward(self, x, w, bias=None):
        if x.shape[-1] != w.shape[0] or w.ndim != 2:
            raise ShapeError(f"matmul_fc: x {x.shape} incompatible with w {w.shape}")
        if bias is not None and bias.shape != (w.shape[1],):
            raise ShapeError(f"matmul_fc: bias {bias.shape} should be ({w.shape[1]},)")
        out = x @ w
        if bias is not None:
            out = out + bias
        return out

    def backward(self, grad):
        x, w = self.inputs[0].data, self.inputs[1].data
        gx = grad @ w.T
        x2 = x.reshape(-1, x.shape[-1])
        g2 = grad.reshape(-1, grad.shape[-1])
        gw = x2.T @ g2
        if len(self.inputs) == 3:
            return gx, gw, g2.sum(axis=0)
        return gx, gw


def matmul_fc(x, w, bias=None):
    """Affine map ``x @ w + bias`` over the last axis of ``x``; ``w`` is (in, out)."""
    if bias is None:
        return MatmulFC.apply(x, w)
    return MatmulFC.apply(x, w, bias)


def _contract(spec, *arrays):
    """``np.einsum`` with a batched-matmul path for two operands (much faster for convs)."""
    if len(arrays) != 2:
        return np.einsum(spec, *arrays, optimize=True)
    ins, out = spec.split("->")
    sa, sb = ins.split(",")
    a, b = arrays
    # indices private to one operand and absent from the output are summed first
    keep_a = "".join(c for c in sa if c in sb or c in out)
    keep_b = "".join(c for c in sb if c in sa or c in out)
    if keep_a != sa:
        a = np.einsum(f"{sa}->{keep_a}", a)
        sa = keep_a
    if keep_b != sb:
        b = np.einsum(f"{sb}->{keep_b}", b)
        sb = keep_b
    dim = {c: n for s_, arr in ((sa, a), (sb, b)) for c, n in zip(s_, arr.shape)}
    batch = [c for c in sa if c in sb and c in out]
    contr = [c for c in sa if c in sb and c not in out]
    free_a = [c for c in sa if c not in sb]
    free_b = [c for c in sb if c not in sa]
    size = lambda idx: int(np.prod([dim[c] for c in idx], dtype=np.int64))
    am = a.transpose([sa.index(c) for c in batch + free_a + contr]).reshape(size(batch), size(free_a), size(contr))
    bm = b.transpose([sb.index(c) for c in batch + contr + free_b]).reshape(size(batch), size(contr), size(free_b))
    res = np.matmul(am, bm).reshape([dim[c] for c in batch + free_a + free_b])
    order = batch + free_a + free_b
    return res.transpose([order.index(c) for c in out])


class Einsum(Function):
    """Generic einsum with explicit output; each operand's subscripts are distinct."""

    def forward(self, *arrays, subscripts):
        ins, out = subscripts.replace(" ", "").split("->")
        self.ins = ins.split(",")
        self.out = out
        if len(self.ins) != len(arrays):
            raise ShapeError(f"einsum {subscripts!r} expects {len(self.ins)} operands")
        for s, a in zip(self.ins, arrays):
            if len(set(s)) != len(s) or len(s) != a.ndim:
                raise ShapeError(f"einsum operand {s!r} does not fit shape {a.shape}")
        try:
            return _contract(subscripts.replace(" ", ""), *arrays)
        except ValueError as exc:
            raise ShapeError(str(exc)) from None

    def backward(self, grad):
        grads = []
        for i, (s, t) in enumerate(zip(self.ins, self.inputs)):
            if not t.requires_grad:
                grads.append(None)
                continue
            others = [(self.ins[j], self.inputs[j].data) for j in range(len(self.ins)) if j != i]
            avail = set(self.out).union(*(set(o) for o, _ in others))
            kept = "".join(c for c in s if c in avail)
            spec = ",".join([self.out] + [o for o, _ in others]) + "->" + kept
            g = _contract(spec, grad, *(a for _, a in others))
            if kept != s:
                # indices summed away in this operand alone: gradient is constant along them
                shape = [t.shape[k] if c in kept else 1 for k, c in enumerate(s)]
                g = np.broadcast_to(g.reshape(shape), t.shape).copy()
            grads.append(g)
        return tuple(grads)


def einsum(subscripts, *operands):
    return Einsum.apply(*operands, subscripts=subscripts)


# ------------------------------------------------------------ reductions


class Sum(Function):
    def forward(self, x, axis, keepdims):
        if axis is not None:
            axis = (axis,) if np.isscalar(axis) else tuple(axis)
            axis = tuple(a % x.ndim for a in axis)
        self.axis = axis
        self.keepdims = keepdims
        out = np.asarray(x.sum(axis=axis, keepdims=keepdims))
        return out.reshape(1) if out.ndim == 0 else out

    def backward(self, grad):
        shape = self.inputs[0].shape
        if self.axis is None:
            kshape = [1] * len(shape)
        else:
            kshape = [1 if i in self.axis else n for i, n in enumerate(shape)]
        return (np.broadcast_to(grad.reshape(kshape), shape).copy(),)


def tsum(x, axis=None, keepdims=False):
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def global_avg_pool(x, axes):
    """Mean over ``axes`` keeping them as extent-1 dimensions."""
    if not axes:
        raise ShapeError("global_avg_pool needs at least one axis")
    x = as_tensor(x)
    axes = tuple(a % x.ndim for a in axes)
    return mean(x, axes, keepdims=True)


# ------------------------------------------------------------- shape ops


class Reshape(Function):
    def forward(self, x, shape):
        try:
            return x.reshape(shape)
        except ValueError as exc:
            raise ShapeError(str(exc)) from None

    def backward(self, grad):
        return (grad.reshape(self.inputs[0].shape),)


class Transpose(Function):
    def forward(self, x, axes):
        self.axes = axes
        return np.ascontiguousarray(x.transpose(axes))

    def backward(self, grad):
        return (grad.transpose(np.argsort(self.axes)),)


class Stack(Function):
    def forward(self, *arrays, axis):
        self.axis = axis
        return np.stack(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.take(grad, i, axis=self.axis) for i in range(len(self.inputs)))


class Concat(Function):
    def forward(self, *arrays, axis):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class Slice(Function):
    def forward(self, x, index):
        self.index = index
        return np.array(x[index])

    def backward(self, grad):
        g = np.zeros(self.inputs[0].shape)
        g[self.index] = grad
        return (g,)


def reshape(x, shape):
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x, axes):
    return Transpose.apply(x, axes=tuple(axes))


def stack(tensors, axis=0):
    return Stack.apply(*tensors, axis=axis)


def concat(tensors, axis=-1):
    return Concat.apply(*tensors, axis=axis)


def take(x, index):
    """Basic-index slice ``x[index]`` (no fancy indexing)."""
    return Slice.apply(x, index=index)


# ------------------------------------------------------ windows and pooling


def _unfold_dims(shape, kernel, stride, padding):
    out = []
    for n, k, s, p in zip(shape, kernel, stride, padding):
        m = (n + 2 * p - k) // s + 1
        if m < 1:
            raise ShapeError(f"window {k} with padding {p} does not fit extent {n}")
        out.append(m)
    return tuple(out)


class Unfold3d(Function):
    """Sliding (k_t, k_h, k_w) neighbourhoods of a C x T x H x W map.

    Output is C x K x T' x H' x W' with K = k_t*k_h*k_w in row-major offset
    order; zero padding is applied symmetrically.
    """

    def forward(self, x, kernel, stride, padding):
        if x.ndim != 4:
            raise ShapeError(f"unfold expects C x T x H x W, got {x.shape}")
        self.kernel, self.stride, self.padding = kernel, stride, padding
        dims = _unfold_dims(x.shape[1:], kernel, stride, padding)
        self.dims = dims
        pt, ph, pw = padding
        xp = np.pad(x, ((0, 0), (pt, pt), (ph, ph), (pw, pw))) if any(padding) else x
        self.padded_shape = xp.shape
        kt, kh, kw = kernel
        st, sh, sw = stride
        T, H, W = dims
        out = np.empty((x.shape[0], kt, kh, kw, T, H, W))
        for a in range(kt):
            for b in range(kh):
                for c in range(kw):
                    out[:, a, b, c] = xp[
                        :,
                        a : a + st * (T - 1) + 1 : st,
                        b : b + sh * (H - 1) + 1 : sh,
                        c : c + sw * (W - 1) + 1 : sw,
                    ]
        return out.reshape(x.shape[0], kt * kh * kw, T, H, W)

    def backward(self, grad):
        kt, kh, kw = self.kernel
        st, sh, sw = self.stride
        T, H, W = self.dims
        g = grad.reshape(grad.shape[0], kt, kh, kw, T, H, W)
        gp = np.zeros(self.padded_shape)
        for a in range(kt):
            for b in range(kh):
                for c in range(kw):
                    gp[
                        :,
                        a : a + st * (T - 1) + 1 : st,
                        b : b + sh * (H - 1) + 1 : sh,
                        c : c + sw * (W - 1) + 1 : sw,
                    ] += g[:, a, b, c]
        pt, ph, pw = self.padding
        _, Tp, Hp, Wp = self.padded_shape
        return (gp[:, pt : Tp - pt, ph : Hp - ph, pw : Wp - pw],)


def unfold3d(x, kernel, stride=(1, 1, 1), padding=(0, 0, 0)):
    return Unfold3d.apply(x, kernel=tuple(kernel), stride=tuple(stride), padding=tuple(padding))


class MaxPoolTime(Function):
    """Non-overlapping max pooling along axis 0 with window = stride = k."""

    def forward(self, x, k):
        n = x.shape[0] // k
        if n < 1:
            raise ShapeError(f"cannot pool {x.shape[0]} frames with window {k}")
        self.k, self.n = k, n
        blocks = x[: n * k].reshape((n, k) + x.shape[1:])
        self.arg = blocks.argmax(axis=1)
        return np.take_along_axis(blocks, self.arg[:, None], axis=1)[:, 0]

    def backward(self, grad):
        x = self.inputs[0]
        g = np.zeros((self.n, self.k) + x.shape[1:])
        np.put_along_axis(g, self.arg[:, None], grad[:, None], axis=1)
        full = np.zeros(x.shape)
        full[: self.n * self.k] = g.reshape((self.n * self.k,) + x.shape[1:])
        return (full,)


def max_pool_time(x, k=2):
    return MaxPoolTime.apply(x, k=k)


# ------------------------------------------------------------ recurrence


class RnnTanh(Function):
    """Elman recurrence h_t = tanh(x_t Wx + h_{t-1} Wh + b) over a T x D sequence."""

    def forward(self, x, wx, wh, b, reverse):
        self.reverse = reverse
        T = x.shape[0]
        H = wh.shape[0]
        pre_in = x @ wx + b
        hs = np.zeros((T, H))
        h = np.zeros(H)
        steps = range(T - 1, -1, -1) if reverse else range(T)
        for t in steps:
            h = np.tanh(pre_in[t] + h @ wh)
            hs[t] = h
        self.hs = hs
        return hs

    def backward(self, grad):
        x, wx, wh, _ = (t.data for t in self.inputs)
        T, H = self.hs.shape
        dpre = np.zeros((T, H))
        carry = np.zeros(H)
        steps = range(T) if self.reverse else range(T - 1, -1, -1)
        for t in steps:
            dh = grad[t] + carry
            dpre[t] = dh * (1.0 - self.hs[t] ** 2)
            carry = dpre[t] @ wh.T
        prev = np.zeros((T, H))
        if self.reverse:
            prev[:-1] = self.hs[1:]
        else:
            prev[1:] = self.hs[:-1]
        return dpre @ wx.T, x.T @ dpre, prev.T @ dpre, dpre.sum(axis=0)


def rnn_tanh(x, wx, wh, b, reverse=False):
    return RnnTanh.apply(x, wx, wh, b, reverse=reverse)


# ------------------------------------------------------------- batch norm


class BnState:
    """Trainable affine parameters plus running statistics of one BatchNorm."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, name="bn"):
        self.gamma = parameter(np.ones(channels), name=f"{name}.gamma")
        self.beta = parameter(np.zeros(channels), name=f"{name}.beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps


class BatchNormFn(Function):
    def forward(self, x, gamma, beta, axis, state, training):
        from .errors import DegenerateBatchError

        axis = axis % x.ndim
        self.red = tuple(i for i in range(x.ndim) if i != axis)
        bshape = [1] * x.ndim
        bshape[axis] = x.shape[axis]
        self.bshape = bshape
        if training:
            n = x.size // x.shape[axis]
            if n < 2:
                raise DegenerateBatchError(f"BatchNorm needs >= 2 values per channel, got {n}")
            mu = x.mean(axis=self.red)
            var = x.var(axis=self.red)
            m = state.momentum
            state.running_mean = (1 - m) * state.running_mean + m * mu
            state.running_var = (1 - m) * state.running_var + m * var * n / (n - 1)
            self.n = n
        else:
            mu, var = state.running_mean, state.running_var
        self.training = training
        self.inv_std = 1.0 / np.sqrt(var + state.eps)
        self.xhat = (x - mu.reshape(bshape)) * self.inv_std.reshape(bshape)
        return self.xhat * gamma.reshape(bshape) + beta.reshape(bshape)

    def backward(self, grad):
        gamma = self.inputs[1].data.reshape(self.bshape)
        inv = self.inv_std.reshape(self.bshape)
        dgamma = (grad * self.xhat).sum(axis=self.red)
        dbeta = grad.sum(axis=self.red)
        dxhat = grad * gamma
        if self.training:
            n = self.n
            dx = (inv / n) * (
                n * dxhat
                - dxhat.sum(axis=self.red, keepdims=True)
                - self.xhat * (dxhat * self.xhat).sum(axis=self.red, keepdims=True)
            )
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta


def batch_norm(x, state, training, axis=-1):
    """Normalise every channel along ``axis`` over all other axes."""
    return BatchNormFn.apply(x, state.gamma, state.beta, axis=axis, state=state, training=training)


# --------------------------------------------------------- serialization

_MAGIC = b"DCT1"


def dump_tensor(array, fh):
    """Write one tensor: magic, u8 rank, u32 LE extents, f32 LE payload."""
    arr = np.asarray(array.data if isinstance(array, Tensor) else array)
    if arr.ndim > 255:
        raise ShapeError("rank exceeds 255")
    fh.write(_MAGIC)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(fh):
    """Read one tensor written by :func:`dump_tensor` as float64."""
    magic = fh.read(4)
    if magic != _MAGIC:
        raise TensorFormatError(f"bad tensor header {magic!r}")
    (rank,) = struct.unpack("<B", fh.read(1))
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = int(np.prod(shape)) if rank else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise TensorFormatError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f4").astype(DTYPE).reshape(shape)


def save_tensor(path, array):
    with open(path, "wb") as fh:
        dump_tensor(array, fh)


def load_tensor(path):
    with open(path, "rb") as fh:
        return read_tensor(fh)
