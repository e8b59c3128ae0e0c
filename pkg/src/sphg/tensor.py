"""Dense tensors with reverse-mode automatic differentiation.

Only the operator set the hourglass network needs is provided: elementwise
arithmetic, reductions, dilated "same" convolution, 2x2 max pooling, nearest
2x upsampling, dense layers and the three activations. Data lives in numpy
arrays; float64 is used by the tests and float32 for training.

Every differentiable op records a closure that maps the output gradient to a
tuple of input gradients. ``Tensor.backward`` walks the recorded graph in
reverse topological order and accumulates ``.grad`` on leaves.
"""

import contextlib

import numpy as np

from .errors import ConfigError, NumericError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def single_threaded():
    """Pin BLAS to one thread so reductions run in a fixed order."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype.kind in "biu":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return len(self.data)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ConfigError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                check_finite(g, f"gradient of {node.name or 'leaf'}")
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar ---------------------------------------------------
    def _lift(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, self._lift(other))

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _make(data, parents, backward):
    """Wrap an op result, recording the graph only when it is needed."""
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data, name=None):
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic -------------------------------------------------
def add(a, b):
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def div(a, b):
    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(a.data / b.data, (a, b), backward)


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(a.data ** exponent, (a,), backward)


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tabs(a):
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


# -- shape and reductions ---------------------------------------------------
def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def index(a, idx):
    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), backward)


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors, axis=0):
    tensors = list(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


# -- activations --------------------------------------------------------------
def relu(a):
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax_lastdim(a):
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), backward)


# -- layers -------------------------------------------------------------------
def dense(x, weight, bias=None):
    """Affine map ``x @ weight.T + bias`` over the last axis of a 2-D input."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ConfigError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ConfigError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    check_finite(out, "dense output")

    def backward(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


def same_padding(k, dilation):
    if k % 2 != 1:
        raise ConfigError(f"kernel size must be odd, got {k}")
    return dilation * (k - 1) // 2


def receptive_field(k, dilation):
    return k + (k - 1) * (dilation - 1)


def conv2d(x, weight, bias=None, dilation=1, stride=1):
    """Zero-padded "same" 2-D convolution (cross-correlation) in NCHW layout.

    Implemented as im2col followed by one matrix product. With stride 1 the
    output has the input's spatial size for every dilation.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    B, C, H, W = x.shape
    O, Ci, kh, kw = weight.shape
    if Ci != C:
        raise ConfigError(f"conv2d: input has {C} channels, kernel expects {Ci}")
    if kh != kw:
        raise ConfigError("conv2d: only square kernels are supported")
    if bias is not None and bias.shape != (O,):
        raise ConfigError(f"conv2d: bias {bias.shape} does not match {O} output channels")
    if dilation < 1 or stride < 1:
        raise ConfigError("conv2d: dilation and stride must be positive")
    k = kh
    p = same_padding(k, dilation)
    Ho = (H - 1) // stride + 1
    Wo = (W - 1) // stride + 1

    xt = x.data.transpose(1, 0, 2, 3)
    if p:
        xp = np.zeros((C, B, H + 2 * p, W + 2 * p), dtype=x.dtype)
        xp[:, :, p:p + H, p:p + W] = xt
    else:
        xp = xt
    cols = np.empty((k, k, C, B, Ho, Wo), dtype=x.dtype)
    span_h = stride * (Ho - 1) + 1
    span_w = stride * (Wo - 1) + 1
    for i in range(k):
        for j in range(k):
            r0, c0 = i * dilation, j * dilation
            cols[i, j] = xp[:, :, r0:r0 + span_h:stride, c0:c0 + span_w:stride]
    cols = cols.reshape(k * k * C, B * Ho * Wo)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(O, k * k * C)
    out = (wmat @ cols).reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data.reshape(1, O, 1, 1)
    check_finite(out, "conv2d output")

    def backward(g):
        gm = g.transpose(1, 0, 2, 3).reshape(O, B * Ho * Wo)
        gw = (gm @ cols.T).reshape(O, k, k, C).transpose(0, 3, 1, 2)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gm).reshape(k, k, C, B, Ho, Wo)
            gxp = np.zeros((C, B, H + 2 * p, W + 2 * p), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    r0, c0 = i * dilation, j * dilation
                    gxp[:, :, r0:r0 + span_h:stride, c0:c0 + span_w:stride] += gcols[i, j]
            gx = np.ascontiguousarray(gxp[:, :, p:p + H, p:p + W].transpose(1, 0, 2, 3))
        return gx, np.ascontiguousarray(gw), gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


def maxpool2x2(x):
    """2x2 max pooling; gradient goes to the first maximum in row-major order."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ConfigError(f"maxpool2x2 needs even spatial dims, got {H}x{W}")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(B, C, H // 2, W // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((B, C, H // 2, W // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(B, C, H, W),)

    return _make(out, (x,), backward)


def upsample_nearest2x(x):
    B, C, H, W = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (B, C, H, 2, W, 2))
    out = out.reshape(B, C, 2 * H, 2 * W)

    def backward(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), backward)


# -- gradient checking -------------------------------------------------------
def finite_diff_check(fn, inputs, eps=1e-5, seed=0):
    """Largest relative error between backprop and central differences.

    ``fn`` takes the input tensors and returns a tensor; non-scalar outputs
    are reduced with a fixed random projection so that structurally zero
    gradients (e.g. the sum of a softmax) do not hide errors.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = [Tensor(np.array(t.data, dtype=np.float64), requires_grad=True) for t in inputs]
    probe = fn(*inputs)
    proj = None
    if probe.data.size != 1:
        proj = np.random.default_rng(seed).standard_normal(probe.shape)

    def scalar(out):
        return out if proj is None else tsum(out * Tensor(proj))

    scalar(probe).backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    worst = 0.0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = scalar(fn(*inputs)).item()
                flat[i] = orig - eps
                fm = scalar(fn(*inputs)).item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                err = abs(gflat[i] - num) / (abs(gflat[i]) + abs(num) + 1e-12)
                worst = max(worst, err)
    return worst
