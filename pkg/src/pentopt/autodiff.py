"""Minimal reverse-mode automatic differentiation on numpy arrays.

Supports exactly the operator set the predictor network and the evaluator
losses need: dense/convolution layers, PReLU, sigmoid, pooling, elementwise
math and reductions, plus a hook for custom differentiable nodes (used to
splice the FEM compliance solve into the tape with its analytic gradient).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class TrainingError(RuntimeError):
    """Raised when an update step encounters non-finite gradients."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    grad = np.asarray(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Array node of the computation graph."""

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def zero_grad(self):
        self.grad = None

    # -- graph construction helpers -----------------------------------------

    @staticmethod
    def _make(data, parents, backward) -> "Tensor":
        out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        if not isinstance(other, Tensor):
            # python scalars stay weakly typed so fp32 graphs remain fp32
            def backward_const(g):
                _accumulate(self, _unbroadcast(g, self.shape))

            return Tensor._make(self.data + other, (self,), backward_const)

        def backward(g):
            _accumulate(self, _unbroadcast(g, self.shape))
            _accumulate(other, _unbroadcast(g, other.shape))

        return Tensor._make(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            _accumulate(self, -g)

        return Tensor._make(-self.data, (self,), backward)

    def __sub__(self, other):
        if not isinstance(other, Tensor):
            return self + (-other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Tensor):
            const = other

            def backward_const(g):
                _accumulate(self, _unbroadcast(g * const, self.shape))

            return Tensor._make(self.data * const, (self,), backward_const)

        def backward(g):
            _accumulate(self, _unbroadcast(g * other.data, self.shape))
            _accumulate(other, _unbroadcast(g * self.data, other.shape))

        return Tensor._make(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other ** -1.0
        return self * (1.0 / other)

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        x = self.data

        def backward(g):
            _accumulate(self, g * exponent * x ** (exponent - 1))

        return Tensor._make(x ** exponent, (self,), backward)

    def __matmul__(self, other):
        other = as_tensor(other)

        def backward(g):
            _accumulate(self, g @ other.data.T)
            _accumulate(other, self.data.T @ g)

        return Tensor._make(self.data @ other.data, (self, other), backward)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape

        def backward(g):
            _accumulate(self, g.reshape(old))

        return Tensor._make(self.data.reshape(shape), (self,), backward)

    def transpose(self, axes: Sequence[int]):
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))

        def backward(g):
            _accumulate(self, g.transpose(inv))

        return Tensor._make(self.data.transpose(axes), (self,), backward)

    def astype(self, dtype):
        src = self.data.dtype

        def backward(g):
            _accumulate(self, g.astype(src))

        return Tensor._make(self.data.astype(dtype), (self,), backward)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None):
        shape = self.data.shape

        def backward(g):
            if axis is None:
                _accumulate(self, np.broadcast_to(g, shape).copy())
            else:
                _accumulate(self, np.broadcast_to(np.expand_dims(g, axis), shape).copy())

        return Tensor._make(self.data.sum(axis=axis), (self,), backward)

    def mean(self, axis=None):
        if axis is None:
            n = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            n = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis) * (1.0 / n)

    # -- elementwise nonlinearities ------------------------------------------

    def abs(self):
        sign = np.sign(self.data)

        def backward(g):
            _accumulate(self, g * sign)

        return Tensor._make(np.abs(self.data), (self,), backward)

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g):
            _accumulate(self, g * out_data)

        return Tensor._make(out_data, (self,), backward)

    def log(self):
        def backward(g):
            _accumulate(self, g / self.data)

        return Tensor._make(np.log(self.data), (self,), backward)

    def sigmoid(self):
        out_data = 1.0 / (1.0 + np.exp(-self.data))

        def backward(g):
            _accumulate(self, g * out_data * (1.0 - out_data))

        return Tensor._make(out_data, (self,), backward)

    def clamp(self, lo: float, hi: float):
        """Clip into [lo, hi]; gradient passes through only inside the bounds."""
        inside = (self.data >= lo) & (self.data <= hi)

        def backward(g):
            _accumulate(self, g * inside)

        return Tensor._make(np.clip(self.data, lo, hi), (self,), backward)

    # -- backward pass --------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar objective")
        if self._backward is None and not self.requires_grad:
            raise RuntimeError("backward() on a tensor with no recorded graph")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = np.array(g)
    else:
        t.grad = t.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


# -- functional API (dispatches to numpy for plain arrays) --------------------


def exp(x):
    return x.exp() if isinstance(x, Tensor) else np.exp(x)


def absolute(x):
    return x.abs() if isinstance(x, Tensor) else np.abs(x)


def mean(x, axis=None):
    return x.mean(axis=axis) if isinstance(x, Tensor) else np.mean(x, axis=axis)


def sigmoid(x):
    if isinstance(x, Tensor):
        return x.sigmoid()
    return 1.0 / (1.0 + np.exp(-x))


def prelu(x: Tensor, alpha: Tensor):
    """PReLU: z for z >= 0, alpha*z otherwise; alpha may be trainable."""
    if not isinstance(x, Tensor):
        return np.where(x >= 0, x, np.asarray(alpha) * x)
    neg = np.minimum(x.data, 0.0)
    pos = np.maximum(x.data, 0.0)
    mask = x.data < 0

    def backward(g):
        _accumulate(x, g * np.where(mask, np.asarray(alpha.data), 1.0))
        _accumulate(alpha, _unbroadcast(g * neg, alpha.shape))

    return Tensor._make(pos + np.asarray(alpha.data) * neg, (x, alpha), backward)


def conv2d(x: Tensor, kernel: Tensor, padding: str = "same"):
    """2-D convolution (cross-correlation) on NHWC input.

    kernel shape: (kh, kw, c_in, c_out); padding 'same' or 'valid'.
    """
    kh, kw = kernel.shape[0], kernel.shape[1]
    if padding == "same":
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"conv2d expects NHWC input, got shape {xd.shape}")
    if xd.shape[3] != kernel.shape[2]:
        raise ValueError(
            f"input has {xd.shape[3]} channels, kernel expects {kernel.shape[2]}"
        )
    n, h, w, _ = xd.shape
    oh, ow = h + 2 * ph - kh + 1, w + 2 * pw - kw + 1
    if oh < 1 or ow < 1:
        raise ValueError("input smaller than kernel")
    xp = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if ph or pw else xd
    kd = kernel.data
    out = np.zeros((n, oh, ow, kd.shape[3]), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i : i + oh, j : j + ow, :] @ kd[i, j]

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gx[:, i : i + oh, j : j + ow, :] += g @ kd[i, j].T
            if ph or pw:
                gx = gx[:, ph : ph + h, pw : pw + w, :]
            _accumulate(x, gx)
        if kernel.requires_grad:
            gk = np.empty_like(kd)
            for i in range(kh):
                for j in range(kw):
                    gk[i, j] = np.tensordot(
                        xp[:, i : i + oh, j : j + ow, :], g, axes=([0, 1, 2], [0, 1, 2])
                    )
            _accumulate(kernel, gk)

    return Tensor._make(out, (x, kernel), backward)


def avg_pool2d(x: Tensor, k: int = 2):
    """Average pooling with a k x k window and stride k on NHWC input."""
    n, h, w, c = x.data.shape
    if h % k or w % k:
        raise ValueError(f"spatial dims {(h, w)} not divisible by pool size {k}")
    out = x.data.reshape(n, h // k, k, w // k, k, c).mean(axis=(2, 4))

    def backward(g):
        gx = np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k)
        _accumulate(x, gx)

    return Tensor._make(out, (x,), backward)


def upsample_nearest2d(x: Tensor, k: int = 2):
    """Nearest-neighbor upsampling by integer factor k on NHWC input."""
    out = np.repeat(np.repeat(x.data, k, axis=1), k, axis=2)
    n, h, w, c = x.data.shape

    def backward(g):
        gx = g.reshape(n, h, k, w, k, c).sum(axis=(2, 4))
        _accumulate(x, gx)

    return Tensor._make(out, (x,), backward)


def sigmoid_with_mean(pre: Tensor, target_mean: np.ndarray,
                      t_bound: float = 60.0, iters: int = 60) -> Tensor:
    """sigmoid(pre + t) with t chosen per row so each row's mean hits a target.

    The shift t solving mean_j sigmoid(pre_ij + t_i) = target_i exists and is
    unique (the mean is strictly increasing in t); it is found by bisection.
    The backward pass uses the exact implicit-function gradient:
    dout_i/dpre_j = s'_i (delta_ij - s'_j / sum_k s'_k) with s' = out(1 - out).
    """
    p = pre.data.astype(np.float64)
    target = np.asarray(target_mean, dtype=np.float64).reshape(-1, 1)
    lo = np.full((p.shape[0], 1), -t_bound)
    hi = np.full((p.shape[0], 1), t_bound)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        mean = (1.0 / (1.0 + np.exp(-(p + mid)))).mean(axis=1, keepdims=True)
        lo = np.where(mean < target, mid, lo)
        hi = np.where(mean < target, hi, mid)
    t = 0.5 * (lo + hi)
    out64 = 1.0 / (1.0 + np.exp(-(p + t)))
    out = out64.astype(pre.data.dtype)

    def vjp(g):
        sp = out64 * (1.0 - out64)
        denom = np.maximum(sp.sum(axis=1, keepdims=True), 1e-30)
        gs = g.astype(np.float64) * sp
        grad = gs - sp * (gs.sum(axis=1, keepdims=True) / denom)
        return (grad.astype(pre.data.dtype),)

    return custom_node((pre,), out, vjp)


def custom_node(
    inputs: Sequence[Tensor],
    value: np.ndarray,
    vjp: Callable[[np.ndarray], Sequence[np.ndarray]],
) -> Tensor:
    """Splice an externally computed value with a known vector-Jacobian product.

    `vjp(g)` must return one cotangent per input, in order.
    """
    inputs = tuple(inputs)

    def backward(g):
        for t, gi in zip(inputs, vjp(g)):
            if gi is not None:
                _accumulate(t, gi)

    return Tensor._make(value, inputs, backward)


# -- layers -------------------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Dense:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 name: str, dtype="float32"):
        self.w = Tensor(glorot_uniform(rng, (n_in, n_out), n_in, n_out, dtype),
                        requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True,
                        name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.w.shape[0]:
            raise ValueError(
                f"{self.w.name}: input has {x.shape[-1]} features, "
                f"layer expects {self.w.shape[0]}"
            )
        return x @ self.w + self.b

    def parameters(self):
        return [self.w, self.b]


class PReLU:
    """PReLU activation with one trainable slope per layer."""

    def __init__(self, name: str, init: float = 0.25, dtype="float32"):
        self.alpha = Tensor(np.asarray(init, dtype=dtype), requires_grad=True,
                            name=f"{name}.alpha")

    def __call__(self, x: Tensor) -> Tensor:
        return prelu(x, self.alpha)

    def parameters(self):
        return [self.alpha]


class Conv2D:
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 name: str, padding: str = "same", dtype="float32"):
        fan_in, fan_out = k * k * c_in, k * k * c_out
        self.kernel = Tensor(
            glorot_uniform(rng, (k, k, c_in, c_out), fan_in, fan_out, dtype),
            requires_grad=True, name=f"{name}.kernel")
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True,
                           name=f"{name}.bias")
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel, padding=self.padding) + self.bias

    def parameters(self):
        return [self.kernel, self.bias]


class ResNetBlock:
    """Two convolutions with an additive shortcut.

    A 1x1 projection is inserted on the shortcut only when the channel
    counts differ.
    """

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 name: str, dtype="float32"):
        self.conv1 = Conv2D(c_in, c_out, k, rng, f"{name}.conv1", dtype=dtype)
        self.act = PReLU(f"{name}.act", dtype=dtype)
        self.conv2 = Conv2D(c_out, c_out, k, rng, f"{name}.conv2", dtype=dtype)
        self.project = (
            Conv2D(c_in, c_out, 1, rng, f"{name}.project", dtype=dtype)
            if c_in != c_out else None
        )

    def __call__(self, x: Tensor) -> Tensor:
        branch = self.conv2(self.act(self.conv1(x)))
        shortcut = self.project(x) if self.project is not None else x
        return branch + shortcut

    def parameters(self):
        params = self.conv1.parameters() + self.act.parameters() + self.conv2.parameters()
        if self.project is not None:
            params += self.project.parameters()
        return params


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-2,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for {p.name or i}")
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data = p.data - (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(
                p.data.dtype
            )

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": [m.copy() for m in self.m],
            "v": [v.copy() for v in self.v],
        }

    def load_state_dict(self, state: dict):
        if len(state["m"]) != len(self.params) or len(state["v"]) != len(self.params):
            raise ValueError("optimizer state does not match parameter list")
        self.t = int(state["t"])
        self.m = [np.asarray(m) for m in state["m"]]
        self.v = [np.asarray(v) for v in state["v"]]
