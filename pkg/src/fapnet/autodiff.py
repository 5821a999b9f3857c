"""Minimal reverse-mode autodiff on numpy, sized for a ~0.3M-param model.

A `Tensor` wraps an ndarray and remembers its parents plus vector-Jacobian
closures; `backward()` walks an iterative topological order, so deep
recurrent graphs don't hit the recursion limit. Training math runs at
float32; gradient checking builds the same graphs at float64. All
reductions use numpy's sequential order, so identical inputs give
bit-identical outputs.

Also here: the dense/recurrent building blocks (Linear, MlpBlock,
AttentionPool, LSTM cells, BiLSTM), AdamW with decoupled weight decay, a
central-finite-difference gradient checker, and the checkpoint format
(one JSON header line, then raw little-endian float32 payloads in header
order).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_GRAD_ENABLED = [True]


class no_grad:
    """Context manager: skip graph construction inside (inference mode)."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Array node in the autodiff graph.

    `parents` holds (parent, vjp) pairs; vjp maps the output gradient to
    that parent's gradient contribution. Leaf tensors (no parents) with
    requires_grad accumulate into `.grad` during backward.
    """

    __slots__ = ("values", "requires_grad", "grad", "parents")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.parents: tuple = ()

    # -- construction -----------------------------------------------------

    @staticmethod
    def _from_op(values: np.ndarray, parents) -> "Tensor":
        out = Tensor(values)
        if _GRAD_ENABLED[0]:
            kept = tuple((p, vjp) for p, vjp in parents if p.requires_grad)
            if kept:
                out.parents = kept
                out.requires_grad = True
        return out

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        # python scalars keep the array dtype; explicit arrays keep their own
        if isinstance(other, (int, float)):
            return Tensor(np.asarray(other, dtype=self.values.dtype))
        return Tensor(np.asarray(other))

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = self._lift(other)
        out = Tensor._from_op(
            self.values + other.values,
            [
                (self, lambda g: _unbroadcast(g, self.shape)),
                (other, lambda g: _unbroadcast(g, other.shape)),
            ],
        )
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        return Tensor._from_op(
            self.values - other.values,
            [
                (self, lambda g: _unbroadcast(g, self.shape)),
                (other, lambda g: _unbroadcast(-g, other.shape)),
            ],
        )

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        return Tensor._from_op(
            self.values * other.values,
            [
                (self, lambda g: _unbroadcast(g * other.values, self.shape)),
                (other, lambda g: _unbroadcast(g * self.values, other.shape)),
            ],
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        return Tensor._from_op(
            self.values / other.values,
            [
                (self, lambda g: _unbroadcast(g / other.values, self.shape)),
                (
                    other,
                    lambda g: _unbroadcast(
                        -g * self.values / (other.values * other.values), other.shape
                    ),
                ),
            ],
        )

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __neg__(self):
        return Tensor._from_op(-self.values, [(self, lambda g: -g)])

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        e = float(exponent)
        return Tensor._from_op(
            self.values**e,
            [(self, lambda g: g * e * self.values ** (e - 1.0))],
        )

    def __matmul__(self, other):
        """(..., D) @ (D, E); the right operand must be 2-D."""
        other = self._lift(other)
        if other.ndim != 2:
            raise ValueError(f"matmul rhs must be 2-D, got shape {other.shape}")
        if self.shape[-1] != other.shape[0]:
            raise ValueError(f"matmul shape mismatch: {self.shape} @ {other.shape}")
        a, b = self.values, other.values

        def vjp_b(g):
            return a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])

        return Tensor._from_op(
            a @ b, [(self, lambda g: g @ b.T), (other, vjp_b)]
        )

    # -- elementwise nonlinearities ----------------------------------------

    def exp(self):
        y = np.exp(self.values)
        return Tensor._from_op(y, [(self, lambda g: g * y)])

    def log(self):
        return Tensor._from_op(
            np.log(self.values), [(self, lambda g: g / self.values)]
        )

    def sqrt(self):
        y = np.sqrt(self.values)
        return Tensor._from_op(y, [(self, lambda g: g / (2.0 * y))])

    def tanh(self):
        y = np.tanh(self.values)
        return Tensor._from_op(y, [(self, lambda g: g * (1.0 - y * y))])

    def sigmoid(self):
        x = self.values
        # two-branch form avoids exp overflow for large |x|
        pos = 1.0 / (1.0 + np.exp(-np.maximum(x, 0.0)))
        neg = np.exp(np.minimum(x, 0.0))
        y = np.where(x >= 0, pos, neg / (1.0 + neg)).astype(x.dtype, copy=False)
        return Tensor._from_op(y, [(self, lambda g: g * y * (1.0 - y))])

    def relu(self):
        mask = self.values > 0
        return Tensor._from_op(
            np.where(mask, self.values, 0.0).astype(self.values.dtype, copy=False),
            [(self, lambda g: g * mask)],
        )

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._from_op(
            self.values.reshape(shape), [(self, lambda g: g.reshape(old))]
        )

    def transpose(self, axes: tuple[int, ...]):
        inverse = tuple(np.argsort(axes))
        return Tensor._from_op(
            self.values.transpose(axes), [(self, lambda g: g.transpose(inverse))]
        )

    def __getitem__(self, key):
        def vjp(g):
            gx = np.zeros_like(self.values)
            np.add.at(gx, key, g)  # add.at handles repeated advanced indices
            return gx

        return Tensor._from_op(self.values[key], [(self, vjp)])

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()

        return Tensor._from_op(self.values.sum(axis=axis, keepdims=keepdims), [(self, vjp)])

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.values.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for ax in axes:
                n *= self.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    # -- backward ----------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from this tensor; accumulates into leaf .grad."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that requires no grad")
        if grad is None:
            if self.values.size != 1:
                raise RuntimeError("backward() without a gradient needs a scalar")
            grad = np.ones_like(self.values)

        # iterative DFS post-order: parents precede children in `order`
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node.parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, vjp in node.parents:
                pg = vjp(g)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


class Parameter(Tensor):
    """Trainable leaf tensor with AdamW state (lazily allocated)."""

    __slots__ = ("m", "v", "step_count")

    def __init__(self, values):
        super().__init__(np.asarray(values), requires_grad=True)
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None
        self.step_count = 0


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; the shift by max is gradient-free."""
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return p * (g - (g * p).sum(axis=axis, keepdims=True))

    return Tensor._from_op(p.astype(x.dtype, copy=False), [(x, vjp)])


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    values = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]

        return vjp

    return Tensor._from_op(values, [(t, make_vjp(i)) for i, t in enumerate(tensors)])


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    values = np.stack([t.values for t in tensors], axis=axis)

    def make_vjp(i):
        return lambda g: np.take(g, i, axis=axis)

    return Tensor._from_op(values, [(t, make_vjp(i)) for i, t in enumerate(tensors)])


# -- layers ------------------------------------------------------------------


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear:
    """y = x @ W + b over the last axis; W is (d_in, d_out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        self.d_in, self.d_out = d_in, d_out
        self.weight = Parameter(_uniform(rng, (d_in, d_out), d_in, dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ValueError(f"linear expects last dim {self.d_in}, got {x.shape}")
        return x @ self.weight + self.bias

    def params(self) -> list[tuple[str, Parameter]]:
        return [("weight", self.weight), ("bias", self.bias)]


_ACTIVATIONS = {
    "relu": Tensor.relu,
    "tanh": Tensor.tanh,
    "sigmoid": Tensor.sigmoid,
}


class MlpBlock:
    """Stacked linear+activation layers with a residual connection.

    The block input is added to the stack output; when the widths differ
    the input first passes through a learned linear projection.
    """

    def __init__(
        self,
        dims: list[int],
        rng: np.random.Generator,
        activation: str = "relu",
        dtype=np.float32,
    ):
        if len(dims) < 2:
            raise ValueError("dims must list at least input and output widths")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.layers = [
            Linear(dims[i], dims[i + 1], rng, dtype) for i in range(len(dims) - 1)
        ]
        self.proj = None
        if dims[0] != dims[-1]:
            self.proj = Linear(dims[0], dims[-1], rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        act = _ACTIVATIONS[self.activation]
        h = x
        for layer in self.layers:
            h = act(layer(h))
        skip = self.proj(x) if self.proj is not None else x
        return h + skip

    def params(self) -> list[tuple[str, Parameter]]:
        out = []
        for i, layer in enumerate(self.layers):
            out += [(f"layers.{i}.{n}", p) for n, p in layer.params()]
        if self.proj is not None:
            out += [(f"proj.{n}", p) for n, p in self.proj.params()]
        return out


class AttentionPool:
    """Score each group member with a learned scalar, softmax, average.

    Input (..., K, D) -> output (..., D): convex combination of members,
    so identical members pass through unchanged.
    """

    def __init__(self, d: int, rng: np.random.Generator, dtype=np.float32):
        self.scorer = Linear(d, 1, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        scores = self.scorer(x)  # (..., K, 1)
        weights = softmax(scores.reshape(scores.shape[:-1]), axis=-1)  # (..., K)
        return (x * weights.reshape(weights.shape + (1,))).sum(axis=-2)

    def params(self) -> list[tuple[str, Parameter]]:
        return [(f"scorer.{n}", p) for n, p in self.scorer.params()]


class LstmParams:
    """Fused LSTM cell parameters, gate order (input, forget, cell, output).

    w_x is (D, 4H), w_h is (H, 4H), bias is (4H,) with the forget slice
    initialized to 1 (the standard small-data stabilizer).
    """

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.d_in, self.hidden = d_in, hidden
        self.w_x = Parameter(_uniform(rng, (d_in, 4 * hidden), d_in, dtype))
        self.w_h = Parameter(_uniform(rng, (hidden, 4 * hidden), hidden, dtype))
        bias = np.zeros(4 * hidden, dtype=dtype)
        bias[hidden : 2 * hidden] = 1.0
        self.bias = Parameter(bias)

    def params(self) -> list[tuple[str, Parameter]]:
        return [("w_x", self.w_x), ("w_h", self.w_h), ("bias", self.bias)]


def lstm_cell(
    x: Tensor, h_prev: Tensor, c_prev: Tensor, p: LstmParams
) -> tuple[Tensor, Tensor]:
    """One LSTM step: sigmoid gates, tanh candidate and output squash."""
    if x.shape[-1] != p.d_in:
        raise ValueError(f"lstm_cell expects input dim {p.d_in}, got {x.shape}")
    hh = p.hidden
    gates = x @ p.w_x + h_prev @ p.w_h + p.bias  # (B, 4H)
    i = gates[..., 0:hh].sigmoid()
    f = gates[..., hh : 2 * hh].sigmoid()
    g = gates[..., 2 * hh : 3 * hh].tanh()
    o = gates[..., 3 * hh : 4 * hh].sigmoid()
    c = f * c_prev + i * g
    h = o * c.tanh()
    return h, c


def lstm_forward(
    xs: Tensor,
    p: LstmParams,
    h0: Tensor | None = None,
    c0: Tensor | None = None,
    reverse: bool = False,
) -> tuple[Tensor, tuple[Tensor, Tensor]]:
    """Run an LSTM over (T, B, D); returns ((T, B, H), final (h, c)).

    Output step t always aligns with input step t, also when `reverse`
    processes the sequence back-to-front.
    """
    t_len, batch = xs.shape[0], xs.shape[1]
    dtype = xs.dtype
    h = h0 if h0 is not None else Tensor(np.zeros((batch, p.hidden), dtype=dtype))
    c = c0 if c0 is not None else Tensor(np.zeros((batch, p.hidden), dtype=dtype))
    steps = range(t_len - 1, -1, -1) if reverse else range(t_len)
    outputs: dict[int, Tensor] = {}
    for t in steps:
        h, c = lstm_cell(xs[t], h, c, p)
        outputs[t] = h
    return stack([outputs[t] for t in range(t_len)], axis=0), (h, c)


class BiLstm:
    """Forward + backward LSTM, outputs concatenated per step: (T, B, 2H)."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.fwd = LstmParams(d_in, hidden, rng, dtype)
        self.bwd = LstmParams(d_in, hidden, rng, dtype)

    def __call__(self, xs: Tensor) -> Tensor:
        out_f, _ = lstm_forward(xs, self.fwd)
        out_b, _ = lstm_forward(xs, self.bwd, reverse=True)
        return concat([out_f, out_b], axis=-1)

    def params(self) -> list[tuple[str, Parameter]]:
        return [(f"fwd.{n}", p) for n, p in self.fwd.params()] + [
            (f"bwd.{n}", p) for n, p in self.bwd.params()
        ]


# -- optimizer -----------------------------------------------------------------


def adamw_step(
    param: Parameter,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One in-place AdamW update from param.grad.

    Decay is decoupled — applied to the raw parameter before the adaptive
    step:
        theta <- theta - lr * wd * theta
        m <- b1*m + (1-b1)*g        v <- b2*v + (1-b2)*g^2
        theta <- theta - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
    """
    if param.grad is None:
        raise RuntimeError("adamw_step on a parameter with no gradient")
    if param.m is None:
        param.m = np.zeros_like(param.values)
        param.v = np.zeros_like(param.values)
    g = param.grad
    param.step_count += 1
    t = param.step_count
    if weight_decay:
        param.values -= lr * weight_decay * param.values
    param.m = beta1 * param.m + (1.0 - beta1) * g
    param.v = beta2 * param.v + (1.0 - beta2) * (g * g)
    m_hat = param.m / (1.0 - beta1**t)
    v_hat = param.v / (1.0 - beta2**t)
    param.values -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    """Optimizer wrapper over `adamw_step` for a fixed parameter list."""

    def __init__(
        self,
        params: list[Parameter],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay

    def step(self) -> None:
        for p in self.params:
            adamw_step(p, self.lr, self.betas[0], self.betas[1], self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- verification ---------------------------------------------------------------


def grad_check(fn, inputs: list[Tensor], step: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    `fn(*inputs)` must return a scalar Tensor. Inputs should be float64 —
    at step 1e-5 the FD noise floor sits far below the 1e-4 tolerances
    used in tests. Relative error is |a - n| / max(|a|, |n|, 1e-6).
    """
    for t in inputs:
        if t.values.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        t.grad = None
    out = fn(*inputs)
    out.backward()
    analytic = [np.zeros_like(t.values) if t.grad is None else t.grad.copy() for t in inputs]

    max_rel = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.values.reshape(-1)
            a_flat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                f_plus = float(fn(*inputs).values)
                flat[i] = orig - step
                f_minus = float(fn(*inputs).values)
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * step)
                rel = abs(a_flat[i] - numeric) / max(abs(a_flat[i]), abs(numeric), 1e-6)
                max_rel = max(max_rel, rel)
    return max_rel


# -- checkpoints -----------------------------------------------------------------

CHECKPOINT_FORMAT = "fapnet-checkpoint-v1"


def save_checkpoint(
    path: str | Path, named_params: list[tuple[str, Parameter]], meta: dict | None = None
) -> None:
    """Write one JSON header line, then float32 LE payloads in header order."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "params": [{"name": n, "shape": list(p.shape)} for n, p in named_params],
        "meta": meta or {},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, separators=(",", ":")).encode() + b"\n")
        for _, p in named_params:
            f.write(np.ascontiguousarray(p.values, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint; returns (header, name -> float32 array)."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing checkpoint header line")
    try:
        header = json.loads(raw[:nl].decode())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: bad checkpoint header: {e}") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    body = raw[nl + 1 :]
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        nbytes = size * 4
        if offset + nbytes > len(body):
            raise ValueError(f"{path}: truncated payload at parameter {entry['name']!r}")
        arrays[entry["name"]] = (
            np.frombuffer(body, dtype="<f4", count=size, offset=offset)
            .reshape(shape)
            .copy()
        )
        offset += nbytes
    if offset != len(body):
        raise ValueError(f"{path}: {len(body) - offset} trailing bytes after payloads")
    return header, arrays
