"""Minimal dense-tensor core with reverse-mode gradients and Adam.

Values are plain numpy arrays: a frame map is a C-contiguous (T, C) matrix
of frames x channels.  Differentiable ops build a tape of `Var` nodes with
hand-written backward closures; the op set is deliberately closed to what
the segmentation network needs, there is no general graph engine.

Reductions (bias gradients, means, softmax normalisation) accumulate in
float64 regardless of the storage dtype so that gradient checks stay stable
when training runs in float32.  Convolutions use centred (acausal) taps with
zero padding so the output always has the input's length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, StateError


def as_tensor2(x, dtype=None) -> np.ndarray:
    """Validate and return a (T, C) frames-x-channels matrix.

    Enforces: 2-D, T >= 1, C >= 1, all values finite, C-contiguous layout.
    """
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D frames x channels matrix, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"degenerate tensor shape {arr.shape}: need T >= 1 and C >= 1")
    if not np.all(np.isfinite(arr)):
        raise DimensionError("tensor contains non-finite values")
    return arr


class Var:
    """One node of the reverse-mode tape.

    `value` is the forward result (numpy array, any rank).  `grad` is filled
    by `backward()`; it stays None for nodes the loss never reaches, except
    for `Parameter`s which always expose a zero-initialised gradient buffer.
    """

    __slots__ = ("value", "grad", "_parents", "_backward_fn")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = np.asarray(value)
        self.grad = None
        self._parents = tuple(parents)
        self._backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g


class Parameter(Var):
    """Trainable tensor: value, gradient buffer and Adam state."""

    __slots__ = ("m", "v", "step_count", "name")

    def __init__(self, value, name=""):
        super().__init__(np.array(value))
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step_count = 0
        self.name = name


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1): got {self.beta1}, {self.beta2}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")


def backward(loss: Var) -> None:
    """Populate gradients of everything reachable from a scalar loss node."""
    if loss.value.size != 1:
        raise StateError(f"backward() needs a scalar loss, got shape {loss.value.shape}")
    if not loss._parents and loss._backward_fn is None and not isinstance(loss, Parameter):
        raise StateError("backward() called on a node with no recorded forward computation")

    # Iterative topological order (graphs are deep: stages x layers).
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.accumulate_grad(np.ones_like(loss.value))
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def adam_step(params, cfg: AdamConfig) -> None:
    """Bias-corrected Adam update on every parameter; zeroes gradients after."""
    for p in params:
        g = p.grad
        p.step_count += 1
        t = p.step_count
        p.m *= cfg.beta1
        p.m += (1.0 - cfg.beta1) * g
        p.v *= cfg.beta2
        p.v += (1.0 - cfg.beta2) * np.square(g)
        m_hat = p.m / (1.0 - cfg.beta1 ** t)
        v_hat = p.v / (1.0 - cfg.beta2 ** t)
        p.value -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        p.grad[...] = 0


# ---------------------------------------------------------------------------
# Differentiable ops.  Each returns a Var whose backward closure accumulates
# into its parents.  `x` below is always a (T, C) Var unless stated.
# ---------------------------------------------------------------------------


def conv1d_dilated(x: Var, w: Var, b: Var, dilation: int) -> Var:
    """Centred dilated 1-D convolution over frames, zero padded to length T.

    out[t, o] = b[o] + sum_{k,i} w[o, i, k] * x[t + (k - (K-1)/2) * dilation, i]
    with out-of-range frames reading as zero.  `w` has shape (Cout, Cin, K)
    with K odd; output is (T, Cout).
    """
    T, cin = x.value.shape
    if w.value.ndim != 3:
        raise DimensionError(f"conv weights must be (Cout, Cin, K), got shape {w.value.shape}")
    cout, w_cin, K = w.value.shape
    if w_cin != cin:
        raise DimensionError(f"conv expects Cin={w_cin} from weights, input has Cin={cin}")
    if K % 2 != 1:
        raise DimensionError(f"kernel size must be odd, got {K}")
    if b.value.shape != (cout,):
        raise DimensionError(f"bias shape {b.value.shape} != ({cout},)")
    if dilation < 1:
        raise DimensionError(f"dilation must be a positive int, got {dilation}")

    offsets = (np.arange(K) - (K - 1) // 2) * dilation
    # im2col with zero padding, built from contiguous slices per tap.
    cols = np.zeros((T, K, cin), dtype=x.value.dtype)
    spans = []
    for k, off in enumerate(offsets):
        lo = max(0, -off)
        hi = min(T, T - off)
        spans.append((k, int(off), lo, hi))
        if lo < hi:
            cols[lo:hi, k] = x.value[lo + off:hi + off]
    cols2 = cols.reshape(T, K * cin)
    w_mat = np.ascontiguousarray(w.value.transpose(2, 1, 0).reshape(K * cin, cout))
    out = cols2 @ w_mat
    out += b.value

    def backward_fn(g):
        d_cols2 = g @ w_mat.T
        d_w_mat = cols2.T @ g
        w.accumulate_grad(d_w_mat.reshape(K, cin, cout).transpose(2, 1, 0))
        b.accumulate_grad(g.sum(axis=0, dtype=np.float64).astype(b.value.dtype))
        dx = np.zeros_like(x.value)
        d_cols = d_cols2.reshape(T, K, cin)
        for k, off, lo, hi in spans:
            if lo < hi:
                dx[lo + off:hi + off] += d_cols[lo:hi, k]
        x.accumulate_grad(dx)

    return Var(out, parents=(x, w, b), backward_fn=backward_fn)


def pointwise_conv(x: Var, w: Var, b: Var) -> Var:
    """Per-frame affine map (a 1x1 convolution): (T, Cin) -> (T, Cout)."""
    T, cin = x.value.shape
    if w.value.ndim != 2 or w.value.shape[1] != cin:
        raise DimensionError(f"pointwise weights {w.value.shape} incompatible with Cin={cin}")
    cout = w.value.shape[0]
    if b.value.shape != (cout,):
        raise DimensionError(f"bias shape {b.value.shape} != ({cout},)")
    out = x.value @ w.value.T
    out += b.value

    def backward_fn(g):
        x.accumulate_grad(g @ w.value)
        w.accumulate_grad(g.T @ x.value)
        b.accumulate_grad(g.sum(axis=0, dtype=np.float64).astype(b.value.dtype))

    return Var(out, parents=(x, w, b), backward_fn=backward_fn)


def relu(x: Var) -> Var:
    out = np.maximum(x.value, 0)
    mask = x.value > 0  # subgradient 0 at the kink

    def backward_fn(g):
        x.accumulate_grad(g * mask)

    return Var(out, parents=(x,), backward_fn=backward_fn)


def log_softmax_rows(x: Var) -> Var:
    """Row-wise log softmax, stabilised by max subtraction.  Needs C >= 2."""
    if x.value.shape[1] < 2:
        raise DimensionError(f"log_softmax needs C >= 2 channels, got {x.value.shape[1]}")
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True, dtype=np.float64))
    out = (shifted - lse).astype(x.value.dtype)
    soft = np.exp(out)

    def backward_fn(g):
        x.accumulate_grad(g - soft * g.sum(axis=1, keepdims=True))

    return Var(out, parents=(x,), backward_fn=backward_fn)


def exp(x: Var) -> Var:
    out = np.exp(x.value)

    def backward_fn(g):
        x.accumulate_grad(g * out)

    return Var(out, parents=(x,), backward_fn=backward_fn)


def sigmoid(x: Var) -> Var:
    # Stable in both tails.
    v = x.value
    out = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                   np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v)))).astype(v.dtype)

    def backward_fn(g):
        x.accumulate_grad(g * out * (1.0 - out))

    return Var(out, parents=(x,), backward_fn=backward_fn)


def temporal_mean(x: Var) -> Var:
    """Mean over frames: (T, C) -> (1, C)."""
    T = x.value.shape[0]
    out = x.value.mean(axis=0, keepdims=True, dtype=np.float64).astype(x.value.dtype)

    def backward_fn(g):
        x.accumulate_grad(np.broadcast_to(g / T, x.value.shape))

    return Var(out, parents=(x,), backward_fn=backward_fn)


def scale_channels(x: Var, gates: Var) -> Var:
    """Multiply every frame by per-channel gates: (T, C) * (1, C)."""
    if gates.value.shape != (1, x.value.shape[1]):
        raise DimensionError(
            f"gates shape {gates.value.shape} != (1, {x.value.shape[1]})")
    out = x.value * gates.value

    def backward_fn(g):
        x.accumulate_grad(g * gates.value)
        gates.accumulate_grad(
            (g * x.value).sum(axis=0, keepdims=True, dtype=np.float64).astype(gates.value.dtype))

    return Var(out, parents=(x, gates), backward_fn=backward_fn)


def add(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise DimensionError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")
    out = a.value + b.value

    def backward_fn(g):
        a.accumulate_grad(g)
        b.accumulate_grad(g)

    return Var(out, parents=(a, b), backward_fn=backward_fn)


def dropout(x: Var, rate: float, rng: np.random.Generator | None, training: bool) -> Var:
    """Inverted dropout.  Identity when not training or rate == 0."""
    if not training or rate == 0.0:
        return x
    if not (0.0 <= rate < 1.0):
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None:
        raise StateError("training-mode dropout needs an RNG for determinism")
    keep = rng.random(x.value.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    out = np.where(keep, x.value * scale, 0).astype(x.value.dtype)

    def backward_fn(g):
        x.accumulate_grad(np.where(keep, g * scale, 0).astype(x.value.dtype))

    return Var(out, parents=(x,), backward_fn=backward_fn)


def scale_const(x: Var, c: float) -> Var:
    out = x.value * c

    def backward_fn(g):
        x.accumulate_grad(g * c)

    return Var(out, parents=(x,), backward_fn=backward_fn)


def vsum(terms) -> Var:
    """Sum of scalar Vars (float64 accumulation)."""
    terms = tuple(terms)
    if not terms:
        raise DimensionError("vsum needs at least one term")
    total = np.float64(0.0)
    for t in terms:
        if t.value.size != 1:
            raise DimensionError("vsum terms must be scalars")
        total += float(t.value)
    out = np.asarray(total)

    def backward_fn(g):
        for t in terms:
            t.accumulate_grad(np.asarray(g, dtype=t.value.dtype).reshape(t.value.shape))

    return Var(out, parents=terms, backward_fn=backward_fn)
