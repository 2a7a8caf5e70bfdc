"""Minimal dense-tensor neural network kernel.

Supports the fixed layer set needed for a steering regressor (conv2d with
valid padding, relu, flatten, dense, tanh) plus reverse-mode gradients of
the scalar output with respect to the input image (for attacks) and of an
MSE loss with respect to the parameters (for training). Tensors are plain
numpy arrays in HWC layout; float32 at runtime, float64 for verification.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LAYER_KINDS = ("conv2d", "relu", "flatten", "dense", "tanh")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a feed-forward stack. Only conv2d/dense carry parameters."""

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 0
    stride: int = 1
    in_features: int = 0
    out_features: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


def conv2d(in_channels, out_channels, kernel_size, stride=1):
    return LayerSpec("conv2d", in_channels=in_channels, out_channels=out_channels,
                     kernel_size=kernel_size, stride=stride)


def relu():
    return LayerSpec("relu")


def flatten():
    return LayerSpec("flatten")


def dense(in_features, out_features):
    return LayerSpec("dense", in_features=in_features, out_features=out_features)


def tanh():
    return LayerSpec("tanh")


def layer_output_shape(spec: LayerSpec, in_shape: tuple) -> tuple:
    """Shape a layer produces for a given input shape; raises on mismatch."""
    if spec.kind == "conv2d":
        if len(in_shape) != 3:
            raise ValueError(f"conv2d expects HWC input, got shape {in_shape}")
        h, w, c = in_shape
        if c != spec.in_channels:
            raise ValueError(f"conv2d expects {spec.in_channels} channels, got {c}")
        k, s = spec.kernel_size, spec.stride
        if h < k or w < k:
            raise ValueError(f"conv2d kernel {k} larger than input {in_shape}")
        return ((h - k) // s + 1, (w - k) // s + 1, spec.out_channels)
    if spec.kind == "dense":
        if len(in_shape) != 1 or in_shape[0] != spec.in_features:
            raise ValueError(f"dense expects ({spec.in_features},), got {in_shape}")
        return (spec.out_features,)
    if spec.kind == "flatten":
        return (int(np.prod(in_shape)),)
    return in_shape  # relu / tanh


class Network:
    """Immutable-by-convention layer stack with per-layer weight/bias arrays.

    ``params[i]`` is ``{"w": ..., "b": ...}`` for conv2d/dense layers and
    ``None`` for parameterless ones. Construction validates that consecutive
    layers are shape-compatible and that param shapes match their specs.
    """

    def __init__(self, input_shape, layers, params):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = list(layers)
        self.params = params
        if len(params) != len(self.layers):
            raise ValueError("params list must align with layers")
        shape = self.input_shape
        for i, spec in enumerate(self.layers):
            shape = layer_output_shape(spec, shape)
            p = params[i]
            if spec.kind in ("conv2d", "dense"):
                if p is None:
                    raise ValueError(f"layer {i} ({spec.kind}) is missing parameters")
                w, b = p["w"], p["b"]
                expect_w = (_weight_shape(spec))
                if tuple(w.shape) != expect_w or tuple(b.shape) != (expect_w[-1],):
                    raise ValueError(
                        f"layer {i} ({spec.kind}) param shapes {w.shape}/{b.shape} "
                        f"do not match spec {expect_w}")
            elif p is not None:
                raise ValueError(f"layer {i} ({spec.kind}) takes no parameters")
        self.output_shape = shape

    @property
    def dtype(self):
        for p in self.params:
            if p is not None:
                return p["w"].dtype
        return np.dtype(np.float32)

    def astype(self, dtype) -> "Network":
        """Copy of the network with parameters cast (float64 gradient checks)."""
        params = [None if p is None else {"w": p["w"].astype(dtype), "b": p["b"].astype(dtype)}
                  for p in self.params]
        return Network(self.input_shape, self.layers, params)


def _weight_shape(spec: LayerSpec) -> tuple:
    if spec.kind == "conv2d":
        k = spec.kernel_size
        return (k, k, spec.in_channels, spec.out_channels)
    return (spec.in_features, spec.out_features)


def init_params(input_shape, layers, seed):
    """He-style uniform init scaled by fan-in, biases zero, seeded."""
    rng = np.random.default_rng(seed)
    params = []
    for spec in layers:
        if spec.kind == "conv2d":
            fan_in = spec.kernel_size * spec.kernel_size * spec.in_channels
        elif spec.kind == "dense":
            fan_in = spec.in_features
        else:
            params.append(None)
            continue
        limit = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=_weight_shape(spec)).astype(np.float32)
        b = np.zeros(_weight_shape(spec)[-1], dtype=np.float32)
        params.append({"w": w, "b": b})
    return params


# ---------------------------------------------------------------------------
# conv plumbing (batched im2col; valid padding, integer stride floor)

def _im2col(x, k, stride):
    n, h, w, c = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    sn, sh, sw, sc = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (n, oh, ow, k, k, c), (sn, sh * stride, sw * stride, sh, sw, sc))
    return view.reshape(n, oh * ow, k * k * c), oh, ow


def _col2im(dcols, in_shape, k, stride, oh, ow):
    n, h, w, c = in_shape
    dx = np.zeros(in_shape, dtype=dcols.dtype)
    d = dcols.reshape(n, oh, ow, k, k, c)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + oh * stride:stride, j:j + ow * stride:stride, :] += d[:, :, :, i, j, :]
    return dx


# ---------------------------------------------------------------------------
# forward / backward

def _check_input(net: Network, x: np.ndarray, batched: bool):
    want = net.input_shape
    got = tuple(x.shape[1:]) if batched else tuple(x.shape)
    if got != want:
        raise ValueError(f"input shape {got} does not match network input {want}")


def _forward_cached(net: Network, xb: np.ndarray):
    """Run the stack on a batch, keeping what each layer's backward needs."""
    a = np.ascontiguousarray(xb, dtype=net.dtype)
    cache = []
    for spec, p in zip(net.layers, net.params):
        if spec.kind == "conv2d":
            cols, oh, ow = _im2col(a, spec.kernel_size, spec.stride)
            wmat = p["w"].reshape(-1, spec.out_channels)
            out = cols @ wmat + p["b"]
            cache.append(("conv2d", a.shape, cols, oh, ow))
            a = np.ascontiguousarray(out.reshape(a.shape[0], oh, ow, spec.out_channels))
        elif spec.kind == "relu":
            mask = a > 0  # subgradient at 0 is 0
            a = a * mask
            cache.append(("relu", mask))
        elif spec.kind == "flatten":
            cache.append(("flatten", a.shape))
            a = a.reshape(a.shape[0], -1)
        elif spec.kind == "dense":
            cache.append(("dense", a))
            a = a @ p["w"] + p["b"]
        else:  # tanh
            a = np.tanh(a)
            cache.append(("tanh", a))
    return a, cache


def _backward(net: Network, cache, dout, want_input_grad, want_param_grads):
    """Reverse-mode pass; dout has the shape of the final activation."""
    grads = [None] * len(net.layers)
    da = dout
    for i in range(len(net.layers) - 1, -1, -1):
        spec, p, entry = net.layers[i], net.params[i], cache[i]
        if spec.kind == "conv2d":
            _, in_shape, cols, oh, ow = entry
            n = in_shape[0]
            dmat = da.reshape(n, oh * ow, spec.out_channels)
            if want_param_grads:
                dw = np.einsum("npk,npo->ko", cols, dmat).reshape(p["w"].shape)
                db = dmat.sum(axis=(0, 1))
                grads[i] = {"w": dw, "b": db}
            if i == 0 and not want_input_grad:
                break
            wmat = p["w"].reshape(-1, spec.out_channels)
            dcols = dmat @ wmat.T
            da = _col2im(dcols, in_shape, spec.kernel_size, spec.stride, oh, ow)
        elif spec.kind == "relu":
            da = da * entry[1]
        elif spec.kind == "flatten":
            da = da.reshape(entry[1])
        elif spec.kind == "dense":
            xin = entry[1]
            if want_param_grads:
                grads[i] = {"w": xin.T @ da, "b": da.sum(axis=0)}
            if i == 0 and not want_input_grad:
                break
            da = da @ p["w"].T
        else:  # tanh; entry[1] is the activation output
            da = da * (1.0 - entry[1] * entry[1])
    return da, grads


def forward(net: Network, x: np.ndarray) -> float:
    """Scalar prediction f(x); the stack must end in a single value."""
    _check_input(net, x, batched=False)
    out, _ = _forward_cached(net, x[None])
    if out.shape != (1, 1):
        raise ValueError(f"network output shape {out.shape[1:]} is not scalar")
    y = float(out[0, 0])
    if not np.isfinite(y):
        raise ValueError("non-finite prediction")
    return y


def forward_batch(net: Network, xb: np.ndarray) -> np.ndarray:
    """Predictions for a batch, shape (n,)."""
    _check_input(net, xb, batched=True)
    out, _ = _forward_cached(net, xb)
    return out.reshape(-1)


def relu_pattern(net: Network, x: np.ndarray):
    """Active/inactive pattern of every relu unit at input x.

    Two inputs with identical patterns lie in the same smooth piece of the
    network, where it is differentiable; finite-difference probes are only
    meaningful when both probe points share the pattern.
    """
    _check_input(net, x, batched=False)
    _, cache = _forward_cached(net, x[None])
    return tuple(entry[1].copy() for entry in cache if entry[0] == "relu")


def same_relu_pattern(net: Network, a: np.ndarray, b: np.ndarray) -> bool:
    """True when a and b activate exactly the same relu units."""
    pa, pb = relu_pattern(net, a), relu_pattern(net, b)
    return all(np.array_equal(ma, mb) for ma, mb in zip(pa, pb))


def grad_input(net: Network, x: np.ndarray) -> np.ndarray:
    """d f(x) / d x, same shape as x, by reverse-mode accumulation."""
    _check_input(net, x, batched=False)
    out, cache = _forward_cached(net, x[None])
    if out.shape != (1, 1):
        raise ValueError(f"network output shape {out.shape[1:]} is not scalar")
    dout = np.ones_like(out)
    dx, _ = _backward(net, cache, dout, want_input_grad=True, want_param_grads=False)
    dx = dx[0]
    if not np.isfinite(dx).all():
        raise ValueError("non-finite input gradient")
    return dx


def mse_loss_and_grads(net: Network, batch_x: np.ndarray, batch_y: np.ndarray):
    """MSE loss over a batch plus gradients w.r.t. every weight and bias."""
    if batch_x.shape[0] == 0:
        raise ValueError("empty batch")
    if batch_x.shape[0] != batch_y.shape[0]:
        raise ValueError("batch_x and batch_y lengths differ")
    _check_input(net, batch_x, batched=True)
    out, cache = _forward_cached(net, batch_x)
    preds = out.reshape(-1)
    y = batch_y.astype(preds.dtype).reshape(-1)
    err = preds - y
    loss = float(np.mean(err * err))
    n = preds.shape[0]
    dout = (2.0 / n) * err.reshape(out.shape).astype(out.dtype)
    _, grads = _backward(net, cache, dout, want_input_grad=False, want_param_grads=True)
    for g in grads:
        if g is not None and not (np.isfinite(g["w"]).all() and np.isfinite(g["b"]).all()):
            raise ValueError("non-finite parameter gradient")
    return loss, grads


def grad_params(net: Network, batch_x: np.ndarray, batch_y: np.ndarray):
    """Gradients of the MSE loss w.r.t. all parameters (shapes match params)."""
    return mse_loss_and_grads(net, batch_x, batch_y)[1]


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, lr,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """One deterministic Adam update; returns (new_params, new_state)."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    for g in grads:
        if g is None:
            continue
        if not (np.isfinite(g["w"]).all() and np.isfinite(g["b"]).all()):
            raise ValueError("non-finite gradient passed to adam_step")
    if not state.m:
        state = AdamState(
            step=0,
            m=[None if p is None else {"w": np.zeros_like(p["w"]), "b": np.zeros_like(p["b"])}
               for p in params],
            v=[None if p is None else {"w": np.zeros_like(p["w"]), "b": np.zeros_like(p["b"])}
               for p in params])
    t = state.step + 1
    corr1 = 1.0 - beta1 ** t
    corr2 = 1.0 - beta2 ** t
    new_params = []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p is None:
            new_params.append(None)
            continue
        np_layer = {}
        for key in ("w", "b"):
            m[key] = beta1 * m[key] + (1 - beta1) * g[key]
            v[key] = beta2 * v[key] + (1 - beta2) * (g[key] * g[key])
            mhat = m[key] / corr1
            vhat = v[key] / corr2
            np_layer[key] = (p[key] - lr * mhat / (np.sqrt(vhat) + eps)).astype(p[key].dtype)
        new_params.append(np_layer)
    return new_params, AdamState(step=t, m=state.m, v=state.v)
