"""Dense tensor engine: layer forward passes, reverse-mode gradients, SGD.

Tensors are numpy arrays laid out channel-first with a leading batch axis,
``(B, C, H, W)`` for spatial layers and ``(B, F)`` after flattening. Every
operation is a pure function of its inputs; randomness only enters through
explicit seeds.
"""

import hashlib
import logging
from dataclasses import dataclass, field, replace
from math import prod

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    LabelError,
    NonFiniteError,
    ShapeMismatchError,
    TraceMismatchError,
)

logger = logging.getLogger(__name__)

LAYER_KINDS = ("conv2d", "maxpool2d", "fc", "relu", "dropout", "flatten", "softmax")
PARAM_KINDS = ("conv2d", "fc")
INITS = ("xavier", "gaussian")
MODES = ("train", "eval")


# --- LAYER SPECS ---


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    out_dim: int = 0
    rate: float = 0.0
    init: str = "xavier"
    std: float = 0.01
    name: str = ""

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if min(self.kernel, self.stride, self.pad) < 0:
            raise ValueError("kernel, stride and pad must be nonnegative")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.init not in INITS:
            raise ValueError(f"unknown initializer {self.init!r}")
        if self.kind == "conv2d" and (self.out_channels < 1 or self.kernel < 1):
            raise ValueError("conv2d needs out_channels >= 1 and kernel >= 1")
        if self.kind == "maxpool2d" and self.kernel < 1:
            raise ValueError("maxpool2d needs kernel >= 1")
        if self.kind in ("conv2d", "maxpool2d") and self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.kind == "fc" and self.out_dim < 1:
            raise ValueError("fc needs out_dim >= 1")

    @classmethod
    def conv2d(cls, out_channels, kernel, stride=1, pad=0, init="xavier", std=0.01, name=""):
        return cls("conv2d", out_channels=out_channels, kernel=kernel, stride=stride,
                   pad=pad, init=init, std=std, name=name)

    @classmethod
    def maxpool2d(cls, kernel, stride=None, name=""):
        return cls("maxpool2d", kernel=kernel, stride=kernel if stride is None else stride, name=name)

    @classmethod
    def fc(cls, out_dim, init="xavier", std=0.01, name=""):
        return cls("fc", out_dim=out_dim, init=init, std=std, name=name)

    @classmethod
    def relu(cls, name=""):
        return cls("relu", name=name)

    @classmethod
    def dropout(cls, rate, name=""):
        return cls("dropout", rate=rate, name=name)

    @classmethod
    def flatten(cls, name=""):
        return cls("flatten", name=name)

    @classmethod
    def softmax(cls, name=""):
        return cls("softmax", name=name)

    @property
    def has_params(self):
        return self.kind in PARAM_KINDS


def output_shape(spec, in_shape):
    """Per-sample output shape of ``spec`` applied to a per-sample ``in_shape``."""
    in_shape = tuple(in_shape)
    if spec.kind in ("conv2d", "maxpool2d"):
        if len(in_shape) != 3:
            raise ShapeMismatchError(f"{spec.kind} expects (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        pad = spec.pad if spec.kind == "conv2d" else 0
        oh = (h + 2 * pad - spec.kernel) // spec.stride + 1
        ow = (w + 2 * pad - spec.kernel) // spec.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeMismatchError(f"{spec.kind} kernel {spec.kernel} too large for {in_shape}")
        return (spec.out_channels if spec.kind == "conv2d" else c, oh, ow)
    if spec.kind == "fc":
        return (spec.out_dim,)
    if spec.kind == "flatten":
        return (prod(in_shape),)
    return in_shape


def param_shapes(spec, in_shape):
    if spec.kind == "conv2d":
        return {"weight": (spec.out_channels, in_shape[0], spec.kernel, spec.kernel),
                "bias": (spec.out_channels,)}
    if spec.kind == "fc":
        return {"weight": (spec.out_dim, prod(in_shape)), "bias": (spec.out_dim,)}
    return {}


def init_params(spec, in_shape, rng):
    """Xavier is uniform on +-sqrt(3 / fan_in); gaussian is N(0, std). Biases start at zero."""
    shapes = param_shapes(spec, in_shape)
    if not shapes:
        return None
    w_shape = shapes["weight"]
    fan_in = prod(w_shape[1:])
    if spec.init == "xavier":
        limit = np.sqrt(3.0 / fan_in)
        weight = rng.uniform(-limit, limit, size=w_shape)
    else:
        weight = rng.normal(0.0, spec.std, size=w_shape)
    return {"weight": weight, "bias": np.zeros(shapes["bias"])}


# --- NETWORK ---


@dataclass
class Network:
    layers: list
    input_shape: tuple
    params: list
    frozen: list
    dtype: type = np.float64

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.dtype = np.dtype(self.dtype).type
        if not (len(self.layers) == len(self.params) == len(self.frozen)):
            raise ShapeMismatchError("layers, params and frozen flags must have equal length")
        for i, (spec, in_shape) in enumerate(zip(self.layers, self.input_shapes)):
            expected = param_shapes(spec, in_shape)
            got = self.params[i] or {}
            if set(expected) != set(got):
                raise ShapeMismatchError(f"layer {i} ({spec.kind}) has params {sorted(got)}")
            for key, shape in expected.items():
                if tuple(got[key].shape) != shape:
                    raise ShapeMismatchError(
                        f"layer {i} {key} has shape {got[key].shape}, expected {shape}"
                    )

    @classmethod
    def build(cls, layers, input_shape, seed=0, dtype=np.float64, frozen=False):
        rng = np.random.default_rng(seed)
        params, shape = [], tuple(input_shape)
        for spec in layers:
            p = init_params(spec, shape, rng)
            params.append(None if p is None else {k: v.astype(dtype) for k, v in p.items()})
            shape = output_shape(spec, shape)
        flags = list(frozen) if isinstance(frozen, (list, tuple)) else [bool(frozen)] * len(layers)
        return cls(list(layers), tuple(input_shape), params, flags, dtype)

    @property
    def input_shapes(self):
        shapes, shape = [], self.input_shape
        for spec in self.layers:
            shapes.append(shape)
            shape = output_shape(spec, shape)
        return shapes

    @property
    def output_shape(self):
        shape = self.input_shape
        for spec in self.layers:
            shape = output_shape(spec, shape)
        return shape

    def layer_name(self, i):
        return self.layers[i].name or f"layer{i}"

    def named_params(self):
        """Yield ``(layer_index, key, array)`` for every parameter array."""
        for i, p in enumerate(self.params):
            for key in ("weight", "bias"):
                if p is not None:
                    yield i, key, p[key]

    def trainable_params(self):
        return {(i, key): arr for i, key, arr in self.named_params() if not self.frozen[i]}

    def with_params(self, updates):
        """Return a network sharing this one's arrays except those in ``updates``."""
        params = [None if p is None else dict(p) for p in self.params]
        for (i, key), arr in updates.items():
            params[i][key] = arr
        return replace(self, params=params, frozen=list(self.frozen))

    def copy(self):
        params = [None if p is None else {k: v.copy() for k, v in p.items()} for p in self.params]
        return replace(self, params=params, frozen=list(self.frozen))

    def astype(self, dtype):
        params = [
            None if p is None else {k: v.astype(dtype) for k, v in p.items()} for p in self.params
        ]
        return replace(self, params=params, frozen=list(self.frozen), dtype=dtype)

    def freeze(self):
        self.frozen = [True] * len(self.layers)
        return self

    def checksum(self):
        digest = hashlib.sha256()
        digest.update(repr((self.input_shape, self.layers)).encode())
        for i, key, arr in self.named_params():
            digest.update(f"{i}.{key}".encode())
            digest.update(np.ascontiguousarray(arr).tobytes())
        return digest.hexdigest()

    @property
    def param_count(self):
        return sum(arr.size for _, _, arr in self.named_params())


# --- FORWARD ---


@dataclass
class ActivationTrace:
    input: np.ndarray
    activations: list
    caches: list
    mode: str
    seed: object = None
    kinds: tuple = field(default=())

    @property
    def output(self):
        return self.activations[-1]

    def layer_input(self, i):
        return self.input if i == 0 else self.activations[i - 1]


def _ensure_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} produced non-finite values")


def conv_forward(x, weight, bias, stride, pad):
    b, _, h, w = x.shape
    out_ch, _, k, _ = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    out = np.zeros((b, out_ch, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            out += np.einsum("bchw,oc->bohw", patch, weight[:, :, i, j], optimize=True)
    out += bias[None, :, None, None]
    return out


def conv_backward(x, weight, stride, pad, grad, need_params=True, need_input=True):
    b, c, h, w = x.shape
    k = weight.shape[2]
    oh, ow = grad.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    d_weight = np.zeros_like(weight) if need_params else None
    d_xp = np.zeros_like(xp) if need_input else None
    for i in range(k):
        for j in range(k):
            rows = slice(i, i + stride * oh, stride)
            cols = slice(j, j + stride * ow, stride)
            if need_params:
                d_weight[:, :, i, j] = np.einsum(
                    "bohw,bchw->oc", grad, xp[:, :, rows, cols], optimize=True
                )
            if need_input:
                d_xp[:, :, rows, cols] += np.einsum(
                    "bohw,oc->bchw", grad, weight[:, :, i, j], optimize=True
                )
    d_bias = grad.sum(axis=(0, 2, 3)) if need_params else None
    d_x = d_xp[:, :, pad : pad + h, pad : pad + w] if need_input else None
    return d_weight, d_bias, d_x


def maxpool_forward(x, kernel, stride):
    """Max over each window; ties go to the first row-major position."""
    b, c, h, w = x.shape
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    windows = sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, : stride * oh : stride, : stride * ow : stride]
    flat = windows.reshape(b, c, oh, ow, kernel * kernel)
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    return out, argmax


def maxpool_backward(x_shape, argmax, kernel, stride, grad):
    b, c, oh, ow = grad.shape
    d_row, d_col = np.divmod(argmax, kernel)
    rows = np.arange(oh)[None, None, :, None] * stride + d_row
    cols = np.arange(ow)[None, None, None, :] * stride + d_col
    bi = np.arange(b)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    d_x = np.zeros(x_shape, dtype=grad.dtype)
    np.add.at(d_x, (bi, ci, rows, cols), grad)
    return d_x


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def dropout_mask(shape, rate, seed, layer_index, dtype):
    """Inverted dropout mask: kept units are scaled by 1 / (1 - rate).

    ``seed`` may be an int or a tuple of ints such as ``(run_seed, iteration)``.
    """
    entropy = [int(s) for s in np.atleast_1d(seed)] + [int(layer_index)]
    rng = np.random.default_rng(entropy)
    keep = rng.random(shape) >= rate
    return (keep / (1.0 - rate)).astype(dtype)


def forward(net, x, mode="eval", rng_seed=None):
    """Run ``net`` on a batch and keep every intermediate activation.

    ``x`` is ``(B, *net.input_shape)``; a single unbatched sample is promoted to
    a batch of one.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    x = np.asarray(x, dtype=net.dtype)
    if x.shape == net.input_shape:
        x = x[None]
    if x.shape[1:] != net.input_shape:
        raise ShapeMismatchError(f"input shape {x.shape[1:]} != expected {net.input_shape}")
    has_dropout = any(spec.kind == "dropout" and spec.rate > 0 for spec in net.layers)
    if mode == "train" and has_dropout and rng_seed is None:
        raise ValueError("train mode with dropout requires rng_seed")
    _ensure_finite(x, "input")

    activations, caches = [], []
    a = x
    for i, spec in enumerate(net.layers):
        p = net.params[i]
        cache = {}
        if spec.kind == "conv2d":
            a = conv_forward(a, p["weight"], p["bias"], spec.stride, spec.pad)
        elif spec.kind == "maxpool2d":
            a, cache["argmax"] = maxpool_forward(a, spec.kernel, spec.stride)
        elif spec.kind == "fc":
            a = a.reshape(a.shape[0], -1) @ p["weight"].T + p["bias"]
        elif spec.kind == "relu":
            a = np.maximum(a, 0)
        elif spec.kind == "dropout":
            if mode == "train" and spec.rate > 0:
                cache["mask"] = dropout_mask(a.shape, spec.rate, rng_seed, i, a.dtype)
                a = a * cache["mask"]
        elif spec.kind == "flatten":
            a = a.reshape(a.shape[0], -1)
        elif spec.kind == "softmax":
            a = softmax(a)
        _ensure_finite(a, f"layer {i} ({spec.kind})")
        activations.append(a)
        caches.append(cache)
    return ActivationTrace(
        input=x,
        activations=activations,
        caches=caches,
        mode=mode,
        seed=rng_seed,
        kinds=tuple(spec.kind for spec in net.layers),
    )


def logits_of(net, trace):
    """Pre-softmax output of a trace."""
    if net.layers and net.layers[-1].kind == "softmax":
        return trace.activations[-2] if len(trace.activations) > 1 else trace.input
    return trace.output


# --- LOSS ---


def loss_softmax_xent(logits, label):
    """Cross-entropy of one logit vector; returns ``(loss, d_loss/d_logits)``."""
    logits = np.asarray(logits, dtype=np.float64)
    label = int(label)
    if not 0 <= label < logits.shape[-1]:
        raise LabelError(f"label {label} out of range for {logits.shape[-1]} classes")
    shifted = logits - logits[label]
    others = np.delete(shifted, label)
    top = others.max(initial=-np.inf)
    if top <= 0:
        loss = np.log1p(np.exp(others).sum())
    else:
        loss = top + np.log(np.exp(-top) + np.exp(others - top).sum())
    grad = softmax(logits)
    grad[label] -= 1.0
    return float(loss), grad


def loss_softmax_xent_batch(logits, labels):
    """Mean cross-entropy over a batch; gradient is already divided by the batch size."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=int)
    if logits.shape[0] != labels.shape[0]:
        raise ShapeMismatchError("logits and labels disagree on batch size")
    losses, grads = zip(*(loss_softmax_xent(row, y) for row, y in zip(logits, labels)))
    n = len(labels)
    return float(np.mean(losses)), (np.stack(grads) / n).astype(logits.dtype)


# --- BACKWARD ---


@dataclass
class Gradients:
    params: dict
    input: object = None


def check_trace(net, trace):
    kinds = tuple(spec.kind for spec in net.layers)
    if trace.kinds != kinds or len(trace.activations) != len(net.layers):
        raise TraceMismatchError("trace was not produced by this network")
    batch = trace.input.shape[0]
    shapes = net.input_shapes
    for i, shape in enumerate(shapes):
        if trace.layer_input(i).shape[1:] != shape or trace.layer_input(i).shape[0] != batch:
            raise TraceMismatchError(f"trace activation {i} does not match network shapes")


def layer_input_grad(spec, params, x, cache, grad):
    """Gradient w.r.t. a parameter-free pass of one layer's input."""
    if spec.kind == "conv2d":
        return conv_backward(x, params["weight"], spec.stride, spec.pad, grad, need_params=False)[2]
    if spec.kind == "maxpool2d":
        return maxpool_backward(x.shape, cache["argmax"], spec.kernel, spec.stride, grad)
    if spec.kind == "fc":
        return (grad @ params["weight"]).reshape(x.shape)
    if spec.kind == "relu":
        return grad * (x > 0)
    if spec.kind == "dropout":
        return grad * cache["mask"] if "mask" in cache else grad
    if spec.kind == "flatten":
        return grad.reshape(x.shape)
    raise ValueError(f"no input gradient rule for {spec.kind}")


def backward(net, trace, out_grad, wrt="output", need_input_grad=False):
    """Reverse-mode pass; frozen layers are traversed but collect no gradients.

    ``wrt="logits"`` treats ``out_grad`` as the gradient of the pre-softmax
    logits and skips a trailing softmax layer.
    """
    check_trace(net, trace)
    top = len(net.layers)
    if wrt == "logits" and net.layers and net.layers[-1].kind == "softmax":
        top -= 1
    elif wrt not in ("output", "logits"):
        raise ValueError(f"wrt must be 'output' or 'logits', got {wrt!r}")
    expected = trace.activations[top - 1].shape if top else trace.input.shape
    grad = np.asarray(out_grad, dtype=net.dtype)
    if grad.shape != expected:
        if grad.shape == expected[1:] and expected[0] == 1:
            grad = grad[None]
        else:
            raise ShapeMismatchError(f"out_grad shape {grad.shape} != {expected}")

    trainable = [i for i in range(top) if net.layers[i].has_params and not net.frozen[i]]
    lowest = 0 if need_input_grad else (min(trainable) if trainable else top)
    grads = {}
    for i in range(top - 1, lowest - 1, -1):
        spec, p = net.layers[i], net.params[i]
        x = trace.layer_input(i)
        if spec.kind == "softmax":
            s = trace.activations[i]
            grad = s * (grad - (grad * s).sum(axis=-1, keepdims=True))
            continue
        collect = spec.has_params and not net.frozen[i]
        need_input = i > lowest or need_input_grad
        if spec.kind == "conv2d":
            d_w, d_b, d_x = conv_backward(
                x, p["weight"], spec.stride, spec.pad, grad,
                need_params=collect, need_input=need_input,
            )
            if collect:
                grads[(i, "weight")], grads[(i, "bias")] = d_w, d_b
            grad = d_x
        elif spec.kind == "fc":
            flat = x.reshape(x.shape[0], -1)
            if collect:
                grads[(i, "weight")] = grad.T @ flat
                grads[(i, "bias")] = grad.sum(axis=0)
            grad = (grad @ p["weight"]).reshape(x.shape) if need_input else None
        else:
            grad = layer_input_grad(spec, p, x, trace.caches[i], grad)
    return Gradients(params=grads, input=grad if need_input_grad else None)


# --- OPTIMIZER ---


@dataclass(frozen=True)
class SGDHyper:
    base_lr: float = 1e-5
    gamma: float = 1e-4
    power: float = 0.75
    momentum: float = 0.9


def inv_learning_rate(iteration, hyper):
    """The "inv" policy: base_lr * (1 + gamma * iter) ** -power."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    return hyper.base_lr * (1.0 + hyper.gamma * iteration) ** (-hyper.power)


def sgd_step(params, grads, iteration, hyper, velocity=None):
    """Momentum SGD. Returns ``(new_params, new_velocity)``; inputs are not modified.

    Parameters without a gradient (frozen layers) are returned unchanged.
    """
    lr = inv_learning_rate(iteration, hyper)
    velocity = velocity or {}
    new_params, new_velocity = {}, {}
    for key, p in params.items():
        g = grads.get(key)
        if g is None:
            new_params[key] = p
            continue
        v = velocity.get(key)
        v = -lr * g if v is None else hyper.momentum * v - lr * g
        v = v.astype(p.dtype)
        updated = p + v
        _ensure_finite(updated, f"sgd update of {key}")
        new_params[key], new_velocity[key] = updated, v
    return new_params, new_velocity


# --- GRADIENT CHECK ---


GRAD_CHECK_FLOOR = 1e-4


@dataclass
class GradCheckReport:
    max_rel_error: dict
    tolerance: float
    flagged: list

    @property
    def passed(self):
        return not self.flagged


def relative_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), GRAD_CHECK_FLOOR)
    return np.abs(analytic - numeric) / denom


def _xent_loss(net, x, labels):
    trace = forward(net, x, "eval")
    logits = logits_of(net, trace)
    loss, grad = loss_softmax_xent_batch(logits, labels)
    return loss, grad, trace


def grad_check(net, x, label, h=1e-5, tolerance=1e-4, analytic=None):
    """Compare backward against central differences of the cross-entropy loss.

    Runs on a 64-bit copy of ``net``. ``analytic`` replaces the computed
    gradients, which lets callers check a gradient produced elsewhere.
    """
    net64 = net.astype(np.float64).copy()
    x = np.asarray(x, dtype=np.float64)
    if x.shape == net64.input_shape:
        x = x[None]
    labels = np.broadcast_to(np.asarray(label, dtype=int), (x.shape[0],))
    _, d_logits, trace = _xent_loss(net64, x, labels)
    if analytic is None:
        analytic = backward(net64, trace, d_logits, wrt="logits").params

    errors, flagged = {}, []
    for (i, key), arr in net64.trainable_params().items():
        numeric = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            saved = arr[idx]
            arr[idx] = saved + h
            plus = _xent_loss(net64, x, labels)[0]
            arr[idx] = saved - h
            minus = _xent_loss(net64, x, labels)[0]
            arr[idx] = saved
            numeric[idx] = (plus - minus) / (2 * h)
        name = f"{net64.layer_name(i)}.{key}"
        err = float(relative_error(np.asarray(analytic[(i, key)]), numeric).max(initial=0.0))
        errors[name] = err
        if err > tolerance:
            flagged.append(name)
    logger.debug("gradient check: %d parameters, %d flagged", len(errors), len(flagged))
    return GradCheckReport(max_rel_error=errors, tolerance=tolerance, flagged=flagged)
