"""Feedforward networks with hand-written backpropagation.

Layers are dense, 1-D/2-D convolutions (channels last), average pooling,
nearest-neighbour upsampling and flatten. Batches are always the leading axis.

The backward pass follows the layer recursion: a deviation vector ``delta``
(derivative of the batch cost with respect to the pre-activations ``z`` of a
layer) yields that layer's parameter gradients, is pulled back through the
weights, and is multiplied by ``f'(z)`` of the layer below.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .numkit import RngStream

ACTIVATIONS = ("sigmoid", "relu", "linear", "softmax")
LOSSES = ("quadratic", "categorical_cross_entropy")
CHECKPOINT_VERSION = 1

LOG_CLAMP = 1e-12


class ShapeError(ValueError):
    pass


class UnsupportedPairing(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    def __init__(self, layer, name):
        super().__init__(f"non-finite gradient in layer {layer} ({name})")
        self.layer = layer
        self.name = name


# ----------------------------------------------------------------- activations

def sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def activate(kind, z):
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "linear":
        return z
    if kind == "softmax":
        return softmax(z)
    raise ValueError(f"unknown activation {kind!r}")


def activation_derivative(kind, z, y):
    """Elementwise f'(z); y = f(z) is passed to avoid recomputation."""
    if kind == "sigmoid":
        return y * (1.0 - y)
    if kind == "relu":
        return (z > 0).astype(float)  # f'(0) := 0
    if kind == "linear":
        return np.ones_like(z)
    raise UnsupportedPairing(f"{kind} has no elementwise derivative")


# ---------------------------------------------------------------------- layers

def _shift(y, k, axis, periodic):
    """s[..., i, ...] = y[..., i - k, ...]; zero outside the range unless periodic."""
    if k == 0:
        return y
    if periodic:
        return np.roll(y, k, axis=axis)
    out = np.zeros_like(y)
    n = y.shape[axis]
    if abs(k) >= n:
        return out
    dst = [slice(None)] * y.ndim
    src = [slice(None)] * y.ndim
    if k > 0:
        dst[axis] = slice(k, None)
        src[axis] = slice(None, n - k)
    else:
        dst[axis] = slice(None, n + k)
        src[axis] = slice(-k, None)
    out[tuple(dst)] = y[tuple(src)]
    return out


class Layer:
    kind = "layer"
    activation = "linear"
    dropout = 0.0

    def __init__(self):
        self.params = {}

    def output_shape(self, input_shape):
        return input_shape

    def init_params(self, input_shape, rng):
        pass

    def linear(self, y):
        raise NotImplementedError

    def backward(self, delta, y):
        """Return (param grads, dC/dy) given delta = dC/dz and layer input y."""
        raise NotImplementedError

    def spec(self):
        return {"kind": self.kind, "activation": self.activation}


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in, n_out, activation="linear", use_bias=True, dropout=0.0):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        self.n_in, self.n_out = int(n_in), int(n_out)
        self.activation = activation
        self.use_bias = use_bias
        self.dropout = dropout

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.n_in,):
            raise ShapeError(f"dense layer expects input ({self.n_in},), got {tuple(input_shape)}")
        return (self.n_out,)

    def init_params(self, input_shape, rng):
        self.params["w"] = rng.normal(0.0, 1.0 / np.sqrt(self.n_in), (self.n_out, self.n_in))
        if self.use_bias:
            self.params["b"] = np.zeros(self.n_out)

    def linear(self, y):
        z = y @ self.params["w"].T
        if self.use_bias:
            z = z + self.params["b"]
        return z

    def backward(self, delta, y):
        grads = {"w": delta.T @ y}
        if self.use_bias:
            grads["b"] = delta.sum(axis=0)
        return grads, delta @ self.params["w"]

    def spec(self):
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out,
                "activation": self.activation, "use_bias": self.use_bias, "dropout": self.dropout}


class _Conv(Layer):
    ndim = 1

    def __init__(self, channels_in, channels_out, half_width, activation="linear", padding="zero"):
        super().__init__()
        if padding not in ("zero", "periodic"):
            raise ValueError("padding must be 'zero' or 'periodic'")
        if activation not in ACTIVATIONS or activation == "softmax":
            raise ValueError(f"activation {activation!r} not allowed on a convolution")
        self.c_in, self.c_out = int(channels_in), int(channels_out)
        self.d = int(half_width)
        self.activation = activation
        self.padding = padding

    def output_shape(self, input_shape):
        if len(input_shape) != self.ndim + 1 or input_shape[-1] != self.c_in:
            raise ShapeError(f"{self.kind} expects {self.ndim} spatial axes and {self.c_in} channels, "
                             f"got {tuple(input_shape)}")
        return tuple(input_shape[:-1]) + (self.c_out,)

    def init_params(self, input_shape, rng):
        k = 2 * self.d + 1
        fan_in = k**self.ndim * self.c_in
        self.params["w"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (k,) * self.ndim + (self.c_in, self.c_out))
        self.params["b"] = np.zeros(self.c_out)

    def _offsets(self):
        r = range(-self.d, self.d + 1)
        if self.ndim == 1:
            return [(k,) for k in r]
        return [(kx, ky) for kx in r for ky in r]

    def _move(self, y, offs):
        for ax, k in enumerate(offs):
            y = _shift(y, k, axis=1 + ax, periodic=self.padding == "periodic")
        return y

    def linear(self, y):
        w = self.params["w"]
        z = np.zeros(y.shape[:-1] + (self.c_out,))
        for offs in self._offsets():
            idx = tuple(k + self.d for k in offs)
            z += self._move(y, offs) @ w[idx]
        return z + self.params["b"]

    def backward(self, delta, y):
        w = self.params["w"]
        gw = np.zeros_like(w)
        dy = np.zeros_like(y)
        flat_d = delta.reshape(-1, self.c_out)
        for offs in self._offsets():
            idx = tuple(k + self.d for k in offs)
            gw[idx] = self._move(y, offs).reshape(-1, self.c_in).T @ flat_d
            dy += self._move(delta @ w[idx].T, tuple(-k for k in offs))
        return {"w": gw, "b": flat_d.sum(axis=0)}, dy

    def spec(self):
        return {"kind": self.kind, "channels_in": self.c_in, "channels_out": self.c_out,
                "half_width": self.d, "activation": self.activation, "padding": self.padding}


class Conv1D(_Conv):
    kind = "conv1d"
    ndim = 1


class Conv2D(_Conv):
    kind = "conv2d"
    ndim = 2


class AvgPool(Layer):
    """Average over disjoint blocks along every spatial axis (1-D or 2-D)."""
    kind = "avg_pool"

    def __init__(self, block):
        super().__init__()
        self.block = int(block)

    def output_shape(self, input_shape):
        spatial = input_shape[:-1]
        if len(spatial) not in (1, 2) or any(s % self.block for s in spatial):
            raise ShapeError(f"pool block {self.block} must divide spatial extent {tuple(spatial)}")
        return tuple(s // self.block for s in spatial) + (input_shape[-1],)

    def linear(self, y):
        b = self.block
        if y.ndim == 3:
            B, L, C = y.shape
            return y.reshape(B, L // b, b, C).mean(axis=2)
        B, H, W, C = y.shape
        return y.reshape(B, H // b, b, W // b, b, C).mean(axis=(2, 4))

    def backward(self, delta, y):
        b = self.block
        if y.ndim == 3:
            return {}, np.repeat(delta, b, axis=1) / b
        return {}, np.repeat(np.repeat(delta, b, axis=1), b, axis=2) / (b * b)

    def spec(self):
        return {"kind": self.kind, "block": self.block, "activation": "linear"}


class Upsample(Layer):
    """Nearest-neighbour upsampling, the decoder counterpart of pooling."""
    kind = "upsample"

    def __init__(self, block):
        super().__init__()
        self.block = int(block)

    def output_shape(self, input_shape):
        spatial = input_shape[:-1]
        if len(spatial) not in (1, 2):
            raise ShapeError("upsample needs 1 or 2 spatial axes")
        return tuple(s * self.block for s in spatial) + (input_shape[-1],)

    def linear(self, y):
        out = y
        for ax in range(1, y.ndim - 1):
            out = np.repeat(out, self.block, axis=ax)
        return out

    def backward(self, delta, y):
        b = self.block
        if y.ndim == 3:
            B, L, C = y.shape
            return {}, delta.reshape(B, L, b, C).sum(axis=2)
        B, H, W, C = y.shape
        return {}, delta.reshape(B, H, b, W, b, C).sum(axis=(2, 4))

    def spec(self):
        return {"kind": self.kind, "block": self.block, "activation": "linear"}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def linear(self, y):
        return y.reshape(y.shape[0], -1)

    def backward(self, delta, y):
        return {}, delta.reshape(y.shape)


LAYER_TYPES = {cls.kind: cls for cls in (Dense, Conv1D, Conv2D, AvgPool, Upsample, Flatten)}


def layer_from_spec(spec):
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "dense":
        return Dense(spec["n_in"], spec["n_out"], spec["activation"],
                     spec.get("use_bias", True), spec.get("dropout", 0.0))
    if kind in ("conv1d", "conv2d"):
        return LAYER_TYPES[kind](spec["channels_in"], spec["channels_out"], spec["half_width"],
                                 spec["activation"], spec.get("padding", "zero"))
    if kind in ("avg_pool", "upsample"):
        return LAYER_TYPES[kind](spec["block"])
    if kind == "flatten":
        return Flatten()
    raise ValueError(f"unknown layer kind {kind!r}")


# --------------------------------------------------------------------- network

@dataclass
class ForwardTrace:
    """Per-layer pre-activations ``zs`` and activations ``ys`` (``ys[0]`` is the input)."""
    zs: list
    ys: list
    masks: list = field(default_factory=list)

    @property
    def output(self):
        return self.ys[-1]


class Network:
    def __init__(self, layers, input_shape, rng=None, seed=0):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        for i, layer in enumerate(self.layers):
            if layer.activation == "softmax" and i != len(self.layers) - 1:
                raise ValueError("softmax is only permitted on the output layer")
        rng = rng if rng is not None else RngStream(seed)
        shape = self.input_shape
        self.shapes = [shape]
        for layer in self.layers:
            layer.init_params(shape, rng.gen)
            shape = layer.output_shape(shape)
            self.shapes.append(shape)

    @classmethod
    def dense(cls, sizes, activations, rng=None, seed=0, use_bias=True):
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per weight layer")
        layers = [Dense(a, b, act, use_bias=use_bias) for a, b, act in zip(sizes[:-1], sizes[1:], activations)]
        return cls(layers, (sizes[0],), rng=rng, seed=seed)

    @property
    def output_shape(self):
        return self.shapes[-1]

    def forward(self, x, train=False, rng=None) -> ForwardTrace:
        x = np.asarray(x, dtype=float)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"input batch shape {x.shape[1:]} does not match network input {self.input_shape}")
        zs, ys, masks = [], [x], []
        y = x
        for layer in self.layers:
            z = layer.linear(y)
            y = activate(layer.activation, z)
            mask = None
            if train and layer.dropout > 0.0:
                if rng is None:
                    raise ValueError("dropout at train time needs an rng")
                keep = 1.0 - layer.dropout
                mask = (rng.uniform(y.shape) < keep) / keep
                y = y * mask
            zs.append(z)
            ys.append(y)
            masks.append(mask)
        return ForwardTrace(zs, ys, masks)

    def predict(self, x):
        return self.forward(x).output

    # parameters ------------------------------------------------------------
    def parameters(self):
        """(layer index, name, array) for every parameter array, in θ order."""
        return [(i, name, layer.params[name]) for i, layer in enumerate(self.layers)
                for name in sorted(layer.params)]

    def n_params(self):
        return sum(p.size for _, _, p in self.parameters())

    def get_flat(self):
        return np.concatenate([p.ravel() for _, _, p in self.parameters()]) if self.parameters() else np.zeros(0)

    def set_flat(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_params():
            raise ShapeError("parameter vector has the wrong length")
        pos = 0
        for i, name, p in self.parameters():
            self.layers[i].params[name] = theta[pos:pos + p.size].reshape(p.shape).copy()
            pos += p.size

    def copy(self):
        return copy.deepcopy(self)

    # serialization ---------------------------------------------------------
    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "layers": [layer.spec() for layer in self.layers],
            "params": [{name: _array_to_json(layer.params[name]) for name in sorted(layer.params)}
                       for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        layers = [layer_from_spec(s) for s in d["layers"]]
        net = cls(layers, tuple(d["input_shape"]))
        for layer, params in zip(net.layers, d["params"]):
            for name, arr in params.items():
                layer.params[name] = _array_from_json(arr)
        return net


def flatten_grads(grads):
    return np.concatenate([g[name].ravel() for g in grads for name in sorted(g)]) if grads else np.zeros(0)


def _array_to_json(a):
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _array_from_json(d):
    return np.array(d["data"], dtype=float).reshape(d["shape"])


# ---------------------------------------------------------------------- losses

class LossStats:
    """Counts how often cross-entropy inputs had to be clamped before the log."""
    clamped = 0


def loss_eval(output, target, loss):
    """Batch mean of the per-sample cost."""
    output = np.asarray(output, dtype=float)
    target = np.asarray(target, dtype=float)
    if output.shape != target.shape:
        raise ShapeError(f"output {output.shape} and target {target.shape} differ")
    B = output.shape[0]
    if loss == "quadratic":
        return float(np.sum((output - target) ** 2) / B)
    if loss == "categorical_cross_entropy":
        small = output < LOG_CLAMP
        if np.any(small):
            LossStats.clamped += int(small.sum())
        return float(-np.sum(target * np.log(np.maximum(output, LOG_CLAMP))) / B)
    raise ValueError(f"unknown loss {loss!r}")


def output_delta(net, trace, target, loss):
    """dC/dz at the output layer for the batch-mean cost."""
    out_layer = net.layers[-1]
    y, z = trace.output, trace.zs[-1]
    target = np.asarray(target, dtype=float)
    if target.shape != y.shape:
        raise ShapeError(f"target {target.shape} not congruent to output {y.shape}")
    B = y.shape[0]
    if loss == "quadratic":
        if out_layer.activation == "softmax":
            raise UnsupportedPairing("softmax output with quadratic loss is not supported")
        dy = 2.0 * (y - target) / B
        if trace.masks and trace.masks[-1] is not None:
            dy = dy * trace.masks[-1]
        return dy * activation_derivative(out_layer.activation, z, activate(out_layer.activation, z))
    if loss == "categorical_cross_entropy":
        if out_layer.activation != "softmax":
            raise UnsupportedPairing("categorical cross-entropy requires a softmax output")
        # fused softmax + cross-entropy; general (unnormalised) targets allowed
        P = y.reshape(B, -1)
        t = target.reshape(B, -1)
        return ((P * t.sum(axis=1, keepdims=True) - t) / B).reshape(y.shape)
    raise ValueError(f"unknown loss {loss!r}")


def backprop_delta(net, trace, delta):
    """Pull an output deviation vector back through the network.

    Returns a list (one entry per layer) of gradient dicts keyed like ``layer.params``.
    """
    grads = [None] * len(net.layers)
    for n in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[n]
        g, dy = layer.backward(delta, trace.ys[n])
        grads[n] = g
        if n > 0:
            below = net.layers[n - 1]
            mask = trace.masks[n - 1] if trace.masks else None
            if mask is not None:
                dy = dy * mask
            z = trace.zs[n - 1]
            delta = dy * activation_derivative(below.activation, z, activate(below.activation, z))
    return grads


def backprop(net, trace, target, loss):
    """Gradient of the batch-mean cost with respect to every parameter."""
    return backprop_delta(net, trace, output_delta(net, trace, target, loss))


# ------------------------------------------------------------------ optimizers

class SGD:
    tag = "sgd"

    def __init__(self, lr=0.1):
        self.lr = lr
        self.steps = 0

    def _check(self, net, grads):
        if len(grads) != len(net.layers):
            raise ShapeError("gradient list does not match the network")
        for i, g in enumerate(grads):
            for name, arr in g.items():
                if arr.shape != net.layers[i].params[name].shape:
                    raise ShapeError(f"gradient for layer {i} {name} has shape {arr.shape}")
                if not np.all(np.isfinite(arr)):
                    raise NonFiniteGradient(i, name)

    def step(self, net, grads):
        self._check(net, grads)
        for i, g in enumerate(grads):
            for name, arr in g.items():
                net.layers[i].params[name] = net.layers[i].params[name] - self.lr * arr
        self.steps += 1

    def state_dict(self):
        return {"tag": self.tag, "lr": self.lr, "steps": self.steps}


class Adam(SGD):
    tag = "adam"

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = None
        self.v = None

    def step(self, net, grads):
        self._check(net, grads)
        if self.m is None:
            self.m = [{k: np.zeros_like(v) for k, v in layer.params.items()} for layer in net.layers]
            self.v = [{k: np.zeros_like(v) for k, v in layer.params.items()} for layer in net.layers]
        self.steps += 1
        t = self.steps
        for i, g in enumerate(grads):
            for name, arr in g.items():
                m = self.m[i][name] = self.beta1 * self.m[i][name] + (1 - self.beta1) * arr
                v = self.v[i][name] = self.beta2 * self.v[i][name] + (1 - self.beta2) * arr * arr
                mhat = m / (1 - self.beta1**t)
                vhat = v / (1 - self.beta2**t)
                net.layers[i].params[name] = net.layers[i].params[name] - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self):
        d = {"tag": self.tag, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
             "eps": self.eps, "steps": self.steps}
        if self.m is not None:
            d["m"] = [{k: _array_to_json(a) for k, a in layer.items()} for layer in self.m]
            d["v"] = [{k: _array_to_json(a) for k, a in layer.items()} for layer in self.v]
        return d


def optimizer_from_state(d):
    if d["tag"] == "sgd":
        opt = SGD(d["lr"])
    elif d["tag"] == "adam":
        opt = Adam(d["lr"], d["beta1"], d["beta2"], d["eps"])
        if "m" in d:
            opt.m = [{k: _array_from_json(a) for k, a in layer.items()} for layer in d["m"]]
            opt.v = [{k: _array_from_json(a) for k, a in layer.items()} for layer in d["v"]]
    else:
        raise ValueError(f"unknown optimizer {d['tag']!r}")
    opt.steps = d["steps"]
    return opt


def make_optimizer(name, lr=None):
    if name == "sgd":
        return SGD(0.1 if lr is None else lr)
    if name == "adam":
        return Adam(1e-3 if lr is None else lr)
    raise ValueError(f"unknown optimizer {name!r}")


# -------------------------------------------------------------------- training

def train_on_batch(net, x, y_target, loss, optimizer, rng=None):
    """One forward/backward/update; returns the batch loss before the update."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    trace = net.forward(x, train=rng is not None, rng=rng)
    value = loss_eval(trace.output, y_target, loss)
    optimizer.step(net, backprop(net, trace, y_target, loss))
    return value


def fit_with_validation(net, x, y, loss, optimizer, split_fraction=0.2, patience=5,
                        epochs=100, batch_size=32, rng=None):
    """Train with a held-out validation split and early stopping.

    Returns ``(best_net, curves)`` where ``best_net`` is the checkpoint with the
    lowest validation loss and ``curves`` holds per-epoch train/val losses.
    """
    if not 0.0 < split_fraction < 1.0:
        raise ValueError("split_fraction must lie strictly between 0 and 1")
    rng = rng if rng is not None else RngStream(0)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.shape[0]
    n_val = int(round(split_fraction * n))
    if n_val == 0 or n_val == n:
        raise ValueError("validation split is empty (or leaves no training data)")
    perm = rng.permutation(n)
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    xv, yv = x[val_idx], y[val_idx]

    best = net.copy()
    best_val = loss_eval(net.predict(xv), yv, loss)
    curves = {"epoch": [], "train_loss": [], "val_loss": [], "stopped_early": False, "best_epoch": 0}
    wait = 0
    for epoch in range(1, epochs + 1):
        order = tr_idx[rng.permutation(tr_idx.size)]
        losses = []
        for start in range(0, order.size, batch_size):
            idx = order[start:start + batch_size]
            losses.append(train_on_batch(net, x[idx], y[idx], loss, optimizer))
        val = loss_eval(net.predict(xv), yv, loss)
        curves["epoch"].append(epoch)
        curves["train_loss"].append(float(np.mean(losses)))
        curves["val_loss"].append(val)
        if val < best_val:
            best_val, best, wait = val, net.copy(), 0
            curves["best_epoch"] = epoch
        else:
            wait += 1
            if wait > patience:
                curves["stopped_early"] = True
                break
    return best, curves


# ------------------------------------------------------------------ checkpoint

def save_checkpoint(path, net, optimizer=None, extra=None):
    doc = {"format_version": CHECKPOINT_VERSION, "kind": "network", "network": net.to_dict(),
           "optimizer": optimizer.state_dict() if optimizer is not None else None}
    if extra:
        doc["extra"] = extra
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_VERSION or doc.get("kind") != "network":
        raise ValueError("not a network checkpoint of a supported version")
    net = Network.from_dict(doc["network"])
    opt = optimizer_from_state(doc["optimizer"]) if doc.get("optimizer") else None
    return net, opt


# ------------------------------------------------------------- gradient check

def numerical_gradient(net, x, target, loss, h=1e-5):
    """Central finite differences of the batch loss with respect to theta."""
    theta0 = net.get_flat()
    g = np.zeros_like(theta0)
    for k in range(theta0.size):
        th = theta0.copy()
        th[k] += h
        net.set_flat(th)
        up = loss_eval(net.predict(x), target, loss)
        th[k] -= 2 * h
        net.set_flat(th)
        down = loss_eval(net.predict(x), target, loss)
        g[k] = (up - down) / (2 * h)
    net.set_flat(theta0)
    return g


def gradient_check(net, x, target, loss, h=1e-5):
    """Max scale-aware relative error |g_a - g_n| / max(1, |g_a|, |g_n|) over theta."""
    analytic = flatten_grads(backprop(net, net.forward(x), target, loss))
    numeric = numerical_gradient(net, x, target, loss, h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(err.max(initial=0.0)), analytic, numeric


def random_architecture(rng: RngStream):
    """A small random network, input batch and target covering the layer kinds
    and activation/loss pairings. Returns (net, x, target, loss, description)."""
    gen = rng.gen
    kind = ["dense", "conv1d", "conv2d"][int(gen.integers(3))]
    loss = "categorical_cross_entropy" if gen.random() < 0.35 else "quadratic"
    hidden_acts = ["sigmoid", "relu", "linear"]
    out_act = "softmax" if loss == "categorical_cross_entropy" else hidden_acts[int(gen.integers(3))]
    n_out = int(gen.integers(2, 5))
    if kind == "dense":
        depth = int(gen.integers(1, 5))
        sizes = [int(gen.integers(1, 7))] + [int(gen.integers(2, 7)) for _ in range(depth - 1)] + [n_out]
        acts = [hidden_acts[int(gen.integers(3))] for _ in range(depth - 1)] + [out_act]
        layers = [Dense(a, b, f) for a, b, f in zip(sizes[:-1], sizes[1:], acts)]
        shape = (sizes[0],)
        desc = f"dense {sizes} {acts}"
    elif kind == "conv1d":
        L, cin, cout = 8, int(gen.integers(1, 3)), int(gen.integers(1, 3))
        pad = "periodic" if gen.random() < 0.5 else "zero"
        act = hidden_acts[int(gen.integers(3))]
        layers = [Conv1D(cin, cout, int(gen.integers(1, 3)), act, pad), AvgPool(2), Flatten(),
                  Dense(L // 2 * cout, n_out, out_act)]
        shape = (L, cin)
        desc = f"conv1d L={L} {cin}->{cout} {act} {pad} pool2 dense->{n_out} {out_act}"
    else:
        act = hidden_acts[int(gen.integers(3))]
        layers = [Conv2D(1, 2, 1, act), AvgPool(2), Flatten(), Dense(8, n_out, out_act)]
        shape = (4, 4, 1)
        desc = f"conv2d 4x4 1->2 {act} pool2 dense->{n_out} {out_act}"
    net = Network(layers, shape, rng=rng)
    # zero biases behind a dead ReLU layer put the next ReLU exactly on its kink,
    # where finite differences and the one-sided derivative disagree
    for layer in net.layers:
        if "b" in layer.params:
            layer.params["b"][...] = 0.1 * gen.normal(size=layer.params["b"].shape)
    B = 3
    # central differences are only meaningful away from ReLU kinks; redraw the
    # inputs until every ReLU pre-activation keeps a margin of 1e-3
    for _ in range(100):
        x = gen.normal(size=(B, *shape))
        trace = net.forward(x)
        margin = min((np.abs(z).min() for layer, z in zip(net.layers, trace.zs)
                      if layer.activation == "relu"), default=np.inf)
        if margin > 1e-3:
            break
    if loss == "categorical_cross_entropy":
        target = gen.random((B, n_out))
        target /= target.sum(axis=1, keepdims=True)
    else:
        target = gen.normal(size=(B, n_out))
    return net, x, target, loss, f"{desc} loss={loss}"
