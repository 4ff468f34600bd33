"""Minimal feed-forward engine with exact hand-derived gradients.

Every architecture in this package is a short sequential stack of Dense,
ReLU, BatchNorm, and residual blocks, so backpropagation is written out
explicitly instead of going through a general autodiff graph. Batches are
row-major: shape (n, features), float64 throughout.

Forward passes return the activation caches; backward consumes them and
produces both parameter gradients and the input gradient (the latter is
load-bearing for the transport-cost gradient penalty).
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError, NumericsError, ShapeError, StateError
from .sampler import Pcg64Stream


class Dense:
    kind = "dense"

    def __init__(self, w, b):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise ShapeError("dense parameters inconsistent")

    @classmethod
    def create(cls, in_dim, out_dim):
        return cls(np.zeros((out_dim, in_dim)), np.zeros(out_dim))

    @property
    def in_dim(self):
        return self.w.shape[1]

    @property
    def out_dim(self):
        return self.w.shape[0]

    def forward(self, x, train):
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"dense expects width {self.in_dim}, got {x.shape[1]}")
        return x @ self.w.T + self.b, (x,)

    def backward(self, cache, dy):
        (x,) = cache
        dw = dy.T @ x
        db = dy.sum(axis=0)
        dx = dy @ self.w
        return dx, {"w": dw, "b": db}

    def params(self):
        return {"w": self.w, "b": self.b}

    def state(self):
        return {}

    def descriptor(self):
        return {"kind": self.kind, "in": self.in_dim, "out": self.out_dim}


class Relu:
    kind = "relu"

    def forward(self, x, train):
        mask = x > 0.0
        return np.where(mask, x, 0.0), (mask,)

    def backward(self, cache, dy):
        (mask,) = cache
        return np.where(mask, dy, 0.0), {}

    def params(self):
        return {}

    def state(self):
        return {}

    def descriptor(self):
        return {"kind": self.kind}


class BatchNorm:
    kind = "batchnorm"

    def __init__(self, width, momentum=0.1, eps=1e-5):
        self.gain = np.ones(width)
        self.shift = np.zeros(width)
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.momentum = float(momentum)
        self.eps = float(eps)

    @property
    def width(self):
        return self.gain.shape[0]

    def forward(self, x, train):
        if x.shape[1] != self.width:
            raise ShapeError(f"batchnorm expects width {self.width}, got {x.shape[1]}")
        if train:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean) * inv_std
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
            cache = ("train", xhat, inv_std)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean) * inv_std
            cache = ("eval", xhat, inv_std)
        return self.gain * xhat + self.shift, cache

    def backward(self, cache, dy):
        mode, xhat, inv_std = cache
        dgain = (dy * xhat).sum(axis=0)
        dshift = dy.sum(axis=0)
        dxhat = dy * self.gain
        if mode == "eval":
            dx = dxhat * inv_std
        else:
            n = dy.shape[0]
            dx = (inv_std / n) * (
                n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
            )
        return dx, {"gain": dgain, "shift": dshift}

    def params(self):
        return {"gain": self.gain, "shift": self.shift}

    def state(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def descriptor(self):
        return {"kind": self.kind, "width": self.width,
                "momentum": self.momentum, "eps": self.eps}


class ResidualBlock:
    """y = x + inner(x) for an inner sequential stack of equal width."""

    kind = "residual"

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, train):
        h = x
        caches = []
        for layer in self.layers:
            h, c = layer.forward(h, train)
            caches.append(c)
        if h.shape != x.shape:
            raise ShapeError("residual inner stack must preserve width")
        return x + h, (caches,)

    def backward(self, cache, dy):
        (caches,) = cache
        grads = [None] * len(self.layers)
        d = dy
        for i in range(len(self.layers) - 1, -1, -1):
            d, g = self.layers[i].backward(caches[i], d)
            grads[i] = g
        return dy + d, {"layers": grads}

    def params(self):
        return {"layers": [layer.params() for layer in self.layers]}

    def state(self):
        return {"layers": [layer.state() for layer in self.layers]}

    def descriptor(self):
        return {"kind": self.kind, "layers": [l.descriptor() for l in self.layers]}


_LAYER_KINDS = {"dense": Dense, "relu": Relu, "batchnorm": BatchNorm,
                "residual": ResidualBlock}


class Network:
    """Ordered layer stack with explicit caches."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x, train)
            caches.append(c)
        return (x[0] if squeeze else x), caches

    def backward(self, caches, dy):
        if len(caches) != len(self.layers):
            raise StateError("forward cache does not match the layer stack")
        dy = np.asarray(dy, dtype=np.float64)
        if dy.ndim == 1:
            dy = dy[None, :]
        grads = [None] * len(self.layers)
        d = dy
        for i in range(len(self.layers) - 1, -1, -1):
            d, g = self.layers[i].backward(caches[i], d)
            grads[i] = g
        return d, grads

    # -- parameter plumbing --------------------------------------------------

    def param_arrays(self):
        """Flat list of parameter arrays in a stable order."""
        out = []
        for layer in self.layers:
            _collect(layer.params(), out)
        return out

    def state_arrays(self):
        out = []
        for layer in self.layers:
            _collect(layer.state(), out)
        return out

    def flatten_grads(self, grads):
        """Flatten a backward() grads structure to align with param_arrays()."""
        out = []
        for layer, g in zip(self.layers, grads):
            _collect_grads(layer, g, out)
        return out

    def param_count(self):
        return sum(a.size for a in self.param_arrays())

    def descriptor(self):
        return [layer.descriptor() for layer in self.layers]

    @classmethod
    def from_descriptor(cls, desc):
        return cls([_layer_from_descriptor(d) for d in desc])


def _collect(tree, out):
    if isinstance(tree, dict):
        for key in sorted(tree):
            val = tree[key]
            if isinstance(val, list):
                for item in val:
                    _collect(item, out)
            else:
                out.append(val)


def _collect_grads(layer, g, out):
    if isinstance(layer, ResidualBlock):
        for inner, ig in zip(layer.layers, g["layers"]):
            _collect_grads(inner, ig, out)
    else:
        for key in sorted(layer.params()):
            out.append(g[key])


def _layer_from_descriptor(d):
    kind = d["kind"]
    if kind == "dense":
        return Dense.create(d["in"], d["out"])
    if kind == "relu":
        return Relu()
    if kind == "batchnorm":
        return BatchNorm(d["width"], momentum=d["momentum"], eps=d["eps"])
    if kind == "residual":
        return ResidualBlock([_layer_from_descriptor(x) for x in d["layers"]])
    raise FormatError(f"unknown layer kind {kind!r}")


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def init_network(net: Network, seed: int) -> Network:
    """He fan-in initialization of all Dense weights; biases stay zero."""
    stream = Pcg64Stream(seed)
    counter = [0]

    def visit(layers):
        for layer in layers:
            if isinstance(layer, Dense):
                fan_in = layer.in_dim
                sub = stream.substream("dense", counter[0])
                layer.w[:] = sub.normal(layer.w.shape) * np.sqrt(2.0 / fan_in)
                layer.b[:] = 0.0
                counter[0] += 1
            elif isinstance(layer, ResidualBlock):
                visit(layer.layers)
    visit(net.layers)
    return net


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over a fixed flat list of parameter arrays."""

    def __init__(self, param_arrays, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in param_arrays]
        self.v = [np.zeros_like(p) for p in param_arrays]

    def step(self, param_arrays, grad_arrays):
        if len(param_arrays) != len(self.m) or len(grad_arrays) != len(self.m):
            raise ShapeError("optimizer state does not match the parameter list")
        for g in grad_arrays:
            if not np.all(np.isfinite(g)):
                raise NumericsError("non-finite gradient; step aborted")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(param_arrays, grad_arrays, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# Checkpoints: magic "IDMN", version, JSON header, float64 LE payload
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"IDMN"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHI")


def save_checkpoint(path, networks: dict, sampler_hash: str, metadata: dict):
    """Persist named networks plus metadata.

    Payload order: for each network in dict order, parameter arrays then
    state arrays, each float64 little-endian, shapes recorded in the header.
    """
    header = {
        "sampler_hash": sampler_hash,
        "metadata": metadata,
        "networks": {},
    }
    payload = []
    for name, net in networks.items():
        arrays = net.param_arrays() + net.state_arrays()
        header["networks"][name] = {
            "descriptor": net.descriptor(),
            "shapes": [list(a.shape) for a in arrays],
        }
        payload.extend(arrays)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for a in payload:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`.

    Returns (networks, sampler_hash, metadata).
    """
    with open(path, "rb") as fh:
        head = fh.read(_CKPT_HEADER.size)
        if len(head) < _CKPT_HEADER.size:
            raise FormatError("checkpoint header incomplete", offset=len(head))
        magic, version, blob_len = _CKPT_HEADER.unpack(head)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError("bad checkpoint magic", offset=0)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", offset=4)
        blob = fh.read(blob_len)
        if len(blob) < blob_len:
            raise FormatError("checkpoint header truncated", offset=_CKPT_HEADER.size + len(blob))
        header = json.loads(blob.decode("utf-8"))
        networks = {}
        for name, rec in header["networks"].items():
            net = Network.from_descriptor(rec["descriptor"])
            arrays = net.param_arrays() + net.state_arrays()
            if len(arrays) != len(rec["shapes"]):
                raise FormatError(f"array count mismatch for network {name!r}")
            for a, shape in zip(arrays, rec["shapes"]):
                n = int(np.prod(shape)) if shape else 1
                buf = fh.read(8 * n)
                if len(buf) < 8 * n:
                    raise FormatError("checkpoint payload truncated",
                                      offset=fh.tell() - len(buf))
                a[:] = np.frombuffer(buf, dtype="<f8").reshape(shape)
            networks[name] = net
    return networks, header["sampler_hash"], header["metadata"]
