"""Small dense-network engine with manual backprop, batch norm and Adam.

Everything is float64.  Weights are stored (out, in); a forward pass on a
(batch, in) matrix caches what ``backward`` needs, and any parameter change
invalidates that cache.
"""
from __future__ import annotations

import io
import json
import struct

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "identity")
_MAGIC = b"AOIMLP1\n"


class StaleCacheError(RuntimeError):
    pass


def sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z, axis=-1):
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


class Dense:
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, activation: str = "relu", rng=None,
                 softmax_groups=()):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = np.random.default_rng() if rng is None else rng
        bound = 1.0 / np.sqrt(n_in)
        self.n_in, self.n_out, self.activation = n_in, n_out, activation
        self.softmax_groups = tuple((int(a), int(b)) for a, b in softmax_groups)
        for a, b in self.softmax_groups:
            if not 0 <= a < b <= n_out:
                raise ValueError("softmax group out of range")
        self.W = rng.uniform(-bound, bound, size=(n_out, n_in))
        self.b = rng.uniform(-bound, bound, size=n_out)

    def params(self):
        return [self.W, self.b]

    def buffers(self):
        return []

    def describe(self) -> dict:
        return {"type": "dense", "n_in": self.n_in, "n_out": self.n_out,
                "activation": self.activation, "softmax_groups": [list(g) for g in self.softmax_groups]}

    def forward(self, x, mode, update_stats):
        z = x @ self.W.T + self.b
        if self.activation == "relu":
            y = np.maximum(z, 0.0)
        elif self.activation == "sigmoid":
            y = sigmoid(z)
        else:
            y = z.copy() if self.softmax_groups else z
        for a, b in self.softmax_groups:
            y[:, a:b] = softmax(z[:, a:b])
        return y, (x, z, y)

    def backward(self, dy, cache):
        x, z, y = cache
        if self.activation == "relu":
            dz = dy * (z > 0)
        elif self.activation == "sigmoid":
            dz = dy * y * (1.0 - y)
        else:
            dz = dy.copy() if self.softmax_groups else dy
        for a, b in self.softmax_groups:
            yg, dg = y[:, a:b], dy[:, a:b]
            dz[:, a:b] = yg * (dg - (dg * yg).sum(axis=1, keepdims=True))
        return [dz.T @ x, dz.sum(axis=0)], dz @ self.W


class BatchNorm:
    kind = "bn"

    def __init__(self, n: int, momentum: float = 0.9, eps: float = 1e-5):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.n, self.momentum, self.eps = n, momentum, eps
        self.gamma = np.ones(n)
        self.beta = np.zeros(n)
        self.running_mean = np.zeros(n)
        self.running_var = np.ones(n)

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [self.running_mean, self.running_var]

    def describe(self) -> dict:
        return {"type": "bn", "n": self.n, "momentum": self.momentum, "eps": self.eps}

    def forward(self, x, mode, update_stats):
        if mode == "train":
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            if update_stats:
                # biased variance, so infer mode reproduces train mode on a repeated batch
                m = self.momentum
                self.running_mean *= m
                self.running_mean += (1 - m) * mu
                self.running_var *= m
                self.running_var += (1 - m) * var
        else:
            mu, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        return self.gamma * xhat + self.beta, (mode, xhat, inv)

    def backward(self, dy, cache):
        mode, xhat, inv = cache
        dgamma = (dy * xhat).sum(axis=0)
        dbeta = dy.sum(axis=0)
        dxhat = dy * self.gamma
        if mode == "train":
            n = dy.shape[0]
            dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv
        return [dgamma, dbeta], dx


_PARAM_ATTRS = {"dense": ("W", "b"), "bn": ("gamma", "beta")}
_BUFFER_ATTRS = {"dense": (), "bn": ("running_mean", "running_var")}


def _pack(layers, attrs) -> np.ndarray:
    """Moves the named arrays of every layer into one flat buffer of views."""
    owned = [(l, a) for l in layers for a in attrs[l.kind]]
    flat = np.concatenate([getattr(l, a).ravel() for l, a in owned]) if owned else np.zeros(0)
    k = 0
    for l, a in owned:
        shape = getattr(l, a).shape
        size = int(np.prod(shape))
        setattr(l, a, flat[k:k + size].reshape(shape))
        k += size
    return flat


class Mlp:
    """Ordered stack of Dense / BatchNorm layers with Adam state.

    Parameters (and BN running statistics) live in single flat buffers the
    layers hold views into, so optimizer and target blends are one array op.
    """

    def __init__(self, layers):
        self.layers = list(layers)
        dims = [l.n_in if l.kind == "dense" else l.n for l in self.layers]
        outs = [l.n_out if l.kind == "dense" else l.n for l in self.layers]
        for k in range(1, len(self.layers)):
            if dims[k] != outs[k - 1]:
                raise ValueError(f"layer {k} expects {dims[k]} inputs, previous gives {outs[k - 1]}")
        self.n_in, self.n_out = dims[0], outs[-1]
        self.flat_params = _pack(self.layers, _PARAM_ATTRS)
        self.flat_buffers = _pack(self.layers, _BUFFER_ATTRS)
        self.adam_m = np.zeros_like(self.flat_params)
        self.adam_v = np.zeros_like(self.flat_params)
        self.adam_t = 0
        self.version = 0
        self._cache = None

    # -- parameter access -------------------------------------------------
    def params(self) -> list[np.ndarray]:
        return [p for l in self.layers for p in l.params()]

    def buffers(self) -> list[np.ndarray]:
        return [b for l in self.layers for b in l.buffers()]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def get_flat(self) -> np.ndarray:
        return self.flat_params.copy()

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != self.flat_params.shape:
            raise ValueError("flat parameter vector has the wrong length")
        self.flat_params[...] = flat
        self.version += 1

    def unflatten(self, flat) -> list[np.ndarray]:
        """Splits a flat vector into arrays shaped like ``params()``."""
        out, k = [], 0
        for p in self.params():
            out.append(flat[k:k + p.size].reshape(p.shape))
            k += p.size
        return out

    def moments(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        return self.unflatten(self.adam_m), self.unflatten(self.adam_v)

    def describe(self) -> list[dict]:
        return [l.describe() for l in self.layers]

    def copy(self) -> "Mlp":
        new = Mlp.from_description(self.describe())
        for name in ("flat_params", "flat_buffers", "adam_m", "adam_v"):
            getattr(new, name)[...] = getattr(self, name)
        new.adam_t = self.adam_t
        return new

    @classmethod
    def from_description(cls, desc, rng=None) -> "Mlp":
        layers = []
        for d in desc:
            if d["type"] == "dense":
                layers.append(Dense(d["n_in"], d["n_out"], d["activation"], rng, d.get("softmax_groups", ())))
            elif d["type"] == "bn":
                layers.append(BatchNorm(d["n"], d["momentum"], d["eps"]))
            else:
                raise ValueError(f"unknown layer type {d['type']!r}")
        return cls(layers)

    # -- passes -------------------------------------------------------------
    def forward(self, x, mode: str = "infer", update_stats: bool = True) -> np.ndarray:
        if mode not in ("train", "infer"):
            raise ValueError("mode must be 'train' or 'infer'")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"expected input of shape (batch, {self.n_in}), got {x.shape}")
        caches = []
        for l in self.layers:
            x, c = l.forward(x, mode, update_stats)
            caches.append(c)
        self._cache = (self.version, caches)
        return x

    __call__ = forward

    def backward(self, upstream) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of sum(upstream * output) w.r.t. every parameter and the input."""
        if self._cache is None or self._cache[0] != self.version:
            raise StaleCacheError("backward needs a forward pass on the current parameters")
        caches = self._cache[1]
        g = np.asarray(upstream, dtype=np.float64)
        grads: list[list[np.ndarray]] = []
        for l, c in zip(reversed(self.layers), reversed(caches)):
            gp, g = l.backward(g, c)
            grads.append(gp)
        flat = [gp for layer_grads in reversed(grads) for gp in layer_grads]
        return flat, g

    def adam_step(self, grads, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8) -> "Mlp":
        params = self.params()
        if isinstance(grads, np.ndarray) and grads.shape == self.flat_params.shape:
            g = grads
        else:
            if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
                raise ValueError("gradient shapes do not match parameters")
            g = np.concatenate([x.ravel() for x in grads])
        self.adam_t += 1
        c1 = 1.0 - beta1 ** self.adam_t
        c2 = 1.0 - beta2 ** self.adam_t
        m, v = self.adam_m, self.adam_v
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        self.flat_params -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        self.version += 1
        return self

    # -- serialisation --------------------------------------------------------
    def to_bytes(self, with_optimizer: bool = True) -> bytes:
        header = json.dumps({"layers": self.describe(), "adam_t": self.adam_t,
                             "optimizer": with_optimizer}).encode()
        arrays = [self.flat_params, self.flat_buffers]
        if with_optimizer:
            arrays += [self.adam_m, self.adam_v]
        body = np.concatenate(arrays).astype("<f8").tobytes()
        return _MAGIC + struct.pack("<I", len(header)) + header + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "Mlp":
        if not data.startswith(_MAGIC):
            raise ValueError("not a network checkpoint")
        k = len(_MAGIC)
        (hlen,) = struct.unpack("<I", data[k:k + 4])
        header = json.loads(data[k + 4:k + 4 + hlen])
        net = cls.from_description(header["layers"])
        flat = np.frombuffer(data[k + 4 + hlen:], dtype="<f8")
        arrays = [net.flat_params, net.flat_buffers]
        if header["optimizer"]:
            arrays += [net.adam_m, net.adam_v]
        if flat.size != sum(a.size for a in arrays):
            raise ValueError("checkpoint body does not match its header")
        pos = 0
        for a in arrays:
            a[...] = flat[pos:pos + a.size].reshape(a.shape)
            pos += a.size
        net.adam_t = header["adam_t"]
        return net

    def save(self, path, with_optimizer: bool = True) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes(with_optimizer))

    @classmethod
    def load(cls, path) -> "Mlp":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def soft_update(target: Mlp, primary: Mlp, omega: float) -> Mlp:
    """theta_T <- omega theta + (1 - omega) theta_T, BN running stats included."""
    if target.describe() != primary.describe():
        raise ValueError("soft_update needs identical architectures")
    for t, p in ((target.flat_params, primary.flat_params), (target.flat_buffers, primary.flat_buffers)):
        t *= 1.0 - omega
        t += omega * p
    target.version += 1
    return target


def build_mlp(sizes, out_activation: str, rng=None, batch_norm: bool = True,
              momentum: float = 0.9, eps: float = 1e-5, softmax_groups=()) -> Mlp:
    """FC(ReLU) -> BN blocks between ``sizes[0]`` and ``sizes[-1]``."""
    rng = np.random.default_rng() if rng is None else rng
    layers = []
    for a, b in zip(sizes[:-2], sizes[1:-1]):
        layers.append(Dense(a, b, "relu", rng))
        if batch_norm:
            layers.append(BatchNorm(b, momentum, eps))
    layers.append(Dense(sizes[-2], sizes[-1], out_activation, rng, softmax_groups))
    return Mlp(layers)


def actor_sizes(n_wds: int, hidden: int = 128, features: int = 4) -> list[int]:
    return [features * n_wds, hidden, hidden, 3 * n_wds]


def value_sizes(n_wds: int, hidden: int = 128, features: int = 4) -> list[int]:
    return [features * n_wds, hidden, hidden, 1]


def flop_count(net, pass_: str = "forward") -> int:
    """FC-layer FLOPs (2 n_in n_out each); backward counted as twice forward.

    ``net`` may be an Mlp, a layer description list, or a list of layer
    widths.  Batch norm and activations are not counted.
    """
    if isinstance(net, Mlp):
        dims = [(l.n_in, l.n_out) for l in net.layers if l.kind == "dense"]
    elif net and isinstance(net[0], dict):
        dims = [(d["n_in"], d["n_out"]) for d in net if d["type"] == "dense"]
    else:
        dims = list(zip(net[:-1], net[1:]))
    fwd = sum(2 * a * b for a, b in dims)
    if pass_ == "forward":
        return fwd
    if pass_ == "backward":
        return 2 * fwd
    raise ValueError("pass must be 'forward' or 'backward'")
