"""A small numpy CNN with hand-written gradients and a synthetic image task.

Every convolution, dense or grouped, is stored as a :class:`GroupedLayer`
with weights shaped ``(G, c_out/G, c_in/G, k, k)``; a dense layer is the
``G = 1`` case with identity channel permutations.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Norm, Permutation
from .regularizer import LayerSpec, reg_subgradient

# (c_in, c_out, k, stride) for the fixed acceptance architecture
MICRONET_LAYERS = ((3, 16, 3, 1), (16, 32, 3, 2), (32, 64, 3, 2))
N_CLASSES = 10


@dataclass
class GroupedLayer:
    weight: np.ndarray  # (G, n, m, k, k)
    bias: np.ndarray  # (c_out,), grouped output order
    gather_in: Permutation
    scatter_out: Permutation
    stride: int = 1
    padding: int | None = None

    def __post_init__(self):
        if self.weight.ndim != 5:
            raise ValueError(f"grouped weight must be 5-D, got shape {self.weight.shape}")
        if self.padding is None:
            self.padding = self.k // 2
        if self.gather_in.size != self.c_in or self.scatter_out.size != self.c_out:
            raise ValueError("gather/scatter permutations do not match channel counts")
        if self.bias.shape != (self.c_out,):
            raise ValueError(f"bias shape {self.bias.shape} does not match {self.c_out} outputs")

    @property
    def groups(self) -> int:
        return self.weight.shape[0]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0] * self.weight.shape[1]

    @property
    def c_in(self) -> int:
        return self.weight.shape[0] * self.weight.shape[2]

    @property
    def k(self) -> int:
        return self.weight.shape[3]

    @property
    def n_params(self) -> int:
        return self.weight.size + self.bias.size

    def dense_weight(self) -> np.ndarray:
        """Equivalent ``(c_out, c_in, k, k)`` weight in the original channel order."""
        g, n, m, k, _ = self.weight.shape
        w = np.zeros((self.c_out, self.c_in, k, k), dtype=self.weight.dtype)
        for i in range(g):
            w[i * n:(i + 1) * n, i * m:(i + 1) * m] = self.weight[i]
        # position (a, b) holds original channels (scatter[a], gather[b])
        out = np.empty_like(w)
        out[np.ix_(self.scatter_out.map, self.gather_in.map)] = w
        return out

    def dense_bias(self) -> np.ndarray:
        out = np.empty_like(self.bias)
        out[self.scatter_out.map] = self.bias
        return out

    @classmethod
    def dense(cls, w: np.ndarray, bias: np.ndarray, stride: int = 1, padding: int | None = None):
        c_out, c_in = w.shape[:2]
        return cls(
            w[None].copy(), np.array(bias, copy=True),
            Permutation.identity(c_in), Permutation.identity(c_out), stride, padding,
        )


def _as_batch(f: np.ndarray) -> tuple[np.ndarray, bool]:
    f = np.asarray(f)
    if f.ndim == 3:
        return f[None], True
    if f.ndim != 4:
        raise ValueError(f"feature map must be (C, H, W) or (N, C, H, W), got {f.shape}")
    return f, False


def _conv(x, weight, bias, stride, padding):
    """Grouped convolution on a ``(C, H, W, N)`` map whose channels are in grouped order.

    Batch-innermost layout keeps the im2col/col2im copies on long contiguous runs.
    """
    g, n, m, k, _ = weight.shape
    if x.shape[0] != g * m:
        raise ValueError(f"input has {x.shape[0]} channels, layer expects {g * m}")
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    c, hp, wp, nb = x.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    cols = np.empty((c, k, k, ho, wo, nb), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = x[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    cols = cols.reshape(g, m * k * k, ho * wo * nb)
    out = weight.reshape(g, n, m * k * k) @ cols
    out = out.reshape(g * n, ho, wo, nb) + bias[:, None, None, None]
    return out, (cols, x.shape, stride, padding)


def _conv_backward(dout, weight, cache, need_dx=True):
    cols, xshape, stride, padding = cache
    g, n, m, k, _ = weight.shape
    _, ho, wo, nb = dout.shape
    d = dout.reshape(g, n, ho * wo * nb)
    dw = (d @ cols.transpose(0, 2, 1)).reshape(weight.shape)
    db = dout.sum(axis=(1, 2, 3))
    if not need_dx:
        return None, dw, db
    # rows ordered (ky, kx, m) so each kernel offset is one contiguous slab
    wt = weight.transpose(0, 3, 4, 2, 1).reshape(g, k * k * m, n)
    dcols = (wt @ d).reshape(g, k, k, m, ho, wo, nb)
    dxp = np.zeros(xshape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                dcols[:, i, j].reshape(g * m, ho, wo, nb)
            )
    if padding:
        dxp = dxp[:, padding:-padding, padding:-padding]
    return dxp, dw, db


def _to_internal(x):
    return np.ascontiguousarray(x.transpose(1, 2, 3, 0))


def _from_internal(y):
    return y.transpose(3, 0, 1, 2)


def conv_forward(w: np.ndarray, bias, f: np.ndarray, stride: int = 1, padding: int | None = None):
    """Dense convolution ``O[j] = sum_i W[j, i] * F[i] + b[j]`` (cross-correlation)."""
    w = np.asarray(w)
    if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ValueError(f"expected odd square kernels (c_out, c_in, k, k), got {w.shape}")
    x, single = _as_batch(f)
    if bias is None:
        bias = np.zeros(w.shape[0], dtype=w.dtype)
    if padding is None:
        padding = w.shape[2] // 2
    out, _ = _conv(_to_internal(x), w[None], np.asarray(bias), stride, padding)
    out = _from_internal(out)
    return out[0] if single else out


def _layer_forward(layer: GroupedLayer, x: np.ndarray):
    if not layer.gather_in.is_identity():
        x = x[layer.gather_in.map]
    y, cache = _conv(x, layer.weight, layer.bias, layer.stride, layer.padding)
    if not layer.scatter_out.is_identity():
        y = y[layer.scatter_out.inverse().map]
    return y, cache


def _layer_backward(layer: GroupedLayer, dy: np.ndarray, cache, need_dx=True):
    if not layer.scatter_out.is_identity():
        dy = dy[layer.scatter_out.map]
    dx, dw, db = _conv_backward(dy, layer.weight, cache, need_dx)
    if need_dx and not layer.gather_in.is_identity():
        out = np.empty_like(dx)
        out[layer.gather_in.map] = dx
        dx = out
    return dx, dw, db


def groupconv_forward(layer: GroupedLayer, f: np.ndarray) -> np.ndarray:
    """Gather inputs, apply the grouped convolution, scatter outputs."""
    x, single = _as_batch(f)
    y, _ = _layer_forward(layer, _to_internal(x))
    y = _from_internal(y)
    return y[0] if single else y


@dataclass
class MicroNet:
    convs: list[GroupedLayer]
    fc_weight: np.ndarray  # (classes, features)
    fc_bias: np.ndarray
    names: list[str] = field(default_factory=list)
    compressed: bool = False

    def __post_init__(self):
        if not self.names:
            self.names = [f"conv{i + 1}" for i in range(len(self.convs))]
        for prev, nxt in zip(self.convs, self.convs[1:]):
            if prev.c_out != nxt.c_in:
                raise ValueError("convolution channel counts do not chain")
        if self.fc_weight.shape[1] != self.convs[-1].c_out:
            raise ValueError("classifier input does not match last convolution")

    @property
    def dtype(self):
        return self.fc_weight.dtype

    def params(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name; optimizers update them in place."""
        out = {}
        for name, layer in zip(self.names, self.convs):
            out[f"{name}.weight"] = layer.weight
            out[f"{name}.bias"] = layer.bias
        out["fc.weight"] = self.fc_weight
        out["fc.bias"] = self.fc_bias
        return out

    def layer_specs(self) -> list[LayerSpec]:
        specs = []
        for name, layer in zip(self.names, self.convs):
            specs.append(LayerSpec(name, layer.c_in, layer.c_out, layer.k, layer.stride))
        return specs

    def copy(self) -> "MicroNet":
        return copy.deepcopy(self)

    def forward(self, x: np.ndarray, keep: bool = False):
        caches = []
        h = _to_internal(x)
        for layer in self.convs:
            z, cache = _layer_forward(layer, h)
            h = np.maximum(z, 0)
            caches.append((cache, z > 0))
        feat = h.mean(axis=(1, 2)).T
        logits = feat @ self.fc_weight.T + self.fc_bias
        if keep:
            return logits, (caches, feat, h.shape)
        return logits

    def predict(self, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
        return np.concatenate(
            [self.forward(x[i:i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
        )


def init_micronet(rng: np.random.Generator, layers=MICRONET_LAYERS, n_classes: int = N_CLASSES,
                  dtype=np.float32) -> MicroNet:
    """He-normal convolutions, zero biases."""
    convs = []
    for c_in, c_out, k, stride in layers:
        w = rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / (c_in * k * k))
        convs.append(GroupedLayer.dense(w.astype(dtype), np.zeros(c_out, dtype), stride))
    feat = layers[-1][1]
    fc = (rng.standard_normal((n_classes, feat)) / np.sqrt(feat)).astype(dtype)
    return MicroNet(convs, fc, np.zeros(n_classes, dtype))


def reinitialize(net: MicroNet, rng: np.random.Generator) -> MicroNet:
    """Fresh He-normal weights with the same grouped layout and permutations."""
    out = net.copy()
    for layer in out.convs:
        g, n, m, k, _ = layer.weight.shape
        std = np.sqrt(2.0 / (m * k * k))
        layer.weight[...] = rng.standard_normal(layer.weight.shape) * std
        layer.bias[...] = 0
    feat = out.fc_weight.shape[1]
    out.fc_weight[...] = rng.standard_normal(out.fc_weight.shape) / np.sqrt(feat)
    out.fc_bias[...] = 0
    return out


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    nb = len(labels)
    loss = -np.mean(np.log(probs[np.arange(nb), labels]))
    dlogits = probs
    dlogits[np.arange(nb), labels] -= 1
    return float(loss), dlogits / nb


def backward(net: MicroNet, x: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient for every parameter."""
    logits, (caches, feat, hshape) = net.forward(x, keep=True)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    grads = {"fc.weight": dlogits.T @ feat, "fc.bias": dlogits.sum(axis=0)}
    dfeat = dlogits @ net.fc_weight
    c, hh, ww, nb = hshape
    dh = np.broadcast_to(dfeat.T[:, None, None, :] / (hh * ww), hshape)
    layers = list(zip(net.names, net.convs, caches))
    for depth, (name, layer, (cache, active)) in reversed(list(enumerate(layers))):
        dz = dh * active
        dh, dw, db = _layer_backward(layer, dz, cache, need_dx=depth > 0)
        grads[f"{name}.weight"] = dw
        grads[f"{name}.bias"] = db
    correct = int((logits.argmax(axis=1) == labels).sum())
    return loss, grads, correct


@dataclass
class SynthDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    templates: np.ndarray
    seed: int
    sigma: float


def make_dataset(seed: int = 0, n_train: int = 5000, n_test: int = 1000, sigma: float = 0.3,
                 n_classes: int = N_CLASSES, size: int = 16, dtype=np.float32) -> SynthDataset:
    """Ten noisy classes, each a fixed random 3x8x8 pattern upsampled to ``size``."""
    if n_train % n_classes or n_test % n_classes:
        raise ValueError("split sizes must be multiples of the class count")
    rng = np.random.default_rng(seed)
    templates = rng.standard_normal((n_classes, 3, 8, 8))
    scale = size // 8
    big = templates.repeat(scale, axis=2).repeat(scale, axis=3)

    def split(n):
        y = rng.permutation(np.repeat(np.arange(n_classes), n // n_classes))
        x = big[y] + sigma * rng.standard_normal((n, 3, size, size))
        return x.astype(dtype), y

    x_tr, y_tr = split(n_train)
    x_te, y_te = split(n_test)
    return SynthDataset(x_tr, y_tr, x_te, y_te, templates, seed, sigma)


class SGD:
    """Momentum SGD with coupled weight decay."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, params, grads, lr: float, weight_decay: float = 0.0) -> None:
        for name, p in params.items():
            g = grads[name]
            if weight_decay:
                g = g + weight_decay * p
            buf = self.buffers.get(name)
            if buf is None:
                buf = self.buffers[name] = np.array(g, dtype=p.dtype)
            else:
                buf *= self.momentum
                buf += g
            p -= lr * buf


@dataclass
class RegTerm:
    """Structured penalty applied during sparsification, per convolution name."""
    lam: float
    mats: dict[str, np.ndarray]
    perms: dict[str, tuple[Permutation, Permutation]]
    norm: Norm = "l1"


def train_epoch(net: MicroNet, x: np.ndarray, y: np.ndarray, opt: SGD, lr: float,
                rng: np.random.Generator, batch_size: int = 64, weight_decay: float = 0.0,
                reg: RegTerm | None = None) -> dict:
    """One shuffled pass; returns mean data loss and training accuracy."""
    order = rng.permutation(len(x))
    params = net.params()
    total_loss = 0.0
    correct = 0
    for start in range(0, len(x), batch_size):
        idx = order[start:start + batch_size]
        loss, grads, ok = backward(net, x[idx], y[idx])
        if reg is not None and reg.lam != 0:
            for name, layer in zip(net.names, net.convs):
                if name not in reg.mats:
                    continue
                p, q = reg.perms[name]
                sub = reg_subgradient(layer.weight[0], p, q, reg.mats[name], reg.norm)
                grads[f"{name}.weight"] = grads[f"{name}.weight"] + reg.lam * sub[None]
        opt.step(params, grads, lr, weight_decay)
        total_loss += loss * len(idx)
        correct += ok
    return {"loss": total_loss / len(x), "acc": correct / len(x)}


def evaluate(net: MicroNet, x: np.ndarray, y: np.ndarray) -> float:
    """Top-1 accuracy as a fraction."""
    return float((net.predict(x) == y).mean())
