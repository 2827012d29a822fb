"""Minimal dense-network substrate with hand-written reverse-mode gradients.

Exactly the layer set the surrogate and the toy hash model need: affine,
SiLU, inverted dropout, softmax cross-entropy, and Adam. Forward passes
return a cache that the matching backward pass consumes; caches are
invalidated whenever parameters change, and dropout masks live in the cache
so a forward can be replayed bit-for-bit (finite-difference checks and the
shared-mask training step rely on this).

Conventions: inputs are (n, d) batches or single (d,) vectors; losses
average over the batch, so parameter gradients from backward are already
mean gradients. Affine weights initialize uniform in +-sqrt(6/(fan_in +
fan_out)) with zero biases.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit as _sigmoid

from .errors import (
    InvalidInputError,
    InvalidStateError,
    TrainingDivergenceError,
)

__all__ = [
    "Affine",
    "SiLU",
    "Dropout",
    "DenseNet",
    "NetCache",
    "AdamState",
    "adam_step",
    "softmax_cross_entropy",
    "save_checkpoint",
    "load_checkpoint",
]


class Affine:
    """y = x @ weights + bias."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        self.weights = rng.uniform(-limit, limit, size=(in_dim, out_dim))
        self.bias = np.zeros(out_dim)

    def forward(self, x, *, rng=None, mask=None, train=True):
        if x.shape[1] != self.weights.shape[0]:
            raise InvalidInputError(
                f"affine expects {self.weights.shape[0]} inputs, got {x.shape[1]}"
            )
        return x @ self.weights + self.bias, x

    def backward(self, cache, grad_out):
        x = cache
        grad_w = x.T @ grad_out
        grad_b = grad_out.sum(axis=0)
        return grad_out @ self.weights.T, [grad_w, grad_b]

    def params(self):
        return [self.weights, self.bias]

    def set_params(self, new):
        self.weights, self.bias = new


class SiLU:
    """y = x * sigmoid(x)."""

    def forward(self, x, *, rng=None, mask=None, train=True):
        return x * _sigmoid(x), x

    def backward(self, cache, grad_out):
        s = _sigmoid(cache)
        return grad_out * s * (1.0 + cache * (1.0 - s)), []

    def params(self):
        return []

    def set_params(self, new):
        pass


class Dropout:
    """Inverted dropout: scales by 1/(1-rate) at train time, identity at eval."""

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise InvalidInputError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, *, rng=None, mask=None, train=True):
        if not train or self.rate == 0.0:
            return x, None
        if mask is None:
            if rng is None:
                raise InvalidInputError("dropout in train mode needs an rng or a mask")
            mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        elif mask.shape != x.shape:
            raise InvalidInputError("replayed dropout mask has the wrong shape")
        return x * mask, mask

    def backward(self, cache, grad_out):
        if cache is None:
            return grad_out, []
        return grad_out * cache, []

    def params(self):
        return []

    def set_params(self, new):
        pass


@dataclass
class NetCache:
    """Per-layer caches for one forward pass, bound to a parameter version."""

    layer_caches: list
    masks: list
    version: int
    squeezed: bool


class DenseNet:
    """A layer sequence with train/eval modes and replayable dropout masks."""

    def __init__(self, layers):
        self.layers = list(layers)
        self.mode = "train"
        self._version = 0

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def forward(self, x, rng=None, masks=None):
        """Run the net; returns (output, cache).

        masks replays the dropout draws of an earlier cache (positional, one
        entry per layer); without it, train mode draws fresh masks from rng.
        """
        x = np.asarray(x, dtype=np.float64)
        squeezed = x.ndim == 1
        if squeezed:
            x = x[None, :]
        if x.ndim != 2:
            raise InvalidInputError("input must be a vector or a batch of vectors")
        train = self.mode == "train"
        if masks is not None and len(masks) != len(self.layers):
            raise InvalidInputError("mask list must align with the layer list")
        caches = []
        used_masks = []
        for li, layer in enumerate(self.layers):
            mask = masks[li] if masks is not None else None
            x, cache = layer.forward(x, rng=rng, mask=mask, train=train)
            caches.append(cache)
            used_masks.append(cache if isinstance(layer, Dropout) else None)
        out = x[0] if squeezed else x
        return out, NetCache(caches, used_masks, self._version, squeezed)

    def backward(self, cache: NetCache, grad_out):
        """Reverse-mode pass; returns (input gradient, parameter gradients).

        Parameter gradients align with params(). The cache must come from a
        forward pass under the current parameters.
        """
        if cache.version != self._version:
            raise InvalidStateError("cache is stale: parameters changed since forward")
        grad = np.asarray(grad_out, dtype=np.float64)
        if cache.squeezed:
            grad = grad[None, :]
        param_grads = [None] * len(self.layers)
        for li in range(len(self.layers) - 1, -1, -1):
            grad, pg = self.layers[li].backward(cache.layer_caches[li], grad)
            param_grads[li] = pg
        flat = [g for pg in param_grads for g in pg]
        grad_in = grad[0] if cache.squeezed else grad
        return grad_in, flat

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def set_params(self, new):
        new = list(new)
        if len(new) != len(self.params()):
            raise InvalidInputError("parameter list has the wrong length")
        pos = 0
        for layer in self.layers:
            count = len(layer.params())
            layer.set_params(new[pos : pos + count])
            pos += count
        self._version += 1


def softmax_cross_entropy(logits, target):
    """Loss and logit gradient for -log softmax(logits)[target].

    Single sample: logits (k,), integer target; returns the usual
    softmax - one_hot gradient. Batch: logits (n, k), targets (n,); the loss
    is the batch mean and the gradient is scaled by 1/n to match.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    if single:
        logits = logits[None, :]
        targets = np.array([target])
    else:
        targets = np.asarray(target)
        if targets.shape != (logits.shape[0],):
            raise InvalidInputError("need one target per batch row")
    if not np.issubdtype(targets.dtype, np.integer):
        raise InvalidInputError("targets must be integers")
    n, k = logits.shape
    if targets.min() < 0 or targets.max() >= k:
        raise InvalidInputError(f"targets must lie in 0..{k - 1}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(n), targets].mean()
    grad = np.exp(log_probs)
    grad[np.arange(n), targets] -= 1.0
    grad /= n
    return loss, (grad[0] if single else grad)


@dataclass
class AdamState:
    """Adam moments for one parameter list."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr: float = 1e-3) -> "AdamState":
        return cls(
            lr=lr,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update; returns the new parameter list."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise InvalidInputError("params, grads, and state must align")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError("non-finite gradient")
    state.step += 1
    t = state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1 - state.beta2) * g * g
        m_hat = state.m[i] / (1 - state.beta1**t)
        v_hat = state.v[i] / (1 - state.beta2**t)
        out.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


def save_checkpoint(path, params, header: dict) -> None:
    """Write parameters as a JSON header line plus a flat little-endian f64 stream."""
    meta = dict(header)
    meta["shapes"] = [list(p.shape) for p in params]
    blob = b"".join(
        np.ascontiguousarray(p, dtype="<f8").tobytes() for p in params
    )
    with open(path, "wb") as f:
        head = json.dumps(meta, sort_keys=True).encode()
        f.write(len(head).to_bytes(4, "little"))
        f.write(head)
        f.write(blob)


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns (params, header)."""
    with open(path, "rb") as f:
        head_len = int.from_bytes(f.read(4), "little")
        header = json.loads(f.read(head_len).decode())
        blob = f.read()
    shapes = [tuple(s) for s in header["shapes"]]
    counts = [int(np.prod(shape)) if shape else 1 for shape in shapes]
    if len(blob) != 8 * sum(counts):
        raise InvalidInputError("checkpoint payload does not match its header")
    params = []
    offset = 0
    for shape, count in zip(shapes, counts):
        arr = np.frombuffer(
            blob, dtype="<f8", count=count, offset=offset
        ).reshape(shape)
        params.append(arr.astype(np.float64))
        offset += count * 8
    return params, header
