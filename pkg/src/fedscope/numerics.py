"""Rectifier MLP kernel: parameters, forward pass, smoothed cross-entropy,
analytic gradients and Adam.

Everything is float64 and side-effect free; functions return new objects
instead of mutating their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, ValidationError


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden: tuple[int, ...]
    n_classes: int

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.n_classes < 2:
            raise ValidationError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.input_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValidationError("all layer widths must be >= 1")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.n_classes)

    @property
    def shapes(self) -> tuple[tuple[int, int], ...]:
        w = self.widths
        return tuple((w[i], w[i + 1]) for i in range(len(w) - 1))

    def n_params(self) -> int:
        return sum(a * b + b for a, b in self.shapes)

    def forward_flops(self) -> int:
        """Multiply-add flops for one sample's forward pass."""
        return sum(2 * a * b for a, b in self.shapes)

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden": list(self.hidden), "n_classes": self.n_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(int(d["input_dim"]), tuple(d.get("hidden", ())), int(d["n_classes"]))


class ParamSet:
    """Ordered (weight, bias) pairs of an MLP.

    Weights are stored as ``(fan_in, fan_out)`` so that ``x @ W + b`` maps a
    row batch forward.
    """

    __slots__ = ("layers",)

    def __init__(self, layers: Sequence[tuple[np.ndarray, np.ndarray]]):
        out = []
        for w, b in layers:
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"bad layer shapes {w.shape}, {b.shape}")
            out.append((w, b))
        self.layers = tuple(out)

    @property
    def signature(self) -> tuple[tuple[int, int], ...]:
        return tuple(w.shape for w, _ in self.layers)

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def arrays(self):
        for w, b in self.layers:
            yield w
            yield b

    def _check(self, other: "ParamSet"):
        if self.signature != other.signature:
            raise DimensionError(f"incompatible ParamSets {self.signature} vs {other.signature}")

    def map(self, fn) -> "ParamSet":
        return ParamSet([(fn(w), fn(b)) for w, b in self.layers])

    def zip_map(self, other: "ParamSet", fn) -> "ParamSet":
        self._check(other)
        return ParamSet([(fn(w, ow), fn(b, ob)) for (w, b), (ow, ob) in zip(self.layers, other.layers)])

    def __add__(self, other):
        return self.zip_map(other, np.add)

    def __sub__(self, other):
        return self.zip_map(other, np.subtract)

    def scale(self, factor: float) -> "ParamSet":
        return self.map(lambda a: a * factor)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, vec: np.ndarray) -> "ParamSet":
        """ParamSet with this signature and values taken from ``vec``."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params():
            raise DimensionError(f"expected {self.n_params()} values, got {vec.size}")
        layers, pos = [], 0
        for w, b in self.layers:
            nw = vec[pos:pos + w.size].reshape(w.shape)
            pos += w.size
            nb = vec[pos:pos + b.size].copy()
            pos += b.size
            layers.append((nw, nb))
        return ParamSet(layers)

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def equals(self, other: "ParamSet") -> bool:
        """Bit-exact equality."""
        return self.signature == other.signature and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )

    def max_abs_diff(self, other: "ParamSet") -> float:
        self._check(other)
        return float(max(np.max(np.abs(a - b), initial=0.0) for a, b in zip(self.arrays(), other.arrays())))

    def to_bytes(self) -> bytes:
        return b"".join(a.astype("<f8").tobytes() for a in self.arrays())

    @classmethod
    def zeros_like(cls, other: "ParamSet") -> "ParamSet":
        return other.map(np.zeros_like)

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "ParamSet":
        return cls([(np.zeros(s), np.zeros(s[1])) for s in spec.shapes])

    def __repr__(self):
        return f"ParamSet({self.signature})"


def weighted_average(params: Sequence[ParamSet], weights: Sequence[float]) -> ParamSet:
    """Weighted mean computed as ``p_0 + sum_i (w_i/W) * (p_i - p_0)``.

    Reduction follows the given order, so callers fix it for
    reproducibility. Anchoring on ``p_0`` makes the mean of identical sets
    bit-identical to the input; the result is clamped to the elementwise
    envelope of the inputs to absorb rounding.
    """
    if not params:
        raise ValidationError("weighted_average needs at least one ParamSet")
    if len(weights) != len(params) or any(w < 0 for w in weights):
        raise ValidationError("need one non-negative weight per ParamSet")
    total = float(sum(weights))
    if total <= 0:
        raise ValidationError("weights must not all be zero")
    base = params[0]
    for p in params[1:]:
        base._check(p)
    fracs = [w / total for w in weights]
    out = []
    for li, (bw, bb) in enumerate(base.layers):
        layer = []
        for ai, anchor in enumerate((bw, bb)):
            acc = anchor.copy()
            lo = anchor.copy()
            hi = anchor.copy()
            for p, f in zip(params[1:], fracs[1:]):
                a = p.layers[li][ai]
                acc += f * (a - anchor)
                np.minimum(lo, a, out=lo)
                np.maximum(hi, a, out=hi)
            layer.append(np.clip(acc, lo, hi))
        out.append(tuple(layer))
    return ParamSet(out)


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamSet:
    """He-normal weights, zero biases."""
    layers = []
    for fan_in, fan_out in spec.shapes:
        w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        layers.append((w, np.zeros(fan_out)))
    return ParamSet(layers)


def _check_batch(params: ParamSet, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.signature[0][0]:
        raise DimensionError(f"batch has shape {x.shape}, model expects {params.signature[0][0]} features")
    return x


def _forward_cache(params: ParamSet, x: np.ndarray):
    acts = [x]
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def forward(params: ParamSet, batch: np.ndarray) -> np.ndarray:
    """Logits for a ``(n, input_dim)`` batch; ReLU between layers, none on the output."""
    x = _check_batch(params, batch)
    return _forward_cache(params, x)[-1]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def smoothed_targets(labels: np.ndarray, n_classes: int, eps: float) -> np.ndarray:
    y = np.full((labels.size, n_classes), eps / n_classes)
    y[np.arange(labels.size), labels] += 1.0 - eps
    return y


def _check_labels(labels, n_classes: int, eps: float) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        labels = labels.astype(np.int64).ravel()
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValidationError(f"labels must lie in [0, {n_classes})")
    if not 0.0 <= eps < 1.0:
        raise ValidationError(f"label smoothing must be in [0, 1), got {eps}")
    return labels


def loss_smoothed_ce(logits: np.ndarray, labels, eps: float = 0.0) -> float:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = _check_labels(labels, logits.shape[1], eps)
    if labels.size != logits.shape[0]:
        raise DimensionError("one label per logit row required")
    y = smoothed_targets(labels, logits.shape[1], eps)
    return float(-(y * log_softmax(logits)).sum() / labels.size)


def loss_and_gradient(params: ParamSet, batch, labels, eps: float = 0.0, prox=None):
    """Loss and its gradient with respect to every parameter.

    ``prox`` is ``(mu, anchor)``; when given, ``mu * (params - anchor)`` is
    added to the gradient and ``mu/2 * ||params - anchor||^2`` to the loss.
    """
    x = _check_batch(params, batch)
    n_classes = params.signature[-1][1]
    labels = _check_labels(labels, n_classes, eps)
    if labels.size != x.shape[0]:
        raise DimensionError("one label per sample required")
    acts = _forward_cache(params, x)
    logits = acts[-1]
    y = smoothed_targets(labels, n_classes, eps)
    logp = log_softmax(logits)
    n = labels.size
    loss = float(-(y * logp).sum() / n)

    delta = (np.exp(logp) - y) / n
    grads = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = (delta @ w.T) * (acts[i] > 0)
    g = ParamSet(grads)

    if prox is not None:
        mu, anchor = prox
        if mu < 0:
            raise ValidationError(f"proximal coefficient must be >= 0, got {mu}")
        diff = params - anchor
        g = g + diff.scale(mu)
        loss += 0.5 * mu * float(sum(np.sum(a * a) for a in diff.arrays()))
    return loss, g


def gradient(params: ParamSet, batch, labels, eps: float = 0.0, prox=None) -> ParamSet:
    return loss_and_gradient(params, batch, labels, eps, prox)[1]


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    # True: AdamW-style decay outside the moment estimates; False: L2 term folded into the gradient.
    decoupled: bool = True

    @classmethod
    def reference_profile(cls) -> "AdamHyper":
        return cls(lr=1e-4, weight_decay=1e-4)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class AdamState:
    m: ParamSet
    v: ParamSet
    t: int = 0
    hyper: AdamHyper = field(default_factory=AdamHyper)

    @classmethod
    def init(cls, params: ParamSet, hyper: AdamHyper | None = None) -> "AdamState":
        zeros = ParamSet.zeros_like(params)
        return cls(zeros, zeros, 0, hyper or AdamHyper())


def adam_step(state: AdamState, params: ParamSet, grads: ParamSet):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    params._check(grads)
    params._check(state.m)
    h = state.hyper
    t = state.t + 1
    if h.weight_decay and not h.decoupled:
        grads = grads + params.scale(h.weight_decay)
    m = state.m.zip_map(grads, lambda m_, g: h.beta1 * m_ + (1.0 - h.beta1) * g)
    v = state.v.zip_map(grads, lambda v_, g: h.beta2 * v_ + (1.0 - h.beta2) * g * g)
    c1 = 1.0 - h.beta1 ** t
    c2 = 1.0 - h.beta2 ** t
    layers = []
    for (w, b), (mw, mb), (vw, vb) in zip(params.layers, m.layers, v.layers):
        new = []
        for p, mp, vp in ((w, mw, vw), (b, mb, vb)):
            upd = (mp / c1) / (np.sqrt(vp / c2) + h.eps)
            if h.weight_decay and h.decoupled:
                upd = upd + h.weight_decay * p
            new.append(p - h.lr * upd)
        layers.append(tuple(new))
    return ParamSet(layers), AdamState(m, v, t, h)
