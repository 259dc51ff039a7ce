"""Losses, small numpy classifiers with hand-written backprop, and Adam.

Everything here works on float64 numpy arrays. Batched entry points
(`Classifier.loss_and_grad`) are what the protocol uses; the single-sample
functions exist for tests and for readability.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

LINEAR = "linear-softmax"
HIDDEN = "one-hidden-layer"


class CorruptLogitsError(ValueError):
    """Raised when logits contain NaN or Inf."""


def _check_finite(z: np.ndarray) -> None:
    if not np.all(np.isfinite(z)):
        raise CorruptLogitsError("logits contain non-finite entries")


def softmax(z, temperature: float = 1.0) -> np.ndarray:
    """Max-shifted softmax over the last axis."""
    z = np.asarray(z, dtype=np.float64)
    _check_finite(z)
    s = z / temperature
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    _check_finite(z)
    s = z / temperature
    s = s - s.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def cross_entropy(z, label: int) -> float:
    z = np.asarray(z, dtype=np.float64)
    if not 0 <= label < z.shape[-1]:
        raise ValueError(f"label {label} out of range for {z.shape[-1]} classes")
    return float(-log_softmax(z)[label])


def _xlogy_ratio(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    # p * ln(p / q) with 0 * ln 0 := 0
    out = np.zeros(np.broadcast(p, q).shape)
    mask = p > 0
    np.divide(p, q, out=out, where=mask)
    np.log(out, out=out, where=mask)
    return np.where(mask, p * out, 0.0)


def kl_divergence(target, student) -> float:
    """KL(target || student) in nats; both arguments are probability vectors."""
    p = np.asarray(target, dtype=np.float64)
    q = np.asarray(student, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    return float(_xlogy_ratio(p, q).sum())


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    return float(-_xlogy_ratio(p, np.ones_like(p)).sum())


def entropy_rows(p: np.ndarray) -> np.ndarray:
    """Row-wise entropy of a (..., C) probability array."""
    logp = np.log(np.where(p > 0, p, 1.0))
    return -(p * logp).sum(axis=-1)


@dataclass
class Classifier:
    """Linear-softmax or tanh one-hidden-layer classifier over a flat parameter vector.

    Parameter layout (row-major): ``W1 (d x h), b1 (h), W2 (h x C), b2 (C)``
    for the hidden kind and ``W (d x C), b (C)`` for the linear kind.
    """

    input_dim: int
    class_count: int
    hidden_dim: int = 0
    params: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.input_dim < 1 or self.class_count < 2 or self.hidden_dim < 0:
            raise ValueError("invalid classifier dimensions")
        if self.params is None:
            self.params = np.zeros(self.n_params)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.n_params,):
            raise ValueError(
                f"expected {self.n_params} parameters, got {self.params.shape}"
            )

    @property
    def kind(self) -> str:
        return LINEAR if self.hidden_dim == 0 else HIDDEN

    @property
    def n_params(self) -> int:
        d, h, c = self.input_dim, self.hidden_dim, self.class_count
        if h == 0:
            return d * c + c
        return d * h + h + h * c + c

    @classmethod
    def init(cls, input_dim, class_count, hidden_dim=0, rng=None) -> "Classifier":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(rng)
        model = cls(input_dim, class_count, hidden_dim)
        parts = []
        dims = [input_dim, class_count] if hidden_dim == 0 else [input_dim, hidden_dim, class_count]
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            parts.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
            parts.append(np.zeros(fan_out))
        model.params = np.concatenate(parts)
        return model

    def copy(self) -> "Classifier":
        return Classifier(self.input_dim, self.class_count, self.hidden_dim, self.params.copy())

    def _unpack(self, params):
        d, h, c = self.input_dim, self.hidden_dim, self.class_count
        if h == 0:
            return params[: d * c].reshape(d, c), params[d * c :]
        o = 0
        W1 = params[o : o + d * h].reshape(d, h); o += d * h
        b1 = params[o : o + h]; o += h
        W2 = params[o : o + h * c].reshape(h, c); o += h * c
        b2 = params[o : o + c]
        return W1, b1, W2, b2

    def _check_input(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.input_dim:
            raise ValueError(f"input dim {X.shape[1]} != model input_dim {self.input_dim}")
        return X

    def forward(self, X) -> np.ndarray:
        X = self._check_input(X)
        if self.hidden_dim == 0:
            W, b = self._unpack(self.params)
            return X @ W + b
        W1, b1, W2, b2 = self._unpack(self.params)
        return np.tanh(X @ W1 + b1) @ W2 + b2

    def predict(self, X) -> np.ndarray:
        return self.forward(X).argmax(axis=1)

    def loss_and_grad(self, X, labels, mix=None, targets=None, temperature: float = 1.0):
        """Mean composite loss over a batch and its gradient.

        Per sample ``i`` the loss is ``mix_i * CE(z_i, y_i) +
        (1 - mix_i) * KL(targets_i || softmax(z_i / T))``. ``targets`` are
        probability rows and are treated as constants. ``mix=None`` means
        plain cross-entropy.

        Returns ``(loss, grad, logits)``.
        """
        X = self._check_input(X)
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        B = X.shape[0]
        C = self.class_count
        if labels.shape[0] != B:
            raise ValueError("labels and inputs disagree on batch size")
        if np.any((labels < 0) | (labels >= C)):
            raise ValueError("label out of range")
        mix = np.ones(B) if mix is None else np.broadcast_to(np.asarray(mix, dtype=np.float64), (B,))

        if self.hidden_dim == 0:
            W, b = self._unpack(self.params)
            z = X @ W + b
        else:
            W1, b1, W2, b2 = self._unpack(self.params)
            a = np.tanh(X @ W1 + b1)
            z = a @ W2 + b2
        _check_finite(z)

        logp = log_softmax(z)
        p = np.exp(logp)
        onehot = np.zeros((B, C))
        onehot[np.arange(B), labels] = 1.0
        ce = -logp[np.arange(B), labels]
        dz = mix[:, None] * (p - onehot)
        loss_rows = mix * ce

        kd = mix < 1.0
        if np.any(kd):
            if targets is None:
                raise ValueError("distillation targets required when mix < 1")
            q = np.asarray(targets, dtype=np.float64)
            pT = softmax(z, temperature)
            kl = _xlogy_ratio(q, pT).sum(axis=1)
            w = 1.0 - mix
            loss_rows = loss_rows + np.where(kd, w * kl, 0.0)
            dz = dz + np.where(kd[:, None], w[:, None] * (pT - q) / temperature, 0.0)

        loss = float(loss_rows.mean())
        dz = dz / B
        if self.hidden_dim == 0:
            grad = np.concatenate([(X.T @ dz).ravel(), dz.sum(axis=0)])
        else:
            da = (dz @ W2.T) * (1.0 - a * a)
            grad = np.concatenate(
                [(X.T @ da).ravel(), da.sum(axis=0), (a.T @ dz).ravel(), dz.sum(axis=0)]
            )
        return loss, grad, z


@dataclass(frozen=True)
class CE:
    label: int


@dataclass(frozen=True)
class Composite:
    """``eps * CE(label) + (1 - eps) * KL(target || softmax(logits))``."""

    eps: float
    label: int
    target: tuple

    def __post_init__(self):
        if not 0.0 <= self.eps <= 1.0:
            raise ValueError("eps must lie in [0, 1]")


LossSpec = Union[CE, Composite]


def forward_backward(model: Classifier, x, loss_spec: LossSpec, temperature: float = 1.0):
    """Single-sample loss, parameter gradient and logits."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward_backward takes a single input vector")
    if isinstance(loss_spec, CE):
        loss, grad, z = model.loss_and_grad(x, [loss_spec.label])
    else:
        target = np.asarray(loss_spec.target, dtype=np.float64)[None, :]
        loss, grad, z = model.loss_and_grad(
            x, [loss_spec.label], mix=[loss_spec.eps], targets=target, temperature=temperature
        )
    return loss, grad, z[0]


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    kd_weight: float = 0.75
    temperature: float = 1.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.kd_weight <= 1.0:
            raise ValueError("kd_weight must lie in [0, 1]")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, cfg: OptimizerConfig):
    """One bias-corrected Adam update. Returns new ``(params, state)``; inputs are untouched."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {params.shape}")
    t = state.t + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    new = params - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps_adam)
    return new, AdamState(m, v, t)
