"""The deterministic classifier and its optimizer.

The network factors as logits(x) = h(x) @ head, with h an MLP feature
extractor (ReLU after every layer, no normalization) and a bias-free linear
head. Forward passes cache the per-layer activations so the trainer can
backpropagate on a selected subset of a batch without a second forward pass,
and so the last-layer (features, logits) pair is available to the curvature
accumulators for free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBatch, InvalidDimensions, ShapeMismatch
from .numerics import log_softmax, softmax_ce_grad


@dataclass
class Network:
    input_dim: int
    hidden_widths: tuple
    feature_dim: int
    num_classes: int
    weights: list  # per feature layer, shape (out, in)
    biases: list  # per feature layer, shape (out,)
    head: np.ndarray  # (feature_dim, num_classes), no bias

    def parameters(self) -> list:
        """Live parameter arrays in a fixed order: (W, b) per layer, then head."""
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend((w, b))
        params.append(self.head)
        return params

    def to_state(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "feature_dim": self.feature_dim,
            "num_classes": self.num_classes,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "head": self.head.tolist(),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Network":
        return cls(
            input_dim=int(state["input_dim"]),
            hidden_widths=tuple(state["hidden_widths"]),
            feature_dim=int(state["feature_dim"]),
            num_classes=int(state["num_classes"]),
            weights=[np.asarray(w, dtype=float) for w in state["weights"]],
            biases=[np.asarray(b, dtype=float) for b in state["biases"]],
            head=np.asarray(state["head"], dtype=float),
        )


def init_network(input_dim, hidden_widths, feature_dim, num_classes, seed) -> Network:
    """Fan-in-scaled uniform weights, zero biases; deterministic per seed.

    Empty hidden_widths means identity features (a pure linear model), which
    requires feature_dim == input_dim.
    """
    hidden_widths = tuple(int(w) for w in hidden_widths)
    dims = [input_dim, feature_dim, num_classes, *hidden_widths]
    if any(d <= 0 for d in dims):
        raise InvalidDimensions(f"all dimensions must be positive, got {dims}")
    if not hidden_widths and feature_dim != input_dim:
        raise InvalidDimensions(
            f"identity features require feature_dim == input_dim, got {feature_dim} != {input_dim}"
        )
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    if hidden_widths:
        widths = [input_dim, *hidden_widths, feature_dim]
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
    bound = 1.0 / np.sqrt(feature_dim)
    head = rng.uniform(-bound, bound, size=(feature_dim, num_classes))
    return Network(input_dim, hidden_widths, feature_dim, num_classes, weights, biases, head)


@dataclass
class ForwardCache:
    """Activations of one forward pass at fixed parameters."""

    x: np.ndarray  # (n, input_dim)
    activations: list  # post-ReLU output of each feature layer
    feats: np.ndarray  # (n, feature_dim)
    logits: np.ndarray  # (n, num_classes)

    def subset(self, idx) -> "ForwardCache":
        idx = np.asarray(idx)
        return ForwardCache(
            x=self.x[idx],
            activations=[a[idx] for a in self.activations],
            feats=self.feats[idx],
            logits=self.logits[idx],
        )


def forward(net: Network, x) -> ForwardCache:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    a = x
    activations = []
    for w, b in zip(net.weights, net.biases):
        a = np.maximum(a @ w.T + b, 0.0)
        activations.append(a)
    return ForwardCache(x=x, activations=activations, feats=a, logits=a @ net.head)


def features(net: Network, x) -> np.ndarray:
    """The feature map h(x); accepts a single input or a batch."""
    x = np.asarray(x, dtype=float)
    out = forward(net, x).feats
    return out[0] if x.ndim == 1 else out


def logits(net: Network, x) -> np.ndarray:
    """h(x) @ head; accepts a single input or a batch."""
    x = np.asarray(x, dtype=float)
    out = forward(net, x).logits
    return out[0] if x.ndim == 1 else out


def backward(net: Network, cache: ForwardCache, y, sample_weights=None):
    """Loss and parameter gradients from a cached forward pass.

    loss = (1/n) * sum_i w_i * (-log p(y_i | logits_i)) with w_i = 1 by
    default, so the unweighted case is the batch mean.
    """
    y = np.asarray(y, dtype=int)
    n = y.size
    if n == 0:
        raise EmptyBatch("cannot take gradients over an empty batch")
    lsm = log_softmax(cache.logits, axis=-1)
    per_example = -lsm[np.arange(n), y]
    if sample_weights is None:
        coeff = np.full(n, 1.0 / n)
    else:
        coeff = np.asarray(sample_weights, dtype=float) / n
    loss = float(per_example @ coeff)

    dlogits = np.exp(lsm)
    dlogits[np.arange(n), y] -= 1.0
    dlogits *= coeff[:, None]

    grads = [None] * (2 * len(net.weights) + 1)
    grads[-1] = cache.feats.T @ dlogits
    da = dlogits @ net.head.T
    for layer in range(len(net.weights) - 1, -1, -1):
        act = cache.activations[layer]
        prev = cache.activations[layer - 1] if layer > 0 else cache.x
        dz = da * (act > 0)
        grads[2 * layer] = dz.T @ prev
        grads[2 * layer + 1] = dz.sum(axis=0)
        da = dz @ net.weights[layer]
    return loss, grads


def loss_and_grads(net: Network, x, y, sample_weights=None):
    """Mean negative log-likelihood over the batch and gradients for every parameter."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] == 0:
        raise EmptyBatch("cannot take gradients over an empty batch")
    return backward(net, forward(net, x), y, sample_weights)


@dataclass
class OptimizerState:
    """Adaptive-moment optimizer with decoupled (multiplicative) weight decay."""

    lr: float = 1e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def to_state(self) -> dict:
        return {
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
            "m": [a.tolist() for a in self.m],
            "v": [a.tolist() for a in self.v],
        }

    @classmethod
    def from_state(cls, state: dict) -> "OptimizerState":
        return cls(
            lr=float(state["lr"]),
            weight_decay=float(state["weight_decay"]),
            beta1=float(state["beta1"]),
            beta2=float(state["beta2"]),
            eps=float(state["eps"]),
            step=int(state["step"]),
            m=[np.asarray(a, dtype=float) for a in state["m"]],
            v=[np.asarray(a, dtype=float) for a in state["v"]],
        )


def init_optimizer(net: Network, lr=1e-3, weight_decay=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
    params = net.parameters()
    return OptimizerState(
        lr=lr,
        weight_decay=weight_decay,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        step=0,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
    )


def optimizer_step(net: Network, opt: OptimizerState, grads):
    """One in-place update; weight decay scales parameters before the moment step."""
    params = net.parameters()
    if len(grads) != len(params):
        raise ShapeMismatch(f"{len(grads)} gradients for {len(params)} parameters")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ShapeMismatch(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
    opt.step += 1
    t = opt.step
    bias1 = 1.0 - opt.beta1**t
    bias2 = 1.0 - opt.beta2**t
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        if opt.weight_decay:
            p *= 1.0 - opt.lr * opt.weight_decay
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * np.square(g)
        p -= opt.lr * (m / bias1) / (np.sqrt(v / bias2) + opt.eps)
    return net, opt


def per_sample_grad_norm_bound(net: Network, x, y) -> float:
    """||softmax(f) - onehot(y)||_2 * ||h(x)||_2.

    Equals the exact per-sample gradient norm of the head weights (the bound
    is tight for a linear head); used as the gradient-norm selection statistic.
    """
    cache = forward(net, x)
    g = softmax_ce_grad(cache.logits[0], int(y))
    return float(np.linalg.norm(g) * np.linalg.norm(cache.feats[0]))
