"""Layers used to assemble ResNet and RevNet stages.

Each layer is described by a :class:`LayerSpec` (serialisable hyper-parameters
plus the list of learnable tensors and their weight-decay flags) and applied
to a :class:`~petra.autograd.Graph` by :class:`Layer`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .autograd import Graph, Var, register

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class BatchNormState:
    """Running statistics of one batch-norm layer.

    The statistics only move through :meth:`update_running_stats`.
    """

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS, dtype="f64"):
        dt = T.resolve_dtype(dtype)
        self.momentum = momentum
        self.eps = eps
        self.running_mean = np.zeros(channels, dtype=dt)
        self.running_var = np.ones(channels, dtype=dt)
        self.num_updates = 0

    def update_running_stats(self, batch_mean, batch_var_unbiased):
        m = self.running_mean.dtype.type(self.momentum)
        one = self.running_mean.dtype.type(1)
        self.running_mean = (one - m) * self.running_mean + m * batch_mean
        self.running_var = (one - m) * self.running_var + m * batch_var_unbiased
        self.num_updates += 1

    def state_dict(self):
        return {"running_mean": self.running_mean.copy(), "running_var": self.running_var.copy()}

    def load_state_dict(self, d):
        self.running_mean = np.array(d["running_mean"])
        self.running_var = np.array(d["running_var"])


@dataclass
class ParamSpec:
    name: str
    shape: tuple
    is_bias: bool = False
    is_bn_param: bool = False

    @property
    def decay_exempt(self) -> bool:
        return self.is_bias or self.is_bn_param

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape))


@dataclass
class LayerSpec:
    kind: str  # conv | linear | bn | relu | maxpool | avgpool | gap
    name: str
    hyper: dict = field(default_factory=dict)

    def param_specs(self) -> list[ParamSpec]:
        h = self.hyper
        if self.kind == "conv":
            ps = [ParamSpec(f"{self.name}.weight", (h["out_ch"], h["in_ch"], h["kernel"], h["kernel"]))]
            if h.get("bias", False):
                ps.append(ParamSpec(f"{self.name}.bias", (h["out_ch"],), is_bias=True))
            return ps
        if self.kind == "linear":
            ps = [ParamSpec(f"{self.name}.weight", (h["out_features"], h["in_features"]))]
            if h.get("bias", True):
                ps.append(ParamSpec(f"{self.name}.bias", (h["out_features"],), is_bias=True))
            return ps
        if self.kind == "bn":
            c = h["channels"]
            return [ParamSpec(f"{self.name}.gamma", (c,), is_bn_param=True),
                    ParamSpec(f"{self.name}.beta", (c,), is_bn_param=True)]
        if self.kind in ("relu", "maxpool", "avgpool", "gap"):
            return []
        raise ValueError(f"unknown layer kind {self.kind!r}")

    def to_json(self):
        d = asdict(self)
        d["params"] = [{"name": p.name, "shape": list(p.shape), "is_bias": p.is_bias,
                        "is_bn_param": p.is_bn_param} for p in self.param_specs()]
        return d


def conv(name, in_ch, out_ch, kernel=3, stride=1, padding=None, bias=False) -> LayerSpec:
    if padding is None:
        padding = kernel // 2
    return LayerSpec("conv", name, dict(in_ch=in_ch, out_ch=out_ch, kernel=kernel, stride=stride,
                                        padding=padding, bias=bias))


def linear(name, in_features, out_features, bias=True) -> LayerSpec:
    return LayerSpec("linear", name, dict(in_features=in_features, out_features=out_features, bias=bias))


def bn(name, channels) -> LayerSpec:
    return LayerSpec("bn", name, dict(channels=channels))


def relu(name="relu") -> LayerSpec:
    return LayerSpec("relu", name)


def init_params(spec: LayerSpec, rng: np.random.Generator, dtype="f64") -> list[np.ndarray]:
    """Kaiming-uniform (fan-in, ReLU gain) weights; zero biases and beta; unit gamma."""
    dt = T.resolve_dtype(dtype)
    out = []
    for p in spec.param_specs():
        if p.is_bias or p.name.endswith(".beta"):
            out.append(np.zeros(p.shape, dtype=dt))
        elif p.name.endswith(".gamma"):
            out.append(np.ones(p.shape, dtype=dt))
        else:
            fan_in = int(np.prod(p.shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            out.append(rng.uniform(-bound, bound, size=p.shape).astype(dt))
    return out


# -- batch normalisation -----------------------------------------------------

def _bn_axes(x):
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bcast(v, x):
    return v.reshape((1, -1) + (1,) * (x.ndim - 2))


@register("batchnorm")
class _BatchNorm:
    @staticmethod
    def forward(x, gamma, beta, state: BatchNormState, mode: str):
        if x.ndim not in (2, 4) or x.shape[1] != state.running_mean.shape[0]:
            raise T.ShapeError("batchnorm", x.shape, state.running_mean.shape)
        dt = x.dtype.type
        if mode == "eval":
            mean = state.running_mean.astype(x.dtype)
            inv = dt(1) / np.sqrt(state.running_var.astype(x.dtype) + dt(state.eps))
            xhat = (x - _bcast(mean, x)) * _bcast(inv, x)
            return _bcast(gamma, x) * xhat + _bcast(beta, x), (xhat, inv, gamma, "eval")
        axes = _bn_axes(x)
        mean = x.mean(axis=axes)
        xc = x - _bcast(mean, x)
        var = (xc * xc).mean(axis=axes)
        inv = dt(1) / np.sqrt(var + dt(state.eps))
        xhat = xc * _bcast(inv, x)
        if mode == "train_update":
            n = x.size // x.shape[1]
            state.update_running_stats(mean, var * dt(n / max(n - 1, 1)))
        elif mode != "train":
            raise ValueError(f"unknown batch-norm mode {mode!r}")
        return _bcast(gamma, x) * xhat + _bcast(beta, x), (xhat, inv, gamma, "train")

    @staticmethod
    def vjp(g, saved, state, mode):
        xhat, inv, gamma, kind = saved
        axes = _bn_axes(g)
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * _bcast(gamma, g)
        if kind == "eval":
            return dxhat * _bcast(inv, g), dgamma, dbeta
        n = g.dtype.type(g.size // g.shape[1])
        dx = _bcast(inv / n, g) * (n * dxhat - _bcast(dxhat.sum(axis=axes), g)
                                  - xhat * _bcast((dxhat * xhat).sum(axis=axes), g))
        return dx, dgamma, dbeta


def batchnorm_forward(x, gamma, beta, state: BatchNormState, mode: str = "train"):
    """Batch normalisation outside a graph.

    ``mode`` is one of ``"train"`` (batch statistics, running stats left
    alone), ``"train_update"`` (also folds the batch statistics into the
    running averages) or ``"eval"`` (running statistics).
    """
    mode = {"train-no-stat-update": "train", "train-with-stat-update": "train_update"}.get(mode, mode)
    return _BatchNorm.forward(x, gamma, beta, state, mode)[0]


# -- loss ---------------------------------------------------------------------

def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise T.ShapeError("cross_entropy", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"label out of range [0, {logits.shape[1]})")
    return labels


@register("cross_entropy")
class _CrossEntropy:
    @staticmethod
    def forward(logits, labels):
        labels = _check_labels(logits, labels)
        logp = _log_softmax(logits)
        n = logits.shape[0]
        loss = -logp[np.arange(n), labels].mean()
        return np.asarray(loss, dtype=logits.dtype), (np.exp(logp), labels)

    @staticmethod
    def vjp(g, saved, labels):
        p, labels = saved
        d = p.copy()
        d[np.arange(len(labels)), labels] -= 1
        return (d * (g / p.dtype.type(len(labels))),)


def cross_entropy_loss(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    loss, saved = _CrossEntropy.forward(logits, labels)
    (delta,) = _CrossEntropy.vjp(np.ones((), dtype=logits.dtype), saved, labels)
    return float(loss), delta


# -- layer application --------------------------------------------------------

class Layer:
    def __init__(self, spec: LayerSpec, dtype="f64"):
        self.spec = spec
        self.state = BatchNormState(spec.hyper["channels"], dtype=dtype) if spec.kind == "bn" else None

    @property
    def n_params(self) -> int:
        return len(self.spec.param_specs())

    def __call__(self, g: Graph, x: Var, p: Sequence[Var]) -> Var:
        k, h = self.spec.kind, self.spec.hyper
        if k == "conv":
            y = g.apply("conv2d", x, p[0], stride=h["stride"], padding=h["padding"])
            return g.apply("bias", y, p[1]) if h.get("bias") else y
        if k == "linear":
            y = g.apply("linear", x, p[0])
            return g.apply("bias", y, p[1]) if h.get("bias", True) else y
        if k == "bn":
            return g.apply("batchnorm", x, p[0], p[1], state=self.state, mode=g.bn_mode)
        if k == "relu":
            return g.apply("relu", x)
        if k == "maxpool":
            return g.apply("maxpool", x, kernel=h["kernel"], stride=h.get("stride"), padding=h.get("padding", 0))
        if k == "avgpool":
            return g.apply("avgpool", x, kernel=h["kernel"], stride=h.get("stride"))
        if k == "gap":
            return g.apply("global_avgpool", x)
        raise ValueError(f"unknown layer kind {k!r}")


class Sequential:
    """Layers applied in order, consuming a flat parameter list."""

    def __init__(self, specs: Sequence[LayerSpec], dtype="f64"):
        self.layers = [Layer(s, dtype) for s in specs]

    @property
    def specs(self):
        return [l.spec for l in self.layers]

    def param_specs(self) -> list[ParamSpec]:
        return [p for l in self.layers for p in l.spec.param_specs()]

    @property
    def bn_states(self):
        return [l.state for l in self.layers if l.state is not None]

    def init(self, rng, dtype="f64"):
        return [p for l in self.layers for p in init_params(l.spec, rng, dtype)]

    def __call__(self, g: Graph, x: Var, params: Sequence[Var]) -> Var:
        i = 0
        for layer in self.layers:
            n = layer.n_params
            x = layer(g, x, params[i:i + n])
            i += n
        return x
