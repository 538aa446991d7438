"""Central finite-difference checks of vector-Jacobian products.

The error measure is ``||analytic - numeric|| / max(||analytic||, ||numeric||)``
over each input or parameter tensor, computed in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn, revnet  # noqa: F401  revnet registers the stream primitives
from .autograd import PRIMITIVES, Graph, record, vjp

H = 1e-5
RTOL = 1e-4


@dataclass
class CheckResult:
    name: str
    rel_error: float
    ok: bool
    per_input: list = field(default_factory=list)

    def __str__(self):
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: rel. error {self.rel_error:.2e}"


def rel_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def numeric_grad(fn: Callable[[], float], x: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. every entry of ``x`` (mutated, then restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn()
        flat[i] = old - h
        fm = fn()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_primitive(name: str, inputs: list[np.ndarray], attrs: dict | None = None, rng=None,
                    h: float = H, rtol: float = RTOL) -> CheckResult:
    """Compare a primitive's VJP against finite differences of ``<w, f(inputs)>``."""
    attrs = attrs or {}
    rng = rng if rng is not None else np.random.default_rng(0)
    prim = PRIMITIVES[name]
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    out0, _ = prim.forward(*inputs, **attrs)
    outs0 = out0 if prim.n_out > 1 else (out0,)
    weights = [rng.standard_normal(np.shape(o)) for o in outs0]

    def scalar():
        out, _ = prim.forward(*inputs, **attrs)
        outs = out if prim.n_out > 1 else (out,)
        return float(sum(np.sum(w * o) for w, o in zip(weights, outs)))

    g = Graph()
    vs = [g.leaf(a) for a in inputs]
    res = g.apply(name, *vs, **attrs)
    res = res if prim.n_out > 1 else (res,)
    grads = g.backward(list(res), weights)
    errs = []
    for v, a in zip(vs, inputs):
        analytic = grads.get(v.id, np.zeros_like(a))
        errs.append(rel_error(analytic, numeric_grad(scalar, a, h)))
    worst = max(errs) if errs else 0.0
    return CheckResult(name, worst, worst <= rtol, errs)


def check_stage(name: str, f, x: np.ndarray, params: list[np.ndarray], rng=None, bn_mode="train",
                h: float = H, rtol: float = RTOL) -> CheckResult:
    """Finite-difference check of a whole stage function w.r.t. its input and every parameter."""
    rng = rng if rng is not None else np.random.default_rng(0)
    y, graph = record(f, x, params, bn_mode=bn_mode)
    w = rng.standard_normal(y.shape)
    gp = vjp(graph, w)

    def scalar():
        out, _ = record(f, x, params, bn_mode=bn_mode)
        return float(np.sum(w * out))

    errs = [rel_error(gp.input_grad, numeric_grad(scalar, x, h))]
    for p, gpar in zip(params, gp.param_grads):
        errs.append(rel_error(gpar, numeric_grad(scalar, p, h)))
    worst = max(errs)
    return CheckResult(name, worst, worst <= rtol, errs)


def primitive_cases(rng) -> list[tuple[str, list[np.ndarray], dict]]:
    """A small random instance of every registered primitive."""
    r = rng.standard_normal

    def away_from_zero(shape):
        a = r(shape)
        return np.where(np.abs(a) < 0.1, 0.1 * np.sign(a) + a, a)

    def distinct(shape):
        return rng.permutation(int(np.prod(shape))).reshape(shape) * 0.1 + 0.01 * r(shape)

    bn_state = nn.BatchNormState(3)
    bn_state.running_mean = r(3)
    bn_state.running_var = rng.uniform(0.5, 2.0, 3)
    cases = [
        ("identity", [r((2, 3))], {}),
        ("add", [r((2, 3)), r((2, 3))], {}),
        ("sub", [r((2, 3)), r((2, 3))], {}),
        ("scale", [r((2, 3))], {"c": 1.7}),
        ("matmul", [r((3, 4)), r((4, 2))], {}),
        ("linear", [r((3, 4)), r((5, 4))], {}),
        ("bias", [r((2, 3, 2, 2)), r(3)], {}),
        ("bias", [r((2, 3)), r(3)], {}),
        ("relu", [away_from_zero((2, 3, 3))], {}),
        ("conv2d", [r((2, 3, 5, 5)), r((4, 3, 3, 3))], {"stride": 1, "padding": 1}),
        ("conv2d", [r((2, 2, 6, 6)), r((3, 2, 3, 3))], {"stride": 2, "padding": 1}),
        ("conv2d", [r((1, 2, 5, 5)), r((2, 2, 1, 1))], {"stride": 2, "padding": 0}),
        ("avgpool", [r((2, 2, 4, 4))], {"kernel": 2}),
        ("maxpool", [distinct((2, 2, 5, 5))], {"kernel": 3, "stride": 2, "padding": 1}),
        ("global_avgpool", [r((2, 3, 3, 3))], {}),
        ("split_channels", [r((2, 4, 2, 2))], {}),
        ("concat_channels", [r((2, 2, 2, 2)), r((2, 3, 2, 2))], {}),
        ("flatten", [r((2, 3, 2, 2))], {}),
        ("batchnorm", [r((4, 3, 2, 2)), r(3), r(3)], {"state": nn.BatchNormState(3), "mode": "train"}),
        ("batchnorm", [r((6, 3)), r(3), r(3)], {"state": nn.BatchNormState(3), "mode": "train"}),
        ("batchnorm", [r((4, 3, 2, 2)), r(3), r(3)], {"state": bn_state, "mode": "eval"}),
        ("cross_entropy", [r((4, 10))], {"labels": rng.integers(0, 10, 4)}),
        ("fold_streams", [r((2, 4, 2, 2))], {}),
        ("unfold_streams", [r((4, 2, 2, 2))], {}),
    ]
    return cases


def check_all_primitives(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, inputs, attrs in primitive_cases(rng):
        res = check_primitive(name, inputs, attrs, rng)
        out.append(res)
    return out
