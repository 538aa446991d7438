"""Reversible and residual blocks, network builders and stage partitioning.

A reversible block couples two channel streams::

    y1 = x2
    y2 = x1 + F(x2)

so the input is recovered from the output by ``x2 = y1, x1 = y2 - F(y1)``.
``F`` is a residual branch without skip connection acting on one stream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T
from .autograd import Graph, Var, evaluate, record, register, vjp


class Block:
    """A stage function ``F(graph, x, params) -> y`` plus its parameter layout."""

    reversible = False
    type_name = "block"

    def param_specs(self) -> list[nn.ParamSpec]:
        raise NotImplementedError

    def init(self, rng, dtype="f64") -> list[np.ndarray]:
        raise NotImplementedError

    @property
    def bn_states(self) -> list[nn.BatchNormState]:
        return []

    def out_shape(self, in_shape: tuple) -> tuple:
        raise NotImplementedError

    def layer_specs(self) -> list[nn.LayerSpec]:
        return []

    def config(self) -> dict:
        raise NotImplementedError

    def to_json(self) -> dict:
        return {"type": self.type_name, "config": self.config(),
                "layers": [s.to_json() for s in self.layer_specs()]}

    def __call__(self, g: Graph, x: Var, params: Sequence[Var]) -> Var:
        raise NotImplementedError


def _prefixed(seq: nn.Sequential, prefix: str) -> list[nn.LayerSpec]:
    return [nn.LayerSpec(s.kind, f"{prefix}.{s.name}", dict(s.hyper)) for s in seq.specs]


class _SeqBlock(Block):
    """Blocks made of named Sequential parts, parameters concatenated in order."""

    parts: list[tuple[str, nn.Sequential]]

    def layer_specs(self):
        return [s for name, seq in self.parts for s in _prefixed(seq, name)]

    def param_specs(self):
        return [p for s in self.layer_specs() for p in s.param_specs()]

    def init(self, rng, dtype="f64"):
        return [p for _, seq in self.parts for p in seq.init(rng, dtype)]

    @property
    def bn_states(self):
        return [st for _, seq in self.parts for st in seq.bn_states]

    def _split_params(self, params):
        out, i = [], 0
        for _, seq in self.parts:
            n = len(seq.param_specs())
            out.append(params[i:i + n])
            i += n
        return out


class Stem(_SeqBlock):
    type_name = "stem"

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, maxpool=False, dtype="f64"):
        self.in_ch, self.out_ch, self.kernel, self.stride, self.maxpool = in_ch, out_ch, kernel, stride, maxpool
        specs = [nn.conv("conv", in_ch, out_ch, kernel, stride), nn.bn("bn", out_ch), nn.relu()]
        if maxpool:
            specs.append(nn.LayerSpec("maxpool", "pool", dict(kernel=3, stride=2, padding=1)))
        self.parts = [("stem", nn.Sequential(specs, dtype))]

    def config(self):
        return dict(in_ch=self.in_ch, out_ch=self.out_ch, kernel=self.kernel, stride=self.stride,
                    maxpool=self.maxpool)

    def out_shape(self, s):
        c, h, w = s
        pad = self.kernel // 2
        h = (h + 2 * pad - self.kernel) // self.stride + 1
        w = (w + 2 * pad - self.kernel) // self.stride + 1
        if self.maxpool:
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        return (self.out_ch, h, w)

    def __call__(self, g, x, params):
        return self.parts[0][1](g, x, params)


def _branch(in_ch, out_ch, stride, bottleneck, dtype):
    """Residual branch without skip: conv-BN-ReLU-conv-BN (or the 1x1/3x3/1x1 bottleneck)."""
    if not bottleneck:
        return nn.Sequential([nn.conv("conv1", in_ch, out_ch, 3, stride), nn.bn("bn1", out_ch), nn.relu(),
                              nn.conv("conv2", out_ch, out_ch, 3, 1), nn.bn("bn2", out_ch)], dtype)
    mid = out_ch // 4
    return nn.Sequential([nn.conv("conv1", in_ch, mid, 1), nn.bn("bn1", mid), nn.relu(),
                          nn.conv("conv2", mid, mid, 3, stride), nn.bn("bn2", mid), nn.relu(),
                          nn.conv("conv3", mid, out_ch, 1), nn.bn("bn3", out_ch)], dtype)


class ReversibleBlock(_SeqBlock):
    reversible = True
    type_name = "reversible"

    def __init__(self, channels, bottleneck=False, dtype="f64"):
        if channels % 2:
            raise ValueError(f"reversible block needs an even channel count, got {channels}")
        self.channels, self.bottleneck = channels, bottleneck
        half = channels // 2
        self.parts = [("f", _branch(half, half, 1, bottleneck, dtype))]
        self.f_evals = 0

    def config(self):
        return dict(channels=self.channels, bottleneck=self.bottleneck)

    def out_shape(self, s):
        if s[0] != self.channels:
            raise T.ShapeError("reversible block", s, (self.channels,))
        return tuple(s)

    def f_tilde(self, g, x, params):
        self.f_evals += 1
        return self.parts[0][1](g, x, params)

    def __call__(self, g, x, params):
        x1, x2 = g.apply("split_channels", x)
        y2 = g.apply("add", x1, self.f_tilde(g, x2, params))
        return g.apply("concat_channels", x2, y2)


@register("fold_streams")
class _FoldStreams:
    """(N, 2c, H, W) -> (2N, c, H, W): stack the two streams along the batch."""

    @staticmethod
    def forward(x):
        n, c2, h, w = x.shape
        if c2 % 2:
            raise T.ShapeError("fold_streams", x.shape, detail="channel extent must be even")
        return np.ascontiguousarray(x.reshape(n, 2, c2 // 2, h, w).transpose(1, 0, 2, 3, 4)
                                    .reshape(2 * n, c2 // 2, h, w)), ()

    @staticmethod
    def vjp(g, saved):
        return (_UnfoldStreams.forward(g)[0],)


@register("unfold_streams")
class _UnfoldStreams:
    @staticmethod
    def forward(x):
        n2, c, h, w = x.shape
        return np.ascontiguousarray(x.reshape(2, n2 // 2, c, h, w).transpose(1, 0, 2, 3, 4)
                                    .reshape(n2 // 2, 2 * c, h, w)), ()

    @staticmethod
    def vjp(g, saved):
        return (_FoldStreams.forward(g)[0],)


class ResidualBlock(_SeqBlock):
    """Standard residual block, ``relu(branch(x) + shortcut(x))``.

    ``streams`` selects how a two-stream input is handled:

    * ``"single"``: ordinary ResNet block on the full tensor.
    * ``"per_stream"``: the same block (shared weights) applied to each
      stream; ``in_ch``/``out_ch`` are per-stream widths.
    * ``"merge"``: one block reads both streams (``in_ch`` is the full width)
      and its output is copied into both output streams.
    """

    type_name = "residual"

    def __init__(self, in_ch, out_ch, stride=1, bottleneck=False, streams="single", dtype="f64"):
        if streams not in ("single", "per_stream", "merge"):
            raise ValueError(f"unknown stream mode {streams!r}")
        self.in_ch, self.out_ch, self.stride = in_ch, out_ch, stride
        self.bottleneck, self.streams = bottleneck, streams
        self.parts = [("main", _branch(in_ch, out_ch, stride, bottleneck, dtype))]
        if stride != 1 or in_ch != out_ch:
            self.parts.append(("short", nn.Sequential([nn.conv("proj", in_ch, out_ch, 1, stride, padding=0),
                                                       nn.bn("bn", out_ch)], dtype)))

    def config(self):
        return dict(in_ch=self.in_ch, out_ch=self.out_ch, stride=self.stride, bottleneck=self.bottleneck,
                    streams=self.streams)

    def out_shape(self, s):
        c, h, w = s
        h, w = (h - 1) // self.stride + 1, (w - 1) // self.stride + 1
        return ((self.out_ch if self.streams == "single" else 2 * self.out_ch), h, w)

    def _plain(self, g, x, params):
        ps = self._split_params(params)
        y = self.parts[0][1](g, x, ps[0])
        s = self.parts[1][1](g, x, ps[1]) if len(self.parts) > 1 else x
        return g.apply("relu", g.apply("add", y, s))

    def __call__(self, g, x, params):
        if self.streams == "per_stream":
            return g.apply("unfold_streams", self._plain(g, g.apply("fold_streams", x), params))
        y = self._plain(g, x, params)
        if self.streams == "merge":
            return g.apply("concat_channels", y, y)
        return y


class Classifier(_SeqBlock):
    """Global average pool followed by a linear layer; emits logits."""

    type_name = "classifier"

    def __init__(self, in_ch, classes, dtype="f64"):
        self.in_ch, self.classes = in_ch, classes
        self.parts = [("head", nn.Sequential([nn.LayerSpec("gap", "gap"), nn.linear("fc", in_ch, classes)], dtype))]

    def config(self):
        return dict(in_ch=self.in_ch, classes=self.classes)

    def out_shape(self, s):
        return (self.classes,)

    def __call__(self, g, x, params):
        return self.parts[0][1](g, x, params)


class Composite(Block):
    """Several blocks evaluated in sequence as one stage."""

    type_name = "composite"

    def __init__(self, blocks: Sequence[Block]):
        self.blocks = list(blocks)

    @property
    def reversible(self):
        return False

    def config(self):
        return {"blocks": [b.to_json() for b in self.blocks]}

    def to_json(self):
        return {"type": self.type_name, "config": self.config(), "layers": []}

    def layer_specs(self):
        return [nn.LayerSpec(s.kind, f"b{i}.{s.name}", dict(s.hyper))
                for i, b in enumerate(self.blocks) for s in b.layer_specs()]

    def param_specs(self):
        return [nn.ParamSpec(f"b{i}.{p.name}", p.shape, p.is_bias, p.is_bn_param)
                for i, b in enumerate(self.blocks) for p in b.param_specs()]

    def init(self, rng, dtype="f64"):
        return [p for b in self.blocks for p in b.init(rng, dtype)]

    @property
    def bn_states(self):
        return [s for b in self.blocks for s in b.bn_states]

    def out_shape(self, s):
        for b in self.blocks:
            s = b.out_shape(s)
        return s

    def __call__(self, g, x, params):
        i = 0
        for b in self.blocks:
            n = len(b.param_specs())
            x = b(g, x, params[i:i + n])
            i += n
        return x


_BLOCK_TYPES = {c.type_name: c for c in (Stem, ReversibleBlock, ResidualBlock, Classifier)}


def block_from_json(d: dict, dtype="f64") -> Block:
    if d["type"] == "composite":
        return Composite([block_from_json(b, dtype) for b in d["config"]["blocks"]])
    return _BLOCK_TYPES[d["type"]](**d["config"], dtype=dtype)


# -- reversible coupling ------------------------------------------------------

def rev_forward(block: ReversibleBlock, x, params, bn_mode="train"):
    return evaluate(block, x, params, bn_mode=bn_mode)


def rev_inverse(block: ReversibleBlock, y, params, bn_mode="train"):
    """Reconstruct the block input from its output at the given parameters."""
    y1, y2 = T.split_channels(y)
    f = evaluate(block.f_tilde, y1, params, bn_mode=bn_mode)
    return T.concat_channels(T.sub(y2, f), y1)


def rev_backward_fused(block: ReversibleBlock, y, delta_out, params, bn_mode="train_update"):
    """Reconstruct the input and back-propagate with a single evaluation of F.

    The graph recorded while computing ``F(y1)`` for the reconstruction is the
    one the vector-Jacobian product runs through. Returns ``(x, delta_in,
    param_grads)``.
    """
    if np.shape(delta_out) != np.shape(y):
        raise T.ShapeError("rev_backward_fused", np.shape(y), np.shape(delta_out))
    y1, y2 = T.split_channels(y)
    d1, d2 = T.split_channels(delta_out)
    f, graph = record(block.f_tilde, y1, params, bn_mode=bn_mode)
    x = T.concat_channels(T.sub(y2, f), y1)
    gp = vjp(graph, d2)
    delta_in = T.concat_channels(d2, d1 + gp.input_grad)
    return x, delta_in, gp.param_grads


# -- plans ----------------------------------------------------------------------

STAGE_KINDS = ("head", "reversible", "non-reversible", "tail")


@dataclass
class StageSpec:
    stage_id: int
    kind: str
    block: Block
    in_shape: tuple
    out_shape: tuple
    device: int = 0

    @property
    def param_specs(self):
        return self.block.param_specs()

    def to_json(self):
        return {"stage_id": self.stage_id, "kind": self.kind, "device": self.device,
                "in_shape": list(self.in_shape), "out_shape": list(self.out_shape),
                "block": self.block.to_json()}


@dataclass
class NetworkPlan:
    name: str
    dataset: str
    input_shape: tuple
    classes: int
    stages: list[StageSpec] = field(default_factory=list)
    dtype: str = "f64"

    @property
    def J(self) -> int:
        return len(self.stages)

    def num_params(self) -> int:
        return sum(p.numel for s in self.stages for p in s.param_specs)

    def to_json(self) -> dict:
        return {"name": self.name, "dataset": self.dataset, "input_shape": list(self.input_shape),
                "classes": self.classes, "dtype": self.dtype, "stages": [s.to_json() for s in self.stages]}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    @classmethod
    def from_json(cls, d: dict) -> "NetworkPlan":
        stages = [StageSpec(s["stage_id"], s["kind"], block_from_json(s["block"], d.get("dtype", "f64")),
                            tuple(s["in_shape"]), tuple(s["out_shape"]), s.get("device", 0))
                  for s in d["stages"]]
        return cls(d["name"], d["dataset"], tuple(d["input_shape"]), d["classes"], stages, d.get("dtype", "f64"))


def _assemble(name, dataset, input_shape, classes, blocks, dtype):
    stages, shape = [], tuple(input_shape)
    n = len(blocks)
    for i, b in enumerate(blocks):
        if i == 0:
            kind = "head"
        elif i == n - 1:
            kind = "tail"
        else:
            kind = "reversible" if b.reversible else "non-reversible"
        out = b.out_shape(shape)
        stages.append(StageSpec(i + 1, kind, b, shape, out, device=i))
        shape = out
    if n == 1:
        stages[0].kind = "tail"
    return NetworkPlan(name, dataset, tuple(input_shape), classes, stages, dtype)


def init_plan(plan: NetworkPlan, rng) -> list[list[np.ndarray]]:
    return [s.block.init(rng, plan.dtype) for s in plan.stages]


_DEPTHS = {"18": ([2, 2, 2, 2], False), "34": ([3, 4, 6, 3], False), "50": ([3, 4, 6, 3], True)}
_DATASETS = {"cifar10": ((3, 32, 32), 10), "small": ((3, 8, 8), 10), "imagenet": ((3, 224, 224), 1000)}


def build_network(name: str, dataset: str = "cifar10", rng=None, dtype="f64", with_params=True):
    """Build a named ResNet/RevNet; one residual or reversible block per stage.

    ``dataset='imagenet'`` gives the 7x7 stride-2 stem with max-pool and a
    1000-way head; the other datasets use a 3x3 stem without max-pool.
    Returns ``(plan, params)``; ``params`` is None when ``with_params`` is false.
    """
    family, depth = name[:6], name[6:]
    if family not in ("revnet", "resnet") or depth not in _DEPTHS:
        raise ValueError(f"unknown network {name!r}")
    if dataset not in _DATASETS:
        raise ValueError(f"unknown dataset {dataset!r}")
    counts, bottleneck = _DEPTHS[depth]
    input_shape, classes = _DATASETS[dataset]
    rev = family == "revnet"
    widths = [64, 128, 256, 512]
    expansion = 4 if bottleneck else 1
    mult = 2 if rev else 1
    if dataset == "imagenet":
        blocks: list[Block] = [Stem(3, 64 * mult, kernel=7, stride=2, maxpool=True, dtype=dtype)]
    else:
        blocks = [Stem(3, 64 * mult, kernel=3, stride=1, dtype=dtype)]
    in_w = 64  # per-stream width
    for li, (w, n) in enumerate(zip(widths, counts)):
        out_w = w * expansion
        for bi in range(n):
            stride = 2 if (li > 0 and bi == 0) else 1
            if bi == 0 and (stride != 1 or in_w != out_w):
                if not rev:
                    blocks.append(ResidualBlock(in_w, out_w, stride, bottleneck, dtype=dtype))
                elif bottleneck:
                    blocks.append(ResidualBlock(2 * in_w, out_w, stride, True, streams="merge", dtype=dtype))
                else:
                    blocks.append(ResidualBlock(in_w, out_w, stride, False, streams="per_stream", dtype=dtype))
            elif rev:
                blocks.append(ReversibleBlock(2 * out_w, bottleneck, dtype=dtype))
            else:
                blocks.append(ResidualBlock(out_w, out_w, 1, bottleneck, dtype=dtype))
        in_w = out_w
    blocks.append(Classifier(in_w * mult, classes, dtype=dtype))
    plan = _assemble(name, dataset, input_shape, classes, blocks, dtype)
    params = init_plan(plan, rng if rng is not None else T.make_rng(0)) if with_params else None
    return plan, params


def build_small(stages: int = 4, width: int = 32, rng=None, in_channels: int = 3, classes: int = 10,
                input_hw: int = 8, dtype="f64", downsample_at: int | None = None, head_stride: int = 1):
    """Desk-scale RevNet: stem, ``stages - 2`` reversible blocks, classifier.

    ``downsample_at`` (a stage index in ``2..stages-1``) replaces that
    reversible block with a non-reversible stride-2 block that doubles the
    channel count, so runs also exercise buffered stages.
    """
    if stages < 2:
        raise ValueError("a plan needs at least a head and a tail stage")
    if width % 2:
        raise ValueError("width must be even")
    blocks: list[Block] = [Stem(in_channels, width, 3, head_stride, dtype=dtype)]
    w = width
    for j in range(2, stages):
        if j == downsample_at:
            blocks.append(ResidualBlock(w // 2, w, 2, False, streams="per_stream", dtype=dtype))
            w *= 2
        else:
            blocks.append(ReversibleBlock(w, dtype=dtype))
    blocks.append(Classifier(w, classes, dtype=dtype))
    plan = _assemble(f"small{stages}x{width}", "small", (in_channels, input_hw, input_hw), classes, blocks, dtype)
    return plan, init_plan(plan, rng if rng is not None else T.make_rng(0))


def regroup(plan: NetworkPlan, params, groups: Sequence[Sequence[int]]):
    """Merge consecutive stages (0-based indices) into composite stages.

    Blocks and parameter arrays are shared with the source plan.
    """
    flat = [i for g in groups for i in g]
    if flat != list(range(plan.J)):
        raise ValueError("groups must partition the stages in order")
    blocks, new_params = [], []
    for g in groups:
        bs = [plan.stages[i].block for i in g]
        blocks.append(bs[0] if len(bs) == 1 else Composite(bs))
        new_params.append([p for i in g for p in params[i]])
    new = _assemble(plan.name, plan.dataset, plan.input_shape, plan.classes, blocks, plan.dtype)
    return new, new_params
