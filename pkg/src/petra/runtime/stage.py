"""One worker's state and its forward / backward / tail steps.

A stage keeps a single copy of its parameters. Reversible stages hold no
activations between the forward and backward of a micro-batch: the backward
rebuilds its input from the output sent down by the next stage, using
whatever parameters the stage has at that moment. Non-reversible stages
(the head included) keep their inputs in a FIFO and recompute the graph.
"""

from __future__ import annotations

import itertools
from collections import Counter, deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..autograd import GradPair, evaluate, record, vjp
from ..optim import DivergenceError, LrSchedule, SgdState, lr_at, sgd_step
from ..revnet import StageSpec, rev_backward_fused
from .messages import Backward, Forward


class StageError(RuntimeError):
    pass


@dataclass
class RuntimeConfig:
    k: int = 1
    lr: float = 0.0
    schedule: LrSchedule | None = None
    momentum: float = 0.9
    weight_decay: float = 0.0
    queue_capacity: int = 4
    record_events: bool = True
    # called as grad_hook(stage_id, micro_batch_id, GradPair) on every backward
    grad_hook: Callable | None = None

    def lr_for(self, t: int) -> float:
        return self.lr if self.schedule is None else lr_at(self.schedule, t)


_seq = itertools.count()


@dataclass
class Event:
    seq: int
    epoch: int
    stage: int
    event: str
    micro_batch_id: int
    param_version: int
    loss: float | None = None
    lr: float | None = None


class StageState:
    def __init__(self, spec: StageSpec, params: list[np.ndarray], config: RuntimeConfig):
        self.spec = spec
        self.j = spec.stage_id
        self.kind = spec.kind
        self.block = spec.block
        self.params = params
        self.config = config
        self.k = config.k
        exempt = [p.decay_exempt for p in spec.param_specs]
        self.opt = SgdState.for_params(params, exempt, config.momentum, config.weight_decay)
        self.delta = [np.zeros_like(p) for p in params]
        self.t = 1
        self.buffer: deque = deque() if not self.reversible else None
        self.epoch = 0
        # instrumentation
        self.n_forward = 0
        self.n_backward = 0
        self.param_version = 0
        self.buffer_high_water = 0
        self.activation_high_water = 0
        self.delays: Counter = Counter()
        self.staleness: Counter = Counter()
        self.sent = Counter()
        self.sent_tensors = Counter()
        self.events: list[Event] = []
        self.losses: list[float] = []
        self.correct = 0  # tail only: training predictions that matched
        self.seen = 0
        self._stamps: dict[int, tuple[int, int]] = {}

    @property
    def reversible(self) -> bool:
        return self.kind == "reversible"

    @property
    def in_flight(self) -> int:
        return self.n_forward - self.n_backward

    def held_activations(self) -> int:
        """Activation tensors retained between a forward and its backward."""
        return 0 if self.buffer is None else len(self.buffer)

    def _log(self, event, mb, loss=None, lr=None):
        if self.config.record_events:
            self.events.append(Event(next(_seq), self.epoch, self.j, event, mb, self.param_version, loss, lr))

    def _check_input(self, x):
        if tuple(x.shape[1:]) != tuple(self.spec.in_shape):
            raise StageError(f"stage {self.j}: input shape {x.shape[1:]} != expected {tuple(self.spec.in_shape)}")

    def _stamp(self, mb):
        self._stamps[mb] = (self.t, self.param_version)

    def _unstamp(self, mb):
        t_f, v_f = self._stamps.pop(mb)
        self.delays[self.t - t_f] += 1
        self.staleness[self.param_version - v_f] += 1

    def note_sent(self, msg):
        self.sent[type(msg).__name__] += 1
        self.sent_tensors[type(msg).__name__] += len(msg.payload)

    def accumulate(self, grads):
        """Add ``grads / k`` to the accumulator; step the optimizer every ``k`` calls."""
        inv_k = 1.0 / self.k
        for d, g in zip(self.delta, grads):
            d += g * d.dtype.type(inv_k)
        if self.t % self.k == 0:
            lr = self.config.lr_for(self.t)
            sgd_step(self.params, self.delta, self.opt, lr)
            for d in self.delta:
                d.fill(0)
            self.param_version += 1
            self._log("update", -1, lr=lr)
        self.t += 1


def stage_forward(s: StageState, msg: Forward) -> Forward:
    s._check_input(msg.x)
    if not s.reversible:
        s.buffer.append((msg.mb, msg.x))
        s.buffer_high_water = max(s.buffer_high_water, len(s.buffer))
    s.activation_high_water = max(s.activation_high_water, s.held_activations())
    y = evaluate(s.block, msg.x, s.params, bn_mode="train")
    s._stamp(msg.mb)
    s.n_forward += 1
    s._log("forward", msg.mb)
    return Forward(msg.mb, y, msg.labels, s.param_version)


def stage_backward(s: StageState, msg: Backward) -> Backward:
    if tuple(msg.delta.shape[1:]) != tuple(s.spec.out_shape) or msg.delta.shape != msg.x.shape:
        raise StageError(f"stage {s.j}: backward shapes {msg.x.shape}/{msg.delta.shape} "
                         f"do not match output {tuple(s.spec.out_shape)}")
    if s.reversible:
        x, delta_in, grads = rev_backward_fused(s.block, msg.x, msg.delta, s.params, bn_mode="train_update")
    else:
        if not s.buffer:
            raise StageError(f"stage {s.j}: backward for micro-batch {msg.mb} with an empty input buffer")
        mb, x = s.buffer.popleft()
        if mb != msg.mb:
            raise StageError(f"stage {s.j}: buffer holds micro-batch {mb}, backward is for {msg.mb}")
        _, graph = record(s.block, x, s.params, bn_mode="train_update")
        gp = vjp(graph, msg.delta)
        delta_in, grads = gp.input_grad, gp.param_grads
    if s.config.grad_hook is not None:
        s.config.grad_hook(s.j, msg.mb, GradPair(delta_in, grads))
    s._unstamp(msg.mb)
    s.n_backward += 1
    s._log("backward", msg.mb)
    s.accumulate(grads)
    return Backward(msg.mb, x, delta_in, s.param_version)


def tail_loss(block, labels, stash: dict | None = None):
    """Stage function computing the mean cross-entropy of ``block``'s logits.

    When ``stash`` is given the logits are stored under ``"logits"``.
    """
    def f(g, x, params):
        logits = block(g, x, params)
        if stash is not None:
            stash["logits"] = logits.value
        return g.apply("cross_entropy", logits, labels=labels)
    return f


def tail_step(s: StageState, msg: Forward) -> tuple[Backward, float]:
    """Loss, input gradient and parameter update of the last stage in one step."""
    if msg.labels is None:
        raise StageError(f"stage {s.j}: forward message {msg.mb} carries no labels")
    s._check_input(msg.x)
    s._stamp(msg.mb)
    s.n_forward += 1
    stash = {}
    loss, graph = record(tail_loss(s.block, msg.labels, stash), msg.x, s.params, bn_mode="train_update")
    gp = vjp(graph, np.ones_like(loss))
    loss = float(loss)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss at micro-batch {msg.mb}")
    if s.config.grad_hook is not None:
        s.config.grad_hook(s.j, msg.mb, gp)
    s._unstamp(msg.mb)
    s.n_backward += 1
    s.losses.append(loss)
    s.correct += int((stash["logits"].argmax(axis=1) == msg.labels).sum())
    s.seen += len(msg.labels)
    s._log("loss", msg.mb, loss=loss)
    s.accumulate(gp.param_grads)
    return Backward(msg.mb, msg.x, gp.input_grad, s.param_version), loss


def make_stages(plan, params, config: RuntimeConfig) -> list[StageState]:
    if len(params) != plan.J:
        raise ValueError(f"{len(params)} parameter groups for {plan.J} stages")
    return [StageState(spec, p, config) for spec, p in zip(plan.stages, params)]
