"""Monolithic backpropagation trainer used as the zero-staleness oracle.

One loop over micro-batches: forward through every stage at the current
parameters, loss, then a backward sweep from the last stage to the first,
then the accumulate-and-step rule on every stage. Batch-norm running
statistics move only while the backward sweep rebuilds each stage's graph,
the same rule the pipelined engines follow. Inputs of reversible stages are
recovered by inverting the block, as the pipelined runtime does, so the two
paths can be compared bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..autograd import evaluate, record, vjp
from ..optim import SgdState, sgd_step
from ..revnet import rev_inverse
from .stage import RuntimeConfig, tail_loss


@dataclass
class ReferenceTrainer:
    plan: object
    params: list
    config: RuntimeConfig
    step: int = 1
    losses: list = field(default_factory=list)

    def __post_init__(self):
        c = self.config
        self.opt = [SgdState.for_params(p, [ps.decay_exempt for ps in st.param_specs], c.momentum, c.weight_decay)
                    for st, p in zip(self.plan.stages, self.params)]
        self.acc = [[np.zeros_like(a) for a in p] for p in self.params]
        self.updates = 0
        self.correct = 0
        self.seen = 0

    def gradients(self, x, labels):
        """Loss and per-stage parameter gradients for one micro-batch."""
        stages = self.plan.stages
        acts = [x]
        for st, th in zip(stages[:-1], self.params[:-1]):
            acts.append(evaluate(st.block, acts[-1], th, bn_mode="train"))
        stash = {}
        loss, g = record(tail_loss(stages[-1].block, labels, stash), acts[-1], self.params[-1],
                         bn_mode="train_update")
        self.correct += int((stash["logits"].argmax(axis=1) == labels).sum())
        self.seen += len(labels)
        gp = vjp(g, np.ones_like(loss))
        grads = [None] * len(stages)
        grads[-1] = gp.param_grads
        delta, y = gp.input_grad, acts[-1]
        for j in range(len(stages) - 2, -1, -1):
            st, th = stages[j], self.params[j]
            xin = rev_inverse(st.block, y, th, bn_mode="train") if st.kind == "reversible" else acts[j]
            _, g = record(st.block, xin, th, bn_mode="train_update")
            gp = vjp(g, delta)
            grads[j] = gp.param_grads
            delta, y = gp.input_grad, xin
        return float(loss), grads

    def train_step(self, x, labels) -> float:
        loss, grads = self.gradients(x, labels)
        k = self.config.k
        inv_k = 1.0 / k
        for acc, gs in zip(self.acc, grads):
            for a, g in zip(acc, gs):
                a += g * a.dtype.type(inv_k)
        if self.step % k == 0:
            lr = self.config.lr_for(self.step)
            for th, acc, opt in zip(self.params, self.acc, self.opt):
                sgd_step(th, acc, opt, lr)
                for a in acc:
                    a.fill(0)
            self.updates += 1
        self.step += 1
        self.losses.append(loss)
        return loss

    def run(self, data):
        return [self.train_step(x, labels) for x, labels in data]
