"""Property suites runnable from the command line (``petra verify <suite>``)."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .autograd import record, vjp
from .gradcheck import check_all_primitives, check_stage
from .revnet import ReversibleBlock, build_small, regroup, rev_backward_fused, rev_forward, rev_inverse
from .runtime import ReferenceTrainer, RuntimeConfig, make_stages, run_lockstep, run_rounds, run_threads


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""

    def line(self):
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}" + (f"  ({self.detail})" if self.detail else "")


def toy_batches(n, batch, shape, classes, rng, dtype=np.float64):
    return [(rng.standard_normal((batch,) + tuple(shape)).astype(dtype), rng.integers(0, classes, batch))
            for _ in range(n)]


def params_equal(a, b) -> bool:
    return all(np.array_equal(x, y) for pa, pb in zip(a, b) for x, y in zip(pa, pb))


# -- suites -----------------------------------------------------------------------

def suite_grad(seed=0) -> list[Check]:
    out = [Check(f"vjp {r.name}", r.ok, f"rel {r.rel_error:.1e}") for r in check_all_primitives(seed)]
    rng = T.make_rng(seed)
    plan, params = build_small(stages=3, width=4, rng=rng, input_hw=4, classes=3)
    x = rng.standard_normal((4, 3, 4, 4))
    labels = rng.integers(0, 3, 4)

    def net(g, x, ps):
        i = 0
        for st in plan.stages:
            n = len(st.param_specs)
            x = st.block(g, x, ps[i:i + n])
            i += n
        return g.apply("cross_entropy", x, labels=labels)

    flat = [p for ps in params for p in ps]
    res = check_stage("3-stage network", lambda g, x, ps: net(g, x, ps), x, flat, rng)
    out.append(Check("finite differences, 3-stage network", res.ok, f"rel {res.rel_error:.1e}"))
    return out


def suite_reversibility(seed=0, draws=100) -> list[Check]:
    rng = T.make_rng(seed)
    worst = {"f32": 0.0, "f64": 0.0}
    fused_equal = True
    for i in range(draws):
        c = 2 * int(rng.integers(1, 4))
        for dt in ("f32", "f64"):
            blk = ReversibleBlock(c, dtype=dt)
            th = blk.init(rng, dt)
            x = rng.standard_normal((3, c, 4, 4)).astype(T.resolve_dtype(dt))
            y = rev_forward(blk, x, th)
            worst[dt] = max(worst[dt], float(np.max(np.abs(rev_inverse(blk, y, th) - x))))
        blk = ReversibleBlock(c)
        th = blk.init(rng)
        y = rng.standard_normal((3, c, 4, 4))
        d = rng.standard_normal(y.shape)
        xf, dinf, gf = rev_backward_fused(blk, y, d, th, bn_mode="train")
        xn = rev_inverse(blk, y, th, bn_mode="train")
        _, g = record(blk, xn, th, bn_mode="train")
        gp = vjp(g, d)
        fused_equal &= (np.array_equal(xf, xn) and np.array_equal(dinf, gp.input_grad)
                        and all(np.array_equal(a, b) for a, b in zip(gf, gp.param_grads)))
    return [Check(f"inverse(forward(x)) == x, f32, {draws} blocks", worst["f32"] < 1e-5, f"max {worst['f32']:.1e}"),
            Check(f"inverse(forward(x)) == x, f64, {draws} blocks", worst["f64"] < 1e-11, f"max {worst['f64']:.1e}"),
            Check("fused backward bitwise equals inverse + record + vjp", fused_equal)]


def steady_state_delays(log, J):
    """Per stage, the set of delays seen once the pipeline is full and before it drains."""
    out = {}
    for s in log.stages:
        d = 2 * (J - s.j)
        fwd = {}
        delays = []
        t = 1
        for e in s.events:
            if e.event == "forward" or e.event == "loss":
                fwd[e.micro_batch_id] = t
            if e.event in ("backward", "loss"):
                delays.append((e.micro_batch_id, t - fwd.pop(e.micro_batch_id)))
                t += 1
        # skip the first d micro-batches (warm-up) and the last 2J (drain)
        n = len(delays)
        out[s.j] = sorted({v for i, (_, v) in enumerate(delays) if d <= i < n - 2 * J}) or [d]
    return out


def suite_staleness(J=10, micro_batches=200, seed=0, engine="rounds") -> list[Check]:
    rng = T.make_rng(seed)
    plan, params = build_small(stages=J, width=4, rng=rng, input_hw=4, classes=4)
    data = toy_batches(micro_batches, 4, plan.input_shape, 4, rng)
    run = run_rounds if engine == "rounds" else run_threads
    log = run(plan, params, data, RuntimeConfig(k=1, lr=0.01))
    checks = []
    for s in log.stages:
        d = 2 * (J - s.j)
        hist = dict(s.delays)
        mode = max(hist, key=hist.get)
        checks.append(Check(f"stage {s.j}: delay mode == 2(J-j) = {d}", mode == d, f"histogram {sorted(hist.items())[-3:]}"))
    if engine == "rounds":
        steady = steady_state_delays(log, J)
        for j, vals in steady.items():
            checks.append(Check(f"stage {j}: steady-state delays == {{{2 * (J - j)}}}", vals == [2 * (J - j)],
                                f"seen {vals}"))
    return checks


def suite_oracle(steps=20, seed=0) -> list[Check]:
    rng = T.make_rng(seed)
    plan, params = build_small(stages=4, width=8, rng=rng, input_hw=8, classes=10)
    data = toy_batches(steps, 8, plan.input_shape, 10, rng)
    cfg = RuntimeConfig(k=2, lr=0.05, momentum=0.9, weight_decay=5e-4)
    p_ref, q_ref = copy.deepcopy(plan), copy.deepcopy(params)
    ref = ReferenceTrainer(p_ref, q_ref, cfg)
    traj_ok = True
    p_ls, q_ls = copy.deepcopy(plan), copy.deepcopy(params)
    stages = make_stages(p_ls, q_ls, cfg)
    for i, b in enumerate(data):
        ref.train_step(*b)
        run_lockstep(p_ls, q_ls, [b], cfg, stages=stages, mb_start=i)
        traj_ok &= params_equal(q_ref, q_ls)
    checks = [Check(f"lockstep == reference trainer, {steps} steps, bitwise", traj_ok)]
    one, q1 = build_small(stages=4, width=8, rng=T.make_rng(seed), input_hw=8, classes=10)
    merged, qm = regroup(one, q1, [list(range(one.J))])
    p_ref2, q_ref2 = copy.deepcopy(merged), copy.deepcopy(qm)
    ReferenceTrainer(p_ref2, q_ref2, cfg).run(data)
    run_threads(merged, qm, data, cfg)
    checks.append(Check("threads engine with J=1 == reference trainer, bitwise", params_equal(q_ref2, qm)))
    return checks


SUITES = {"grad": suite_grad, "reversibility": suite_reversibility, "staleness": suite_staleness,
          "oracle": suite_oracle}
