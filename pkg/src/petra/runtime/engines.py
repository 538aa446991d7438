"""Three ways of driving the stage workers over a stream of micro-batches.

* ``lockstep``: one micro-batch goes all the way forward and back before the
  next one enters. No staleness; numerically equal to plain backprop.
* ``rounds``: a deterministic, single-threaded emulation of the decoupled
  schedule. Every round each stage handles at most one forward and one
  backward message, and messages sent in a round are delivered in the next.
* ``threads``: one OS thread per stage with bounded inbound queues.

All engines take ``data`` as a sequence of ``(x, labels)`` micro-batches and
may be handed already-built ``stages`` so that parameters, optimizer state and
step counters persist across epochs.
"""

from __future__ import annotations

import logging
import threading
from collections import deque

from .log import TrainLog
from .messages import Backward, EndOfStream, Forward
from .stage import RuntimeConfig, StageState, make_stages, stage_backward, stage_forward, tail_step

log = logging.getLogger(__name__)


class DeadlockError(RuntimeError):
    pass


class WorkerError(RuntimeError):
    def __init__(self, msg, cause=None, diagnostics=None):
        super().__init__(msg)
        self.cause = cause
        self.diagnostics = diagnostics or {}


def _prepare(plan, params, config, stages, epoch):
    if stages is None:
        stages = make_stages(plan, params, config)
    for s in stages:
        s.epoch = epoch
        s.events = []
    return stages


def _check_conservation(stages, injected):
    for s in stages:
        if not (s.n_forward == s.n_backward):
            raise RuntimeError(f"stage {s.j}: {s.n_forward} forwards vs {s.n_backward} backwards after drain")
    if stages and stages[0].n_forward < injected:
        raise RuntimeError("head saw fewer micro-batches than were injected")


# -- lockstep -------------------------------------------------------------------

def run_lockstep(plan, params, data, config: RuntimeConfig, stages=None, epoch=0, mb_start=0) -> TrainLog:
    stages = _prepare(plan, params, config, stages, epoch)
    J = len(stages)
    for i, (x, labels) in enumerate(data):
        msg = Forward(mb_start + i, x, labels)
        for s in stages[:-1]:
            msg = stage_forward(s, msg)
            s.note_sent(msg)
        back, _ = tail_step(stages[-1], msg)
        if J > 1:
            stages[-1].note_sent(back)
        for s in reversed(stages[:-1]):
            back = stage_backward(s, back)
            if s.j > 1:
                s.note_sent(back)
    _check_conservation(stages, len(data))
    return TrainLog.from_stages("lockstep", stages)


# -- rounds ---------------------------------------------------------------------

def run_rounds(plan, params, data, config: RuntimeConfig, stages=None, epoch=0, mb_start=0) -> TrainLog:
    """Deterministic decoupled schedule.

    Within a round, stages are visited in ascending id and each does its
    pending forward before its pending backward. A stage's input for round
    ``r`` is whatever its neighbours sent in round ``r - 1``. With this
    ordering the number of backward steps a stage performs between the
    forward and the backward of the same micro-batch is ``2 (J - j)``.
    """
    stages = _prepare(plan, params, config, stages, epoch)
    J = len(stages)
    fq = [deque() for _ in range(J)]
    bq = [deque() for _ in range(J)]
    source = iter(enumerate(data))
    exhausted = False
    injected = 0
    rnd = 0
    completions = []  # round in which the head finished each micro-batch
    activity = []     # per round: list of (forward_done, backward_done) per stage
    while True:
        out_f, out_b = [], []
        busy = []
        progressed = False
        for idx, s in enumerate(stages):
            did_f = did_b = False
            msg = None
            if idx == 0:
                if not exhausted:
                    nxt = next(source, None)
                    if nxt is None:
                        exhausted = True
                    else:
                        i, (x, labels) = nxt
                        msg = Forward(mb_start + i, x, labels)
                        injected += 1
            elif fq[idx]:
                msg = fq[idx].popleft()
            if msg is not None:
                if idx == J - 1:
                    back, _ = tail_step(s, msg)
                    if idx > 0:
                        s.note_sent(back)
                        out_b.append((idx - 1, back))
                    else:
                        completions.append(rnd)
                else:
                    fwd = stage_forward(s, msg)
                    s.note_sent(fwd)
                    out_f.append((idx + 1, fwd))
                did_f = True
            if bq[idx]:
                back = stage_backward(s, bq[idx].popleft())
                if idx > 0:
                    s.note_sent(back)
                    out_b.append((idx - 1, back))
                else:
                    completions.append(rnd)
                did_b = True
            progressed |= did_f or did_b
            busy.append((did_f, did_b))
        for idx, m in out_f:
            fq[idx].append(m)
        for idx, m in out_b:
            bq[idx].append(m)
        activity.append(busy)
        rnd += 1
        pending = any(fq) or any(bq)
        if not progressed:
            if pending:
                dump = {s.j: (len(fq[i]), len(bq[i])) for i, s in enumerate(stages)}
                raise DeadlockError(f"no progress in round {rnd} with pending messages {dump}")
            if exhausted:
                break
    _check_conservation(stages, injected)
    extra = {"rounds": rnd, "_completion_rounds": completions, "_activity": activity}
    return TrainLog.from_stages("rounds", stages, extra)


# -- threads --------------------------------------------------------------------

class _Worker:
    def __init__(self, state: StageState, J: int, capacity: int):
        self.s = state
        self.idx = state.j - 1
        self.J = J
        self.cond = threading.Condition()
        self.fq: deque = deque()
        self.bq: deque = deque()
        self.capacity = capacity
        self.window = 2 * (J - state.j)  # admit a forward only while in-flight <= window
        self.eos = False
        self.done = False


class _Pipeline:
    def __init__(self, stages, data, capacity, mb_start):
        self.stages = stages
        self.J = len(stages)
        self.workers = [_Worker(s, self.J, capacity) for s in stages]
        self.data = list(data)
        self.mb_start = mb_start
        self.next_item = 0
        self.stop = threading.Event()
        self.errors: list = []
        self.completed = 0

    def _put(self, dest: _Worker, queue: deque, msg):
        with dest.cond:
            while len(queue) >= dest.capacity:
                if self.stop.is_set():
                    raise _Stopped()
                dest.cond.wait(0.05)
            queue.append(msg)
            dest.cond.notify_all()

    def _room(self, dest: _Worker) -> bool:
        with dest.cond:
            return len(dest.fq) < dest.capacity

    def _poke(self, w: _Worker):
        with w.cond:
            w.cond.notify_all()

    def _next_action(self, w: _Worker):
        """Pick the next message under ``w.cond``.

        A backward is taken first, but only once the stage has more than
        ``window`` micro-batches in flight or no further forward can arrive.
        Holding it until then keeps the stage from running ahead of the
        pipeline and fixes its delay at ``window`` in steady state.
        """
        s = w.s
        no_more_forwards = w.eos or (w.idx == 0 and self.next_item >= len(self.data)) or (
            bool(w.fq) and isinstance(w.fq[0], EndOfStream))
        if w.bq and (s.in_flight > w.window or no_more_forwards):
            return w.bq.popleft()
        down = self.workers[w.idx + 1] if w.idx + 1 < self.J else None
        if w.idx == 0 and not w.eos:
            if self.next_item < len(self.data):
                if s.in_flight <= w.window and (down is None or self._room(down)):
                    i = self.next_item
                    self.next_item += 1
                    x, labels = self.data[i]
                    return Forward(self.mb_start + i, x, labels)
                return None
            if down is None or self._room(down):
                return EndOfStream()
            return None
        if w.fq:
            head = w.fq[0]
            if isinstance(head, EndOfStream) or down is None:
                if down is None or self._room(down):
                    return w.fq.popleft()
                return None
            if s.in_flight <= w.window and self._room(down):
                return w.fq.popleft()
        return None

    def _finished(self, w: _Worker) -> bool:
        return w.eos and w.s.in_flight == 0 and not w.bq

    def _loop(self, w: _Worker):
        s = w.s
        up = self.workers[w.idx - 1] if w.idx > 0 else None
        down = self.workers[w.idx + 1] if w.idx + 1 < self.J else None
        while not self.stop.is_set():
            with w.cond:
                msg = self._next_action(w)
                if msg is None:
                    if self._finished(w):
                        break
                    w.cond.wait(0.05)
                    continue
                w.cond.notify_all()
            if up is not None and not isinstance(msg, Backward):
                self._poke(up)  # a forward slot opened upstream
            if isinstance(msg, EndOfStream):
                w.eos = True
                if down is not None:
                    self._put(down, down.fq, msg)
                continue
            if isinstance(msg, Backward):
                back = stage_backward(s, msg)
                if up is not None:
                    s.note_sent(back)
                    self._put(up, up.bq, back)
                else:
                    self.completed += 1
            elif down is None:
                back, _ = tail_step(s, msg)
                if up is not None:
                    s.note_sent(back)
                    self._put(up, up.bq, back)
                else:
                    self.completed += 1
            else:
                fwd = stage_forward(s, msg)
                s.note_sent(fwd)
                self._put(down, down.fq, fwd)
        w.done = True

    def _run_worker(self, w: _Worker):
        try:
            self._loop(w)
        except _Stopped:
            pass
        except BaseException as e:  # noqa: BLE001 - reported by the coordinator
            log.error("stage %d failed: %r", w.s.j, e)
            self.errors.append((w.s.j, e))
            self.stop.set()
            for o in self.workers:
                self._poke(o)

    def diagnostics(self):
        return {w.s.j: {"forward_queue": len(w.fq), "backward_queue": len(w.bq), "in_flight": w.s.in_flight,
                        "eos": w.eos, "done": w.done} for w in self.workers}

    def run(self, timeout=None):
        threads = [threading.Thread(target=self._run_worker, args=(w,), name=f"stage-{w.s.j}", daemon=True)
                   for w in self.workers]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout)
        if any(t.is_alive() for t in threads):
            self.stop.set()
            for t in threads:
                t.join(1.0)
            raise WorkerError("pipeline did not finish in time", diagnostics=self.diagnostics())
        if self.errors:
            j, e = self.errors[0]
            raise WorkerError(f"stage {j} failed: {e!r}", cause=e, diagnostics=self.diagnostics()) from e


class _Stopped(Exception):
    pass


def run_threads(plan, params, data, config: RuntimeConfig, stages=None, epoch=0, mb_start=0,
                timeout: float | None = None) -> TrainLog:
    """Decoupled schedule with one thread per stage.

    Each worker prefers a pending backward message once it has more than
    ``2 (J - j)`` micro-batches in flight (or its input stream has ended). A
    forward is admitted only while the stage has at most ``2 (J - j)`` in
    flight and the next stage's forward queue has room, so forward sends never
    block and the bounded queues cannot deadlock.
    """
    stages = _prepare(plan, params, config, stages, epoch)
    pipe = _Pipeline(stages, data, config.queue_capacity, mb_start)
    pipe.run(timeout)
    _check_conservation(stages, len(pipe.data))
    return TrainLog.from_stages("threads", stages, {"completed": pipe.completed})


ENGINES = {"lockstep": run_lockstep, "rounds": run_rounds, "threads": run_threads}
