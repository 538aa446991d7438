"""Training log: per-event CSV rows plus a JSON summary of the run."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

CSV_COLUMNS = ("step", "epoch", "stage", "event", "micro_batch_id", "param_version", "loss", "lr")


@dataclass
class TrainLog:
    engine: str
    stages: list = field(default_factory=list)
    events: list = field(default_factory=list)
    losses: list = field(default_factory=list)  # (micro_batch_id, loss) in completion order
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_stages(cls, engine, stages, extra=None):
        events = sorted((e for s in stages for e in s.events), key=lambda e: e.seq)
        tail = stages[-1]
        losses = [(e.micro_batch_id, e.loss) for e in tail.events if e.event == "loss"]
        return cls(engine, stages, events, losses, extra or {})

    def mean_loss(self, last: int | None = None) -> float:
        vals = [l for _, l in self.losses]
        if last:
            vals = vals[-last:]
        return sum(vals) / len(vals) if vals else float("nan")

    def staleness_histograms(self) -> dict[int, dict[int, int]]:
        return {s.j: dict(sorted(s.delays.items())) for s in self.stages}

    def rows(self):
        for i, e in enumerate(self.events):
            yield {"step": i, "epoch": e.epoch, "stage": e.stage, "event": e.event,
                   "micro_batch_id": e.micro_batch_id, "param_version": e.param_version,
                   "loss": "" if e.loss is None else repr(e.loss), "lr": "" if e.lr is None else repr(e.lr)}

    def write_csv(self, path, append=False):
        path = Path(path)
        new = not (append and path.exists())
        with open(path, "a" if append else "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            if new:
                w.writeheader()
            w.writerows(self.rows())

    def summary(self) -> dict:
        return {
            "engine": self.engine,
            "micro_batches": len(self.losses),
            "mean_loss": self.mean_loss(),
            "stages": [{
                "stage": s.j, "kind": s.kind,
                "forwards": s.n_forward, "backwards": s.n_backward,
                "updates": s.param_version,
                "delay_histogram": {str(k): v for k, v in sorted(s.delays.items())},
                "staleness_histogram": {str(k): v for k, v in sorted(s.staleness.items())},
                "buffer_high_water": s.buffer_high_water,
                "activation_high_water": s.activation_high_water,
                "messages": dict(s.sent), "tensors_sent": dict(s.sent_tensors),
            } for s in self.stages],
            **{k: v for k, v in self.extra.items() if not k.startswith("_")},
        }

    def write_json(self, path, **more):
        Path(path).write_text(json.dumps({**self.summary(), **more}, indent=2, default=float))
