"""Accuracy parity between the decoupled schedule and backpropagation.

For each accumulation factor ``k`` the same model, data, seed and learning
rate schedule are trained twice: once with the lockstep engine (zero
staleness, identical to backpropagation) and once with the rounds engine.
The gap is ``baseline - decoupled`` test accuracy in percentage points.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

from .train import RunConfig, load_data, run_training

log = logging.getLogger(__name__)

# desk-scale setup: 6 stages (stem, 3 reversible, 1 downsampling, classifier), ~33k parameters
PARITY_DEFAULTS = dict(model="small", stages=6, width=24, head_stride=2, downsample_at=3, dataset="cifar10",
                       n_train=5000, n_test=1000, epochs=30, batch_size=64, preset="desk", dtype="f32")
MAX_GAP = 2.0
K_SLACK = 0.5


@dataclass
class ParityRow:
    k: int
    baseline_acc: float
    petra_acc: float
    baseline_seconds: float
    petra_seconds: float

    @property
    def gap(self) -> float:
        """Baseline minus decoupled test accuracy, in percentage points.

        Rounded so that float noise in a difference of count ratios cannot
        push an exact boundary value (e.g. 20 images out of 1000) over a band.
        """
        return round(100.0 * (self.baseline_acc - self.petra_acc), 9)


@dataclass
class ParityResult:
    config: dict
    rows: list[ParityRow] = field(default_factory=list)

    def row(self, k: int) -> ParityRow:
        return next(r for r in self.rows if r.k == k)

    def failures(self, max_gap=MAX_GAP, slack=K_SLACK) -> list[str]:
        out = [f"k={r.k}: |gap| {abs(r.gap):.2f} > {max_gap}" for r in self.rows if abs(r.gap) > max_gap]
        ks = sorted(r.k for r in self.rows)
        if len(ks) >= 2:
            lo, hi = self.row(ks[0]), self.row(ks[-1])
            if hi.gap > lo.gap + slack:
                out.append(f"k={hi.k} gap {hi.gap:.2f} exceeds k={lo.k} gap {lo.gap:.2f} + {slack}")
        return out

    def lines(self) -> list[str]:
        return [f"k={r.k:2d}  backprop {100 * r.baseline_acc:6.2f}%  decoupled {100 * r.petra_acc:6.2f}%  "
                f"gap {r.gap:+.2f} pts  ({r.baseline_seconds + r.petra_seconds:.0f} s)" for r in self.rows]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "baseline_acc", "petra_acc", "gap_pts", "baseline_seconds", "petra_seconds"])
            for r in self.rows:
                w.writerow([r.k, r.baseline_acc, r.petra_acc, r.gap, r.baseline_seconds, r.petra_seconds])


def parity_config(**overrides) -> RunConfig:
    return RunConfig.from_dict({**PARITY_DEFAULTS, **overrides})


def run_parity(base: RunConfig, ks=(1, 8), out_dir=None, data=None) -> ParityResult:
    """Train baseline and decoupled runs for every ``k``; optionally write CSV and a figure."""
    data = data if data is not None else load_data(base)
    out = Path(out_dir) if out_dir else None
    result = ParityResult(base.to_dict())
    for k in ks:
        accs, secs = {}, {}
        for engine in ("lockstep", "rounds"):
            cfg = replace(base, k=k, engine=engine)
            run_dir = out / f"k{k}_{engine}" if out else None
            res = run_training(cfg, run_dir, data=data)
            accs[engine], secs[engine] = res.final_test_acc, res.seconds
            log.info("parity k=%d %s: test acc %.4f (%.0f s)", k, engine, res.final_test_acc, res.seconds)
        result.rows.append(ParityRow(k, accs["lockstep"], accs["rounds"], secs["lockstep"], secs["rounds"]))
    if out:
        from . import plotting
        out.mkdir(parents=True, exist_ok=True)
        result.write_csv(out / "parity.csv")
        plotting.parity_bars(result.rows, out / "parity.png")
    return result
