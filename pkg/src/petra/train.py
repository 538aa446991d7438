"""Run configuration and the epoch loop shared by the CLI and the experiments."""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from . import data as D
from . import tensor as T
from .autograd import evaluate as eval_stage
from .nn import cross_entropy_loss
from .optim import PRESETS, preset_schedule, scaled_base_lr
from .revnet import build_network, build_small
from .runtime import ENGINES, ReferenceTrainer, RuntimeConfig, make_stages

log = logging.getLogger(__name__)

ENGINE_NAMES = ("lockstep", "rounds", "threads", "reference-backprop")
K_CHOICES = (1, 2, 4, 8, 16, 32)
NAMED_MODELS = tuple(f"{f}{d}" for f in ("revnet", "resnet") for d in ("18", "34", "50"))


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: str = "small"
    stages: int = 4
    width: int = 16
    downsample_at: int | None = None
    head_stride: int = 1
    dataset: str = "auto"           # auto | cifar10 | synthetic
    data_dir: str | None = None
    n_train: int | None = None      # None: whole split (CIFAR-10) or 1024 (synthetic)
    n_test: int | None = None
    synth_classes: int = 10
    synth_hw: int = 8
    synth_separation: float = 1.0
    augment: bool = True
    engine: str = "rounds"
    epochs: int = 2
    batch_size: int = 64
    k: int = 1
    seed: int = 0
    dtype: str = "f32"
    preset: str = "desk"
    base_lr: float | None = None    # None: 0.1 * batch_size * k / 256
    warmup_epochs: float | None = None
    momentum: float = 0.9
    weight_decay: float | None = None
    eval_batch_size: int = 250
    queue_capacity: int = 4
    out_dir: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            cfg = cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self):
        if self.engine not in ENGINE_NAMES:
            raise ConfigError(f"engine must be one of {ENGINE_NAMES}, got {self.engine!r}")
        if self.k not in K_CHOICES:
            raise ConfigError(f"k must be one of {K_CHOICES}, got {self.k}")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32 or f64, got {self.dtype!r}")
        if self.model != "small" and self.model not in NAMED_MODELS:
            raise ConfigError(f"unknown model {self.model!r}")
        if self.model == "small" and self.stages < 2:
            raise ConfigError("a small model needs at least 2 stages")
        if self.dataset not in ("auto", "cifar10", "synthetic"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown optimizer preset {self.preset!r}")
        for name in ("epochs", "batch_size", "eval_batch_size", "queue_capacity", "width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.base_lr is not None and self.base_lr < 0:
            raise ConfigError("base_lr must be non-negative")

    def effective_base_lr(self) -> float:
        return self.base_lr if self.base_lr is not None else scaled_base_lr(self.k, self.batch_size)


# -- data and model ------------------------------------------------------------------

def resolve_dataset(cfg: RunConfig) -> str:
    if cfg.dataset != "auto":
        return cfg.dataset
    return "cifar10" if D.find_cifar10(cfg.data_dir) is not None else "synthetic"


def load_data(cfg: RunConfig):
    kind = resolve_dataset(cfg)
    rng = T.make_rng(cfg.seed + 1)
    if kind == "cifar10":
        root = D.find_cifar10(cfg.data_dir)
        if root is None:
            raise D.DataError("CIFAR-10 not found; pass --data-dir or set PETRA_DATA_DIR")
        train, test = D.load_cifar10(root)
        if cfg.n_train:
            train = D.subset(train, cfg.n_train, rng)
        if cfg.n_test:
            test = D.subset(test, cfg.n_test, rng)
        return train, test
    shape = (3, cfg.synth_hw, cfg.synth_hw)
    return D.synth_split(cfg.synth_classes, cfg.n_train or 1024, cfg.n_test or 512, shape, rng,
                         separation=cfg.synth_separation)


def build_model(cfg: RunConfig, input_shape, classes):
    rng = T.make_rng(cfg.seed)
    if cfg.model == "small":
        return build_small(cfg.stages, cfg.width, rng, in_channels=input_shape[0], classes=classes,
                           input_hw=input_shape[1], dtype=cfg.dtype, downsample_at=cfg.downsample_at,
                           head_stride=cfg.head_stride)
    return build_network(cfg.model, "cifar10", rng, dtype=cfg.dtype)


def accuracy(plan, params, ds: D.Dataset, batch_size=250, dtype="f32") -> tuple[float, float]:
    """Test loss and accuracy with batch-norm running statistics."""
    dt = T.resolve_dtype(dtype)
    correct, total, loss_sum = 0, 0, 0.0
    for x, y in D.batches(ds, batch_size, D.NO_AUGMENT, shuffle=False, drop_last=False, dtype=dt):
        for st, th in zip(plan.stages, params):
            x = eval_stage(st.block, x, th, bn_mode="eval")
        loss, _ = cross_entropy_loss(x, y)
        loss_sum += loss * len(y)
        correct += int((x.argmax(axis=1) == y).sum())
        total += len(y)
    return loss_sum / max(total, 1), correct / max(total, 1)


# -- training -------------------------------------------------------------------------

@dataclass
class RunResult:
    config: dict
    epochs: list
    final_test_acc: float
    final_train_loss: float
    base_lr: float
    seconds: float
    summary: dict
    plan: object = None
    params: object = None


EPOCH_COLUMNS = ("epoch", "train_loss", "train_acc", "test_loss", "test_acc", "lr", "seconds")


def run_training(cfg: RunConfig, out_dir=None, data=None) -> RunResult:
    """Train for ``cfg.epochs`` epochs; write artifacts when ``out_dir`` is set.

    ``data`` may supply a ``(train, test)`` pair to skip loading.
    """
    cfg.validate()
    t0 = time.time()
    train, test = data if data is not None else load_data(cfg)
    plan, params = build_model(cfg, train.shape, train.classes)
    dt = T.resolve_dtype(cfg.dtype)
    steps = D.num_batches(len(train), cfg.batch_size)
    if steps == 0:
        raise ConfigError(f"batch size {cfg.batch_size} exceeds the {len(train)} training examples")
    base_lr = cfg.effective_base_lr()
    schedule, wd, _ = preset_schedule(cfg.preset, base_lr, steps, cfg.epochs, cfg.warmup_epochs)
    if cfg.weight_decay is not None:
        wd = cfg.weight_decay
    rt = RuntimeConfig(k=cfg.k, schedule=schedule, momentum=cfg.momentum, weight_decay=wd,
                       queue_capacity=cfg.queue_capacity)
    augment = D.AugmentConfig() if cfg.augment else D.NO_AUGMENT
    batch_rng = T.make_rng(cfg.seed + 2)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
        (out / "plan.json").write_text(plan.dumps())
    stages = ref = None
    if cfg.engine == "reference-backprop":
        ref = ReferenceTrainer(plan, params, rt)
    else:
        stages = make_stages(plan, params, rt)
    history, last_log = [], None
    log.info("training %s (%d params, J=%d) with %s engine, base lr %.4g, k=%d", plan.name, plan.num_params(),
             plan.J, cfg.engine, base_lr, cfg.k)
    for epoch in range(cfg.epochs):
        te = time.time()
        batch_list = list(D.batches(train, cfg.batch_size, augment, batch_rng, dtype=dt))
        if ref is not None:
            c0, s0 = ref.correct, ref.seen
            losses = ref.run(batch_list)
            train_acc = (ref.correct - c0) / (ref.seen - s0)
        else:
            tail = stages[-1]
            c0, s0 = tail.correct, tail.seen
            last_log = ENGINES[cfg.engine](plan, params, batch_list, rt, stages=stages, epoch=epoch,
                                           mb_start=epoch * steps)
            losses = [l for _, l in last_log.losses]
            train_acc = (tail.correct - c0) / (tail.seen - s0)
            if out:
                last_log.write_csv(out / "metrics.csv", append=epoch > 0)
        test_loss, test_acc = accuracy(plan, params, test, cfg.eval_batch_size, cfg.dtype)
        row = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)), "train_acc": train_acc,
               "test_loss": test_loss, "test_acc": test_acc, "lr": rt.lr_for((epoch + 1) * steps),
               "seconds": time.time() - te}
        history.append(row)
        log.info("epoch %d: train loss %.4f acc %.3f | test acc %.3f", row["epoch"], row["train_loss"],
                 train_acc, test_acc)
    summary = {"model": plan.name, "params": plan.num_params(), "J": plan.J, "engine": cfg.engine,
               "dataset": resolve_dataset(cfg) if data is None else "provided", "base_lr": base_lr,
               "weight_decay": wd, "k": cfg.k, "final_test_acc": history[-1]["test_acc"],
               "final_train_loss": history[-1]["train_loss"], "epochs": history}
    if last_log is not None:
        summary["runtime"] = last_log.summary()
    if ref is not None:
        summary["runtime"] = {"engine": "reference-backprop", "updates": ref.updates}
    result = RunResult(cfg.to_dict(), history, history[-1]["test_acc"], history[-1]["train_loss"], base_lr,
                       time.time() - t0, summary, plan, params)
    if out:
        _write_artifacts(out, result, last_log)
    return result


def _write_artifacts(out: Path, result: RunResult, last_log):
    from . import plotting
    with open(out / "epochs.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EPOCH_COLUMNS)
        w.writeheader()
        w.writerows(result.epochs)
    (out / "summary.json").write_text(json.dumps(result.summary, indent=2, default=float))
    checkpoint.save(out / "checkpoint.bin", result.plan, result.params)
    plotting.training_curves(result.epochs, out / "training_curves.png")
    if last_log is not None:
        plotting.delay_histograms(last_log.staleness_histograms(), out / "delays.png")


def clone_plan(plan, params):
    """Independent copies of a plan (with its batch-norm state) and its parameters."""
    return copy.deepcopy(plan), copy.deepcopy(params)
