"""Command-line entry point: ``petra {train,eval,cost,parity,verify}``.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 numerical
divergence, 5 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint, cost, plotting
from .optim import DivergenceError
from .runtime import WorkerError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_VERIFY = 0, 2, 3, 4, 5

log = logging.getLogger("petra")

# flag name -> RunConfig field; every flag defaults to None so only explicit ones override the file
TRAIN_FLAGS = [
    ("--model", str, "small or one of revnet18/34/50, resnet18/34/50"),
    ("--stages", int, "stage count of the small model"),
    ("--width", int, "channel width of the small model"),
    ("--downsample-at", int, "stage index of a stride-2 block in the small model"),
    ("--head-stride", int, "stride of the stem convolution"),
    ("--dataset", str, "auto, cifar10 or synthetic"),
    ("--data-dir", str, "CIFAR-10 directory (falls back to $PETRA_DATA_DIR)"),
    ("--n-train", int, "number of training examples to use"),
    ("--n-test", int, "number of test examples to use"),
    ("--synth-classes", int, "classes of the synthetic dataset"),
    ("--synth-hw", int, "image side of the synthetic dataset"),
    ("--synth-separation", float, "class-mean separation of the synthetic dataset, in noise std units"),
    ("--engine", str, "lockstep, rounds, threads or reference-backprop"),
    ("--epochs", int, "training epochs"),
    ("--batch-size", int, "micro-batch size"),
    ("--k", int, "gradient accumulation factor (1, 2, 4, 8, 16 or 32)"),
    ("--seed", int, "random seed"),
    ("--dtype", str, "f32 or f64"),
    ("--preset", str, "optimizer preset: desk, cifar10 or imagenet"),
    ("--base-lr", float, "base learning rate (default 0.1 * batch * k / 256)"),
    ("--warmup-epochs", float, "linear warm-up length in epochs"),
    ("--momentum", float, "Nesterov momentum"),
    ("--weight-decay", float, "weight decay (default from the preset)"),
    ("--queue-capacity", int, "per-direction queue capacity of the threads engine"),
]


def _add_train_flags(p):
    p.add_argument("--config", type=Path, help="JSON run configuration; flags override its values")
    for flag, typ, help_ in TRAIN_FLAGS:
        p.add_argument(flag, type=typ, default=None, help=help_)
    p.add_argument("--no-augment", dest="augment", action="store_false", default=None,
                   help="disable flips and crops")
    p.add_argument("--out", type=Path, default=Path("runs/latest"), help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="petra", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write metrics, summary, checkpoint and figures")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint written by train")
    p.add_argument("run_dir", type=Path, help="directory holding config.json and checkpoint.bin")
    p.add_argument("--data-dir", type=str, default=None)

    p = sub.add_parser("cost", help="cost comparison table and memory report")
    p.add_argument("--J", type=int, default=10, help="number of stages")
    p.add_argument("--j", type=int, default=1, help="stage index for the per-stage columns")
    p.add_argument("--k", type=int, default=1, help="accumulation factor")
    p.add_argument("--method", choices=cost.METHODS, default=None, help="print only this method")
    p.add_argument("--memory-model", default="revnet50", help="network for the memory report")
    p.add_argument("--memory-dataset", default="imagenet", choices=("imagenet", "cifar10", "small"))
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--out", type=Path, default=None, help="write CSV files and figures here")

    p = sub.add_parser("parity", help="accuracy of the decoupled schedule against backpropagation")
    p.add_argument("--dataset", choices=("cifar10", "synthetic"), default="cifar10")
    p.add_argument("--data-dir", type=str, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--synth-hw", type=int, default=None)
    p.add_argument("--synth-separation", type=float, default=None)
    p.add_argument("--ks", type=int, nargs="+", default=[1, 8], help="accumulation factors to compare")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("runs/parity"))

    p = sub.add_parser("verify", help="run a property suite")
    p.add_argument("suite", choices=("grad", "reversibility", "staleness", "oracle"))
    p.add_argument("--J", type=int, default=10, help="stages for the staleness suite")
    p.add_argument("--micro-batches", type=int, default=200)
    p.add_argument("--engine", choices=("rounds", "threads"), default="rounds")
    p.add_argument("--seed", type=int, default=0)
    return parser


def merged_config(args):
    from .train import RunConfig
    base = {}
    if args.config is not None:
        base = json.loads(args.config.read_text())
    for flag, _, _ in TRAIN_FLAGS:
        key = flag.lstrip("-").replace("-", "_")
        val = getattr(args, key)
        if val is not None:
            base[key] = val
    if args.augment is not None:
        base["augment"] = args.augment
    base["out_dir"] = str(args.out)
    return RunConfig.from_dict(base)


def cmd_train(args) -> int:
    from .train import run_training
    cfg = merged_config(args)
    res = run_training(cfg, args.out)
    for row in res.epochs:
        print(f"epoch {row['epoch']:3d}  train loss {row['train_loss']:.4f}  train acc {100 * row['train_acc']:.2f}%"
              f"  test acc {100 * row['test_acc']:.2f}%")
    print(f"base lr {res.base_lr:g}  final test acc {100 * res.final_test_acc:.2f}%  artifacts in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import RunConfig, accuracy, build_model, load_data
    cfg_d = json.loads((args.run_dir / "config.json").read_text())
    if args.data_dir:
        cfg_d["data_dir"] = args.data_dir
    cfg = RunConfig.from_dict(cfg_d)
    train, test = load_data(cfg)
    plan, params = build_model(cfg, train.shape, train.classes)
    checkpoint.restore(plan, params, checkpoint.load(args.run_dir / "checkpoint.bin"))
    loss, acc = accuracy(plan, params, test, cfg.eval_batch_size, cfg.dtype)
    print(f"test loss {loss:.4f}  test acc {100 * acc:.2f}%  ({len(test)} examples)")
    return EXIT_OK


def cmd_cost(args) -> int:
    from .revnet import build_network, build_small
    from .train import ConfigError
    if args.J < 2:
        raise ConfigError("--J must be at least 2")
    if not 1 <= args.j <= args.J or args.k < 1:
        raise ConfigError("need 1 <= j <= J and k >= 1")
    rows = cost.table1(args.J, args.j, args.k)
    if args.method:
        rows = [r for r in rows if r.method == args.method]
    print(f"Per-stage costs, J={args.J}, j={args.j}, k={args.k} (forward = 1 unit, backward = 2)")
    print(cost.format_table([r.cells() for r in rows], cost.TABLE1_HEADER))
    if args.memory_dataset == "small":
        plan, _ = build_small(stages=args.J, width=32)
    else:
        plan, _ = build_network(args.memory_model, args.memory_dataset, with_params=False)
    reports = cost.memory_table(plan, args.batch, k=args.k)
    print(f"\nMemory with and without buffers: {plan.name} ({args.memory_dataset}), batch {args.batch}, f32")
    print(cost.memory_table_text(reports))
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "table1.csv").write_text(cost.table1_csv(args.J, args.j, args.k))
        (args.out / "table1.txt").write_text(cost.table1_text(args.J, args.j, args.k) + "\n")
        (args.out / "memory.csv").write_text(cost.memory_table_csv(reports))
        (args.out / "memory.txt").write_text(cost.memory_table_text(reports) + "\n")
        sweep = {m: [(J, cost.simulate_latency(m, J, 20 * J)) for J in (2, 4, 8, 16)] for m in cost.METHODS}
        plotting.mean_time_vs_stages(sweep, args.out / "mean_time.png")
        for m in ("backprop", "petra"):
            _, trace = cost.simulate_latency(m, args.J, 4 * args.J, return_trace=True)
            plotting.schedule_timeline(trace, args.J, args.out / f"schedule_{m}.png", horizon=12 * args.J, title=m)
        plotting.memory_bars(reports, args.out / "memory.png")
        print(f"\nCSV files and figures written to {args.out}")
    return EXIT_OK


def cmd_parity(args) -> int:
    from .parity import parity_config, run_parity
    over = {k: v for k, v in vars(args).items()
            if k in ("dataset", "data_dir", "epochs", "n_train", "n_test", "width", "synth_hw", "synth_separation", "seed")
            and v is not None}
    cfg = parity_config(**over)
    res = run_parity(cfg, args.ks, args.out)
    for line in res.lines():
        print(line)
    failures = res.failures()
    for f in failures:
        print(f"FAIL  {f}")
    print(f"results in {args.out}")
    return EXIT_VERIFY if failures else EXIT_OK


def cmd_verify(args) -> int:
    from .verify import SUITES
    kwargs = {"seed": args.seed}
    if args.suite == "staleness":
        kwargs.update(J=args.J, micro_batches=args.micro_batches, engine=args.engine)
    checks = SUITES[args.suite](**kwargs)
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.ok]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "cost": cmd_cost, "parity": cmd_parity, "verify": cmd_verify}


def main(argv=None) -> int:
    from .train import ConfigError
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except WorkerError as e:
        if isinstance(e.cause, DivergenceError):
            print(f"training diverged: {e}", file=sys.stderr)
            return EXIT_DIVERGED
        raise
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
