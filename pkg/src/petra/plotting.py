"""Figures written next to the CSV/JSON outputs of the CLI."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)
    return path


def training_curves(epochs: list[dict], path):
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
        e = [r["epoch"] for r in epochs]
        ax1.plot(e, [r["train_loss"] for r in epochs], marker="o", label="train")
        ax1.plot(e, [r["test_loss"] for r in epochs], marker="s", label="test")
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("cross-entropy")
        ax1.legend()
        ax2.plot(e, [100 * r["train_acc"] for r in epochs], marker="o", label="train")
        ax2.plot(e, [100 * r["test_acc"] for r in epochs], marker="s", label="test")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("accuracy (%)")
        ax2.legend()
        return _save(fig, path)


def delay_histograms(hists: dict[int, dict[int, int]], path):
    """One bar group per stage: how many backward steps separated forward and backward."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        stages = sorted(hists)
        J = max(stages) if stages else 0
        for j in stages:
            h = hists[j]
            if not h:
                continue
            mode = max(h, key=h.get)
            ax.scatter([j], [mode], s=30, color="C0", zorder=3)
            ax.scatter([j] * len(h), list(h), s=6, color="C0", alpha=0.3)
        ax.plot(stages, [2 * (J - j) for j in stages], ls="--", color="C3", label="2(J - j)")
        ax.set_xlabel("stage j")
        ax.set_ylabel("delay (backward steps)")
        ax.legend()
        return _save(fig, path)


def mean_time_vs_stages(rows: dict[str, list[tuple[int, float]]], path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i, (method, pts) in enumerate(rows.items()):
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", color=f"C{i}", label=method)
        ax.set_xlabel("stages J")
        ax.set_ylabel("mean time per batch (forward units)")
        ax.set_yscale("log")
        ax.legend()
        return _save(fig, path)


def schedule_timeline(trace, J: int, path, horizon: float | None = None, title: str = ""):
    """Gantt chart of a simulated schedule: forward and backward work per stage."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(8, 0.35 * J + 1.2))
        for t0, t1, kind, j, mb in trace:
            if horizon is not None and t0 >= horizon:
                continue
            y = J - j
            off = 0.2 if kind == "f" else -0.2
            ax.broken_barh([(t0, t1 - t0)], (y + off - 0.18, 0.36),
                           facecolors="C0" if kind == "f" else "C1", edgecolor="white", linewidth=0.4)
        ax.set_yticks(range(J))
        ax.set_yticklabels([f"stage {J - i}" for i in range(J)])
        ax.set_xlabel("time (forward units)")
        ax.grid(False)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def memory_bars(reports, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        labels, model, inputs, params = [], [], [], []
        for r in reports:
            labels.append(f"in={'y' if r.config.use_input_buffer else 'n'} p={'y' if r.config.use_param_buffer else 'n'}")
            model.append(r.model_bytes / 2**30)
            inputs.append(r.input_buffer_bytes / 2**30)
            params.append(r.param_buffer_bytes / 2**30)
        ax.bar(labels, model, label="model")
        ax.bar(labels, inputs, bottom=model, label="input buffers")
        ax.bar(labels, params, bottom=[a + b for a, b in zip(model, inputs)], label="param buffers")
        ax.set_ylabel("GiB")
        ax.legend()
        return _save(fig, path)


def parity_bars(rows, path):
    """Test accuracy of backpropagation and the decoupled schedule for each k."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        xs = range(len(rows))
        ax.bar([x - 0.2 for x in xs], [100 * r.baseline_acc for r in rows], width=0.4, label="backprop (lockstep)")
        ax.bar([x + 0.2 for x in xs], [100 * r.petra_acc for r in rows], width=0.4, label="decoupled (rounds)")
        ax.set_xticks(list(xs))
        ax.set_xticklabels([f"k={r.k}" for r in rows])
        ax.set_ylabel("test accuracy (%)")
        ax.legend()
        return _save(fig, path)
