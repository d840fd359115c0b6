"""Figures rendered next to the run reports (headless Agg backend)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

# fixed metadata keeps repeated renders byte-stable
_META = {"Software": None}


def plot_schedule_trace(report, path):
    """lambda2 in use and the two domain distances per outer epoch, one line per trial."""
    fig, (ax_l, ax_d) = plt.subplots(1, 2, figsize=(9, 3.4))
    for t in report.trials:
        if not t.trace:
            continue
        rows = np.array(t.trace, dtype=float)
        ax_l.plot(rows[:, 0], rows[:, 2], color="tab:blue", alpha=0.5, marker="o", ms=3)
        ax_l.plot(rows[:, 0], rows[:, 3], color="tab:orange", alpha=0.3, ls="--")
        ax_d.plot(rows[:, 0], rows[:, 4], color="tab:green", alpha=0.5)
        ax_d.plot(rows[:, 0], rows[:, 5], color="tab:red", alpha=0.5)
    ax_l.set(xlabel="outer epoch", ylabel="lambda2", ylim=(-0.02, 1.02),
             title="mixing schedule")
    ax_l.legend(["lambda2 in use", "mean perturbed"], fontsize=8, loc="upper left")
    ax_d.set(xlabel="outer epoch", ylabel="sliced W1 (scaled)", title="domain distances")
    for ax in (ax_l, ax_d):
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    ax_d.legend(["to source", "to target"], fontsize=8)
    if not any(t.trace for t in report.trials):
        ax_l.text(0.5, 0.5, "no intermediate phase", ha="center", transform=ax_l.transAxes)
    fig.suptitle(f"{report.variant}: schedule trace")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_per_class(report, path):
    """Per-class accuracy: mean over trials with the trial spread as error bars."""
    acc = np.stack([t.per_class for t in report.trials])
    mean, std = np.nanmean(acc, axis=0), np.nanstd(acc, axis=0)
    x = np.arange(len(report.class_names))
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(x) + 2), 3.4))
    ax.bar(x, 100 * mean, yerr=100 * std, color="tab:blue", alpha=0.8, capsize=3)
    ax.set_xticks(x, report.class_names, rotation=30, ha="right", fontsize=8)
    ax.set(ylabel="accuracy (%)", ylim=(0, 105),
           title=f"{report.variant}: per-class accuracy over {len(acc)} trials")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
