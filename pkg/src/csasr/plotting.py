"""Report figures rendered to files with the non-interactive Agg backend."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 3.6),
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_losses(steps, path, window=50, title=None):
    """Per-update losses with a trailing moving average of ``l_asr``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = np.array([s["step"] for s in steps])
        for key, color in (("l_ctc", "tab:orange"), ("l_ce", "tab:green"), ("l_asr", "tab:blue")):
            y = np.array([s[key] for s in steps])
            ax.plot(x, y, lw=0.8, alpha=0.5 if key != "l_asr" else 0.35, color=color, label=key)
        y = np.array([s["l_asr"] for s in steps])
        if len(y) >= window:
            ma = np.convolve(y, np.ones(window) / window, mode="valid")
            ax.plot(x[window - 1 :], ma, color="tab:blue", lw=1.8, label=f"l_asr ({window}-step mean)")
        ax.set_yscale("log")
        ax.set_xlabel("update step")
        ax.set_ylabel("loss")
        if title:
            ax.set_title(title)
        ax.legend(ncol=2)
        return _save(fig, path)


def plot_score_report(report, path, title=None):
    """Per-utterance error counts stacked by type, with corpus WER and T-WER in the title."""
    utts = report.utterances
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(6.4, 0.18 * len(utts)), 3.6))
        idx = np.arange(len(utts))
        bottom = np.zeros(len(utts))
        for key, label, color in (("s", "substitutions", "tab:red"), ("d", "deletions", "tab:purple"),
                                  ("i", "insertions", "tab:olive")):
            vals = np.array([getattr(u, key) for u in utts], dtype=float)
            ax.bar(idx, vals, bottom=bottom, color=color, label=label, width=0.8)
            bottom += vals
        forgiven = np.array([u.forgiven for u in utts], dtype=float)
        if forgiven.any():
            ax.scatter(idx, forgiven, marker="x", color="black", zorder=3, label="forgiven")
        ax.set_xticks(idx)
        ax.set_xticklabels([u.utt_id for u in utts], rotation=90, fontsize=5)
        ax.set_ylabel("word errors")
        head = f"WER {report.wer:.2f}%   T-WER {report.t_wer:.2f}%   N={report.n}"
        ax.set_title(head if title is None else f"{title}: {head}")
        ax.legend(ncol=4)
        return _save(fig, path)


def plot_mix_plan(plan, path):
    """Target and realized hours per data source."""
    srcs = ["native", "nonnative", "cs"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        idx = np.arange(len(srcs))
        ax.bar(idx - 0.2, [plan.targets[s] for s in srcs], 0.4, label="target")
        ax.bar(idx + 0.2, [plan.realized[s] for s in srcs], 0.4, label="realized")
        ax.set_xticks(idx)
        ax.set_xticklabels(srcs)
        ax.set_ylabel("hours")
        ax.set_title(f"mix plan {plan.config}")
        ax.legend()
        return _save(fig, path)
