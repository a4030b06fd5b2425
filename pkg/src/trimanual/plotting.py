"""Static PNG figures for simulate and run-trials outputs.

Everything renders off-screen through the Agg backend. PNG metadata is
stripped of the software tag so that re-rendering the same data yields the
same bytes.
"""
import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
    "savefig.dpi": 120,
}

COLORS = {"left": "#1f77b4", "right": "#d62728", "target": "#2ca02c"}
PHASE_SHADE = "#eeeeee"


def _save(fig, path):
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_end_effectors(rows, path, phases=()):
    """Position (x, y, z) and orientation (roll, pitch, yaw) traces of both tools and the target.

    ``rows`` are dicts with key ``t`` and ``<who>_<coord>`` columns as written
    by the trajectory CSV. ``phases`` is an optional list of (t0, t1, label)
    shaded behind the curves.
    """
    t = np.array([r["t"] for r in rows], float)
    coords = ("x", "y", "z", "roll", "pitch", "yaw")
    with plt.rc_context(RC):
        fig, axes = plt.subplots(2, 3, figsize=(9.0, 4.8), sharex=True)
        for ax, c in zip(axes.ravel(), coords):
            for t0, t1, _ in phases:
                ax.axvspan(t0, t1, color=PHASE_SHADE, lw=0)
            for who, col in COLORS.items():
                key = f"{who}_{c}"
                if key in rows[0]:
                    ax.plot(t, [r[key] for r in rows], color=col, label=who)
            ax.set_ylabel(c + (" (m)" if c in "xyz" else " (rad)"))
        for ax in axes[1]:
            ax.set_xlabel("t (s)")
        axes[0, 0].legend(frameon=False, loc="best")
        fig.tight_layout()
        return _save(fig, path)


def plot_joints(rows, path):
    """Joint angle traces, one panel per chain; columns named ``<chain>_q<k>``."""
    t = np.array([r["t"] for r in rows], float)
    chains = []
    for k in rows[0]:
        if "_q" in k:
            c = k.split("_q")[0]
            if c not in chains:
                chains.append(c)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(len(chains), 1, figsize=(6.4, 1.9 * len(chains)), sharex=True,
                                 squeeze=False)
        for ax, c in zip(axes[:, 0], chains):
            cols = [k for k in rows[0] if k.startswith(c + "_q")]
            for k in cols:
                ax.plot(t, [r[k] for r in rows], label=k.split("_")[-1])
            ax.set_ylabel(f"{c} (rad)")
            ax.legend(frameon=False, ncol=len(cols), loc="upper right")
        axes[-1, 0].set_xlabel("t (s)")
        fig.tight_layout()
        return _save(fig, path)


def plot_trial_summary(records, path):
    """Outcome counts per environment plus the running success rate."""
    envs = sorted({r.environment for r in records})
    causes = ("success", "Slip", "MissedGrasp", "MissedHold", "Infeasible")
    with plt.rc_context(RC):
        fig, (a0, a1) = plt.subplots(1, 2, figsize=(8.0, 3.2))
        width = 0.8 / max(len(envs), 1)
        x = np.arange(len(causes))
        for i, e in enumerate(envs):
            rs = [r for r in records if r.environment == e]
            counts = [sum(r.success for r in rs) if c == "success"
                      else sum(r.failure_cause == c for r in rs) for c in causes]
            a0.bar(x + i * width, counts, width, label=e)
            ok = np.cumsum([r.success for r in rs]) / np.arange(1, len(rs) + 1)
            a1.plot(np.arange(1, len(rs) + 1), ok, label=e)
        a0.set_xticks(x + 0.4 - width / 2)
        a0.set_xticklabels(causes, rotation=20)
        a0.set_ylabel("trials")
        a1.set_xlabel("trial")
        a1.set_ylabel("running success rate")
        a1.set_ylim(0, 1.02)
        a1.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
