"""PNG renderings of the confidence curves (precision/recall and F1 vs threshold)."""
from __future__ import annotations

from pathlib import Path

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .metrics import CLASS_NAMES

# no timestamps or version strings, so identical curves give identical bytes
_PNG_META = {"Software": None}


def _label(key) -> str:
    return "all classes" if key == "all" else CLASS_NAMES[key]


def _save(fig: Figure, path: Path) -> None:
    FigureCanvasAgg(fig)
    fig.savefig(path, format="png", dpi=100, metadata=_PNG_META)


def plot_family(curves: dict, family: str, out_dir) -> list[Path]:
    """Write ``pr_<family>.png`` and ``f1_<family>.png``; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    keys = [k for k in curves if k != "all"] + (["all"] if "all" in curves else [])

    fig = Figure(figsize=(9, 3.6))
    ax_p, ax_r = fig.subplots(1, 2)
    for k in keys:
        c = curves[k]
        style = dict(lw=2.5, color="k") if k == "all" else dict(lw=1.2)
        ax_p.plot(c.thresholds, c.precision, label=_label(k), **style)
        ax_r.plot(c.thresholds, c.recall, label=_label(k), **style)
    for ax, name in ((ax_p, "Precision"), (ax_r, "Recall")):
        ax.set(xlabel="Confidence", ylabel=name, xlim=(0, 1), ylim=(0, 1.02),
               title=f"{name}-confidence ({family})")
        ax.grid(alpha=0.3)
    ax_r.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    pr_path = out / f"pr_{family}.png"
    _save(fig, pr_path)

    fig = Figure(figsize=(4.8, 3.6))
    ax = fig.subplots()
    for k in keys:
        c = curves[k]
        best, thr = c.best_f1
        style = dict(lw=2.5, color="k") if k == "all" else dict(lw=1.2)
        ax.plot(c.thresholds, c.f1, label=f"{_label(k)} {best:.2f} at {thr:.3f}", **style)
    ax.set(xlabel="Confidence", ylabel="F1", xlim=(0, 1), ylim=(0, 1.02), title=f"F1-confidence ({family})")
    ax.grid(alpha=0.3)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    f1_path = out / f"f1_{family}.png"
    _save(fig, f1_path)
    return [pr_path, f1_path]


def plot_report(report, out_dir) -> list[Path]:
    paths = []
    for family, curves in report.curves.items():
        paths.extend(plot_family(curves, family, out_dir))
    return paths
