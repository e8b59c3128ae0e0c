"""Tabular curve export and matplotlib renderings (Agg backend, files only).

Tables are always written first; images are best effort so a missing or
broken plotting backend never loses the data.
"""

import logging
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update({"figure.dpi": 100, "savefig.dpi": 120, "font.size": 9,
                         "axes.grid": True, "grid.alpha": 0.4})
    return plt


def write_table(path, header, rows):
    """Tab-separated text with a header line; floats at 6 decimals."""
    def fmt(v):
        return f"{v:.6f}" if isinstance(v, (float, np.floating)) else str(v)

    lines = ["\t".join(header)] + ["\t".join(fmt(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def read_table(path):
    lines = Path(path).read_text().splitlines()
    head = lines[0].split("\t")
    return [dict(zip(head, l.split("\t"))) for l in lines[1:] if l]


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    import matplotlib.pyplot as plt

    plt.close(fig)
    return Path(path)


def _best_effort(fn):
    def wrapper(*args, **kw):
        try:
            return fn(*args, **kw)
        except Exception as exc:  # plotting must never break the data path
            log.warning("plot %s skipped: %s", fn.__name__, exc)
            return None

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_best_effort
def plot_miss_rate(curves, path):
    """Miss rate against false positives per image, one line per model."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for name, c in curves.items():
        c = np.asarray(c, dtype=float)
        ax.plot(np.maximum(c[:, 1], 1e-3), c[:, 2], marker=".", label=name)
    ax.set_xscale("log")
    ax.set_xlabel("false positives per image")
    ax.set_ylabel("miss rate")
    ax.set_ylim(0, 1)
    ax.legend()
    return _save(fig, path)


@_best_effort
def plot_prune_curve(rows, path):
    """Detection accuracy against the fraction of parameters removed."""
    plt = _pyplot()
    removed = [float(r["removed"]) for r in rows]
    acc = [float(r["accuracy"]) for r in rows]
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.plot(np.array(removed) * 100, acc, marker="o")
    ax.set_xlabel("parameters removed (%)")
    ax.set_ylabel("detection accuracy")
    ax.set_ylim(0, 1)
    return _save(fig, path)


@_best_effort
def plot_finetune(series, path, baseline=None):
    """Validation precision per fine-tune epoch, one line per parameter tier."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for tier, pts in sorted(series.items(), reverse=True):
        ep, prec = zip(*pts)
        ax.plot(ep, prec, marker=".", label=f"{float(tier) * 100:.0f}% params")
    if baseline is not None:
        ax.axhline(baseline, color="k", ls="--", lw=0.8, label="before pruning")
    ax.set_xlabel("fine-tune epoch")
    ax.set_ylabel("corner precision")
    ax.legend()
    return _save(fig, path)


@_best_effort
def plot_overlay(image, peaks, slots, path):
    """Input image with detected corners and assembled slots drawn on top."""
    plt = _pyplot()
    img = np.asarray(image, dtype=float).reshape(image.shape[-2:])
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(img, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
    for p in peaks:
        ax.plot(p.x, p.y, "r+", ms=8)
    for s in slots:
        poly = np.array(s.polygon() + [s.polygon()[0]])
        ax.plot(poly[:, 0], poly[:, 1], "-", color="lime", lw=1.2)
    ax.set_xlim(-0.5, img.shape[1] - 0.5)
    ax.set_ylim(img.shape[0] - 0.5, -0.5)
    ax.grid(False)
    ax.set_axis_off()
    return _save(fig, path)


def export_run_plots(run_dir, out_dir, miss_curves=None):
    """Write the pruning, fine-tune and miss-rate tables and images for a pipeline run directory.

    Returns the list of files written.
    """
    run_dir, out_dir = Path(run_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    curve_path = run_dir / "prune_curve.tsv"
    if curve_path.exists():
        rows = read_table(curve_path)
        written.append(write_table(out_dir / "accuracy_vs_pruning.tsv",
                                   ["removed", "ratio", "params", "accuracy"],
                                   [(float(r["removed"]), float(r["ratio"]), r["params"], float(r["accuracy"]))
                                    for r in rows]))
        written.append(plot_prune_curve(rows, out_dir / "accuracy_vs_pruning.png"))

    metrics_path = run_dir / "metrics.tsv"
    if metrics_path.exists():
        rows = read_table(metrics_path)
        series = {}
        for r in rows:
            if r["stage"] == "finetune":
                series.setdefault(r["tier"], []).append((int(r["epoch"]), float(r["precision"])))
        pre = [float(r["precision"]) for r in rows if r["stage"] == "select"]
        baseline = pre[-1] if pre else None
        table = [(t, e, p) for t, pts in sorted(series.items(), reverse=True) for e, p in pts]
        written.append(write_table(out_dir / "finetune_recovery.tsv", ["tier", "epoch", "precision"],
                                   table))
        if series:
            written.append(plot_finetune(series, out_dir / "finetune_recovery.png", baseline))

    curves = dict(miss_curves or {})
    for p in sorted(run_dir.glob("miss_rate_*.tsv")):
        curves.setdefault(p.stem[len("miss_rate_"):],
                          np.array([[float(r["threshold"]), float(r["fppi"]), float(r["miss_rate"])]
                                    for r in read_table(p)]))
    if curves:
        table = [(name, *row) for name, c in curves.items() for row in np.asarray(c).tolist()]
        written.append(write_table(out_dir / "miss_rate_vs_fppi.tsv",
                                   ["model", "threshold", "fppi", "miss_rate"], table))
        written.append(plot_miss_rate(curves, out_dir / "miss_rate_vs_fppi.png"))
    return [w for w in written if w is not None]
