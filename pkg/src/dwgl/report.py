"""Activation statistics, trend scoring, and file emitters (CSV/JSON/figures).

The "activated" partition splits a layer's filter norms at their overall mean
(norm >= mean counts as activated). Variance is the population variance.
The trend score is the Spearman rank correlation between filter index and
norm: strongly negative means low-index filters carry the activation while
high-index filters are suppressed.

Figures are rendered with matplotlib to plain files (SVG/PNG) next to the
delimited output; nothing interactive.
"""

import csv
import json

import numpy as np
from scipy import stats

from .errors import ConfigError


def activation_stats(norms):
    """Summary statistics of one layer's filter norms."""
    if len(norms) == 0:
        raise ConfigError("activation_stats needs a nonempty list")
    arr = np.asarray(norms, dtype=np.float64)
    mean = float(arr.mean())
    activated = arr[arr >= mean]
    return {
        "median": float(np.median(arr)),
        "max": float(arr.max()),
        "variance": float(arr.var()),  # population variance
        "overall_mean": mean,
        "activated_count": int(activated.size),
        "activated_median": float(np.median(activated)),
    }


def trend_score(norms):
    """Spearman correlation of filter index (1..K) vs norm; ties get average ranks."""
    arr = np.asarray(norms, dtype=np.float64)
    if arr.size < 3:
        raise ConfigError("trend_score needs at least 3 filters", filters=arr.size)
    if np.all(arr == arr[0]):
        return 0.0  # no trend in a constant profile
    rho = stats.spearmanr(np.arange(1, arr.size + 1), arr).statistic
    return float(rho)


def write_activation_csv(path, norms):
    """CSV with header ``index,norm``; indices are 1-based."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "norm"])
        for i, v in enumerate(norms, start=1):
            w.writerow([i, repr(float(v))])


def read_activation_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [float(r["norm"]) for r in rows]


def layer_stats(activations):
    """Stats plus trend per conv layer, JSON-ready."""
    out = {}
    for conv_id, norms in activations.items():
        entry = activation_stats(norms)
        entry["trend_score"] = trend_score(norms) if len(norms) >= 3 else None
        entry["filters"] = len(norms)
        out[conv_id] = entry
    return out


def write_stats_json(path, stats_by_layer):
    with open(path, "w") as fh:
        json.dump(stats_by_layer, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# figures


def _pyplot():
    import matplotlib
    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt
    return plt


def activation_figure(path, norms, title=""):
    """Scatter of filter index vs activation norm, saved to ``path``."""
    plt = _pyplot()
    arr = np.asarray(norms, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.scatter(np.arange(1, arr.size + 1), arr, s=14)
    ax.axhline(arr.mean(), color="tab:red", lw=0.8, ls="--", label="mean")
    ax.set_xlabel("filter index")
    ax.set_ylabel("activation (group norm)")
    if title:
        ax.set_title(title, fontsize=10)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def history_figure(path, rows):
    """Loss/penalty and accuracy curves from history rows (list of dicts)."""
    plt = _pyplot()
    train = [r for r in rows if r["split"] == "train"]
    val = [r for r in rows if r["split"] == "val"]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    if train:
        ep = [r["epoch"] for r in train]
        ax1.plot(ep, [r["loss"] for r in train], label="train loss")
        ax1.plot(ep, [r["penalty"] for r in train], label="penalty")
        ax2.plot(ep, [r["accuracy"] for r in train], label="train")
    if val:
        ep = [r["epoch"] for r in val]
        ax1.plot(ep, [r["loss"] for r in val], label="val loss")
        ax2.plot(ep, [r["accuracy"] for r in val], label="held-out")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("accuracy")
    ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
