import csv
import json
import logging
import os
from typing import Dict, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# CSV column -> key of the fit stored in summary.json
FIT_KEYS = {
    "sup_dxX": "dxX", "sup_dvX": "dvX", "sup_dxV": "dxV", "sup_dvV": "dvV",
    "sup_dnX": "disk_sup_dnX", "sup_dnV_normal": "disk_sup_dnV_normal",
}


def read_scan(path: str) -> Dict[str, np.ndarray]:
    """Numeric columns of a scan CSV; non-numeric columns are skipped."""
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"{path}: no rows")
    columns = {}
    for name in rows[0]:
        try:
            columns[name] = np.array([float(row[name]) for row in rows])
        except ValueError:
            continue
    return columns


def load_fits(summary_path: str) -> Dict[str, dict]:
    with open(summary_path, "r") as f:
        summary = json.load(f)
    fits = {}
    for entry in summary.get("experiments", {}).values():
        fits.update(entry.get("fits", {}))
    return fits


def plot_scan(csv_path: str, x: str, ys: Sequence[str], summary: Optional[str] = None,
              output: Optional[str] = None):
    """
    Plot columns of a scan CSV against x on log-log axes.

    Fitted power laws from a summary JSON are drawn as dashed lines with
    their slope in the legend.
    """
    import matplotlib
    if output:
        matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    columns = read_scan(csv_path)
    if x not in columns:
        raise KeyError(f"{csv_path}: no numeric column '{x}' (columns: {', '.join(columns)})")
    fits = load_fits(summary) if summary else {}

    fig, ax = plt.subplots(figsize=(7, 5))
    for y in ys:
        if y not in columns:
            logger.warning("%s: no numeric column '%s'", csv_path, y)
            continue
        keep = (columns[x] > 0) & (columns[y] > 0)
        line, = ax.loglog(columns[x][keep], columns[y][keep], "o-", label=y)
        fit = fits.get(FIT_KEYS.get(y, y))
        if fit:
            low, high = fit["alpha_range"]
            grid = np.logspace(np.log10(low), np.log10(high), 50)
            ax.loglog(grid, 10 ** fit["intercept"] * grid ** fit["exponent"], "--", color=line.get_color(),
                      label=f"{y} fit: slope {fit['exponent']:.3f} ± {fit['stderr']:.3f}")
    ax.set_xlabel(x)
    ax.set_title(os.path.basename(csv_path))
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()

    if output:
        fig.savefig(output, dpi=150)
        plt.close(fig)
    else:
        plt.show()
