"""Artifact output: delimited data, JSON summaries, run manifests, and the
matching rendered figures.

Every writer is atomic (temp file + rename) and every table round-trips
through :func:`load_table`.  Figures are rendered headless next to the CSV
they visualize.
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def _atomic(path: Path):
    return path.with_suffix(path.suffix + ".tmp")


def write_table(path: str | Path, columns: dict) -> Path:
    """CSV with one named column per array; fixed 12-significant-digit format
    so equal inputs produce byte-identical files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(columns)
    arrays = [np.asarray(columns[n]) for n in names]
    n = len(arrays[0])
    tmp = _atomic(path)
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(names)
        for k in range(n):
            w.writerow([f"{a[k]:.12g}" for a in arrays])
    tmp.replace(path)
    return path


def load_table(path: str | Path) -> dict:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, data = rows[0], rows[1:]
    arr = np.array([[float(v) for v in r] for r in data])
    return {name: arr[:, j] for j, name in enumerate(header)}


def write_json(path: str | Path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = _atomic(path)
    with open(tmp, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True, default=_json_default)
        f.write("\n")
    tmp.replace(path)
    return path


def load_json(path: str | Path) -> dict:
    with open(path) as f:
        return json.load(f)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, default=_json_default).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_manifest(path: str | Path, config: dict, seed: int | None = None,
                   extra: dict | None = None) -> Path:
    from . import __version__
    manifest = {
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "versions": {
            "dsekit": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    if extra:
        manifest.update(extra)
    return write_json(path, manifest)


# ---------------------------------------------------------------------------
# figures

def render_series(path: str | Path, t: np.ndarray, curves: dict,
                  ylabel: str, title: str = "", xlabel: str = "time (s)",
                  hlines: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    for label, y in curves.items():
        ax.plot(t, y, lw=1.1, label=label)
    for label, y in (hlines or {}).items():
        ax.axhline(y, color="grey", ls="--", lw=0.8, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def render_table_figure(path: str | Path, table_path: str | Path,
                        x: str, ys: list[str], ylabel: str, title: str = "") -> Path:
    cols = load_table(table_path)
    return render_series(path, cols[x], {y: cols[y] for y in ys}, ylabel, title)
