"""Deterministic SVG figures for reports.

Every figure is rendered with a fixed SVG hash salt, text kept as text, and no
date metadata, so the same report always gives the same bytes.
"""
from __future__ import annotations

import io
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import DataFormatError  # noqa: E402
from .tensorfile import atomic_write_bytes  # noqa: E402

PLOT_KINDS = ("trajectory", "topk-bar", "heatmap", "dose-response", "overlay")
MARKER_GID = "crystallisation-marker"

_RC = {
    "svg.hashsalt": "reward-lens",
    "svg.fonttype": "none",
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
}

_REQUIRED = {
    "trajectory": ("layers", "differential"),
    "topk-bar": ("labels", "values"),
    "heatmap": ("matrix",),
    "dose-response": ("alphas", "deltas"),
    "overlay": ("grid", "curves"),
}


def _svg_bytes(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return buf.getvalue()


def _finite(values) -> np.ndarray:
    """Floats with None/"inf" strings mapped to nan/inf for plotting."""
    out = []
    for v in values:
        if v is None:
            out.append(np.nan)
        elif isinstance(v, str):
            out.append(float(v))
        else:
            out.append(float(v))
    return np.array(out, dtype=np.float64)


def _trajectory(ax, r):
    layers = np.asarray(r["layers"])
    ax.plot(layers, _finite(r["differential"]), marker="o", color="C0", label="differential")
    for key, color in (("lens_preferred", "C2"), ("lens_dispreferred", "C3")):
        if r.get(key) is not None:
            ax.plot(layers, _finite(r[key]), linestyle="--", color=color, label=key.replace("_", " "))
    layer = r.get("crystallisation_layer")
    if layer is not None:
        line = ax.axvline(layer, color="k", linestyle=":", label="crystallisation")
        line.set_gid(MARKER_GID)
    ax.axhline(0.0, color="0.5", linewidth=0.8)
    ax.set_xlabel("layer (-1 = embedding)")
    ax.set_ylabel("reward-lens readout")
    ax.legend(loc="best")


def _topk_bar(ax, r):
    labels, values = list(r["labels"]), _finite(r["values"])
    k = min(int(r.get("k", len(labels))), len(labels))
    if k:
        order = np.argsort(-np.abs(np.nan_to_num(values)), kind="stable")[:k]
        shown = values[order]
        ax.barh(np.arange(k), np.clip(shown, -1e300, 1e300),
                color=["C0" if v >= 0 else "C3" for v in np.nan_to_num(shown)])
        ax.set_yticks(np.arange(k), [labels[i] for i in order])
        ax.invert_yaxis()
    ax.axvline(0.0, color="0.5", linewidth=0.8)
    ax.set_xlabel(r.get("xlabel", "value"))


def _heatmap(ax, r):
    m = np.array([_finite(row) for row in r["matrix"]]) if len(r["matrix"]) else np.zeros((0, 0))
    if m.size:
        lim = float(np.nanmax(np.abs(m))) if np.any(np.isfinite(m)) else 1.0
        lim = lim or 1.0
        im = ax.imshow(m, cmap="RdBu_r", vmin=-lim, vmax=lim, aspect="auto")
        ax.figure.colorbar(im, ax=ax)
        if r.get("col_labels"):
            ax.set_xticks(np.arange(m.shape[1]), r["col_labels"], rotation=90)
        if r.get("row_labels"):
            ax.set_yticks(np.arange(m.shape[0]), r["row_labels"])
    ax.grid(False)


def _dose_response(ax, r):
    a = _finite(r["alphas"])
    ax.plot(a, _finite(r["deltas"]), marker="o", label="scored")
    if r.get("lens_deltas") is not None:
        ax.plot(a, _finite(r["lens_deltas"]), marker="s", linestyle="--", label="lens readout")
    slope = r.get("slope")
    if slope is not None and len(a):
        xs = np.array([a.min(), a.max()])
        ax.plot(xs, float(slope) * xs, color="k", linewidth=0.8, label=f"slope {float(slope):.4g}")
    ax.set_xlabel("alpha")
    ax.set_ylabel("reward delta")
    ax.legend(loc="best")


def _overlay(ax, r):
    grid = _finite(r["grid"])
    names = r.get("names") or [f"model {i}" for i in range(len(r["curves"]))]
    for name, curve in zip(names, r["curves"]):
        ax.plot(grid, _finite(curve), label=str(name))
    ax.set_xlabel("fractional depth")
    ax.set_ylabel("preference differential")
    if len(r["curves"]):
        ax.legend(loc="best")


_DRAW = {"trajectory": _trajectory, "topk-bar": _topk_bar, "heatmap": _heatmap,
         "dose-response": _dose_response, "overlay": _overlay}


def render_svg(report: dict, kind: str) -> bytes:
    if kind not in PLOT_KINDS:
        raise DataFormatError(f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")
    missing = [k for k in _REQUIRED[kind] if k not in report]
    if missing:
        raise DataFormatError(f"report cannot be drawn as {kind!r}: missing {missing}")
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        _DRAW[kind](ax, report)
        if report.get("title"):
            ax.set_title(str(report["title"]))
        fig.tight_layout()
        return _svg_bytes(fig)


def emit_svg(report: dict, kind: str, path) -> Path:
    path = Path(path)
    atomic_write_bytes(path, render_svg(report, kind))
    return path


# Convenience payload builders --------------------------------------------

def trajectory_payload(lens_dict: dict, title: Optional[str] = None) -> dict:
    return {**lens_dict, "title": title}


def bar_payload(labels: Sequence[str], values, k: int = 10, xlabel: str = "value",
                title: Optional[str] = None) -> dict:
    return {"labels": list(labels), "values": list(values), "k": k, "xlabel": xlabel, "title": title}


def heatmap_payload(matrix, row_labels=None, col_labels=None, title: Optional[str] = None) -> dict:
    return {"matrix": np.asarray(matrix, dtype=np.float64).tolist(), "row_labels": row_labels,
            "col_labels": col_labels, "title": title}
