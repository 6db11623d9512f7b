"""Delimited outputs and the figures rendered alongside them.

Every run artifact is a CSV with a fixed column layout (documented in the
README); report figures are PNG renderings of the same data, written next
to the delimited files.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np
from matplotlib.figure import Figure

from .corpus import SCORE_KEYS, Session, binarize_labels
from .dmdc import FeatureVector, ModeSpectrum, feature_length
from .evaluation import BaselineStats, CorpusFeatures, GridRunResult
from .util import format_float

LOCAL_RESULTS_HEADER = ["Score", "Model", "Input Type", "w", "n_lambda", "F1"]
GLOBAL_RESULTS_HEADER = [
    "Score", "Model", "n_lambda", "Input Type", "w", "Accumulator", "Aggregator", "F1",
]
LOCAL_BASELINES_HEADER = ["Score", "Window Size", "F1"]
GLOBAL_BASELINES_HEADER = ["Score", "2sigma", "3sigma"]
TRAJECTORY_HEADER = ["session_id", "window_index", "cumulative_score"]
SPECTRA_HEADER = ["session_id", "t", "w", "nonzero_T", "nonzero_C"]


def _write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _f1(value: float) -> str:
    return "" if isinstance(value, float) and math.isnan(value) else f"{value:.4f}"


def _score_order(key: str) -> int:
    return SCORE_KEYS.index(key) if key in SCORE_KEYS else len(SCORE_KEYS)


def write_labels_csv(sessions: list[Session], path) -> None:
    rows = []
    for s in sessions:
        labels = binarize_labels(s)
        rows.append([s.session_id] + [labels[k] for k in SCORE_KEYS])
    _write_csv(path, ["session_id", *SCORE_KEYS], rows)


def write_features_csv(feature_rows: list[FeatureVector], path) -> None:
    """One row per (window, w, n_lambda, input type); short rows padded."""
    width = max((fv.values.size for fv in feature_rows), default=0)
    header = ["session_id", "t", "w", "input_type", "n_lambda"] + [f"v{i}" for i in range(width)]
    rows = []
    for fv in feature_rows:
        vals = [format_float(v) for v in fv.values]
        vals += [""] * (width - len(vals))
        rows.append([fv.session_id, fv.start, fv.size, fv.input_kind, fv.n_modes, *vals])
    _write_csv(path, header, rows)


def write_spectra_csv(spectra: list[ModeSpectrum], path) -> None:
    rows = [
        [sp.session_id, sp.start, sp.size, sp.nonzero_transition, sp.nonzero_control]
        for sp in spectra
    ]
    _write_csv(path, SPECTRA_HEADER, rows)


def write_local_results_csv(result: GridRunResult, path) -> None:
    rows = sorted(
        (r for r in result.results if r.status == "ok"),
        key=lambda r: (
            _score_order(r.score_key), r.window_size, -r.local_f1,
            r.model_name, r.input_kind, r.n_modes,
        ),
    )
    _write_csv(
        path,
        LOCAL_RESULTS_HEADER,
        [
            [r.score_key, r.model_name, r.input_kind, r.window_size, r.n_modes, _f1(r.local_f1)]
            for r in rows
        ],
    )


def write_global_results_csv(result: GridRunResult, path) -> None:
    rows = []
    for r in result.results:
        for (acc, agg), f1 in sorted(r.global_f1.items()):
            rows.append(
                (
                    (_score_order(r.score_key), r.window_size, -(f1 if not math.isnan(f1) else -1)),
                    [r.score_key, r.model_name, r.n_modes, r.input_kind, r.window_size, acc, agg, _f1(f1)],
                )
            )
    rows.sort(key=lambda item: (item[0], item[1]))
    _write_csv(path, GLOBAL_RESULTS_HEADER, [row for _, row in rows])


def write_local_baselines_csv(result: GridRunResult, path) -> None:
    items = sorted(result.local_baselines.items(), key=lambda kv: (_score_order(kv[0][0]), kv[0][1]))
    _write_csv(
        path,
        LOCAL_BASELINES_HEADER,
        [[key, w, _f1(stats.threshold_3sigma)] for (key, w), stats in items],
    )


def write_global_baselines_csv(baselines: dict[str, BaselineStats], path) -> None:
    items = sorted(baselines.items(), key=lambda kv: _score_order(kv[0]))
    _write_csv(
        path,
        GLOBAL_BASELINES_HEADER,
        [[key, _f1(st.threshold_2sigma), _f1(st.threshold_3sigma)] for key, st in items],
    )


def write_predictions_csv(result: GridRunResult, local_path, global_path) -> None:
    local_rows = []
    global_rows = []
    for r in result.results:
        tag = [r.score_key, r.model_name, r.input_kind, r.window_size, r.n_modes]
        for fold, sid, start, proba, pred, label in r.local_predictions:
            local_rows.append(tag + [fold, sid, start, format_float(proba), pred, label])
        for fold, acc, agg, sid, value, pred, label in r.global_predictions:
            global_rows.append(tag + [acc, agg, fold, sid, format_float(value), pred, label])
    _write_csv(
        local_path,
        ["Score", "Model", "Input Type", "w", "n_lambda", "fold", "session_id", "t", "proba", "pred", "label"],
        local_rows,
    )
    _write_csv(
        global_path,
        ["Score", "Model", "Input Type", "w", "n_lambda", "Accumulator", "Aggregator",
         "fold", "session_id", "value", "pred", "label"],
        global_rows,
    )


def write_trajectory_csv(points_by_session: dict[str, list[tuple[int, int]]], path) -> None:
    rows = []
    for sid, points in points_by_session.items():
        rows.extend([sid, t, c] for t, c in points)
    _write_csv(path, TRAJECTORY_HEADER, rows)


def write_manifest(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- figures -----------------------------------------------------------------

def render_mode_count_figure(spectra: list[ModeSpectrum], path) -> None:
    """Histogram of nonzero mode counts per window size, transition vs control."""
    sizes = sorted({sp.size for sp in spectra})
    if not sizes:
        return
    fig = Figure(figsize=(4 * len(sizes), 3.2))
    axes = fig.subplots(1, len(sizes), squeeze=False)[0]
    for ax, w in zip(axes, sizes):
        n_t = [sp.nonzero_transition for sp in spectra if sp.size == w]
        n_c = [sp.nonzero_control for sp in spectra if sp.size == w]
        bins = np.arange(w + 2)
        ht, _ = np.histogram(n_t, bins=bins)
        hc, _ = np.histogram(n_c, bins=bins)
        xs = bins[:-1]
        ax.bar(xs - 0.2, ht, width=0.4, label="transition")
        ax.bar(xs + 0.2, hc, width=0.4, label="control")
        ax.set_title(f"w = {w}")
        ax.set_xlabel("nonzero modes")
        ax.set_ylabel("windows")
    axes[0].legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)


def render_results_figure(result: GridRunResult, path) -> None:
    """Best local and global F1 per score against their baselines."""
    from .evaluation import best_cells

    best = best_cells(result)
    keys = [k for k in SCORE_KEYS if k in best]
    if not keys:
        return
    fig = Figure(figsize=(10, 4))
    ax_local, ax_global = fig.subplots(1, 2)
    xs = np.arange(len(keys))

    local_f1 = [best[k].local_f1 for k in keys]
    local_base = [best[k].local_baseline_3sigma for k in keys]
    ax_local.bar(xs, local_f1, width=0.6, label="best local F1")
    ax_local.plot(xs, local_base, "k_", markersize=14, label="3$\\sigma$ baseline")
    ax_local.set_xticks(xs, keys, rotation=45)
    ax_local.set_ylim(0, 1.05)
    ax_local.set_title("window-level")
    ax_local.legend(frameon=False, fontsize=8)

    global_f1 = []
    for k in keys:
        vals = [v for v in best[k].global_f1.values() if not math.isnan(v)]
        global_f1.append(max(vals) if vals else float("nan"))
    g2 = [best[k].global_baseline_2sigma for k in keys]
    g3 = [best[k].global_baseline_3sigma for k in keys]
    ax_global.bar(xs, global_f1, width=0.6, color="tab:orange", label="best global F1")
    ax_global.plot(xs, g2, "k_", markersize=14, label="2$\\sigma$")
    ax_global.plot(xs, g3, "r_", markersize=14, label="3$\\sigma$")
    ax_global.set_xticks(xs, keys, rotation=45)
    ax_global.set_ylim(0, 1.05)
    ax_global.set_title("session-level")
    ax_global.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)


def render_trajectory_figure(points_by_session: dict[str, list[tuple[int, int]]], path) -> None:
    fig = Figure(figsize=(6, 4))
    ax = fig.subplots()
    for sid, points in points_by_session.items():
        xs = [t for t, _ in points]
        ys = [c for _, c in points]
        ax.step(xs, ys, where="post", label=sid)
    ax.set_xlabel("window index")
    ax.set_ylabel("cumulative competent windows")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
