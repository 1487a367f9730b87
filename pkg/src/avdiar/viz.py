"""Timeline ribbons comparing reference and hypothesis speaker activity."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import optimal_speaker_mapping
from .rttm import ActivityMatrix


def disagreement_frames(
    ref: ActivityMatrix, hyp: ActivityMatrix, mapping: dict[str, str]
) -> np.ndarray:
    """Boolean (T,) mask of frames where the mapped hypothesis speaker set
    differs from the reference speaker set."""
    aligned = np.zeros_like(ref.values)
    ref_col = {s: j for j, s in enumerate(ref.speaker_order)}
    mapped_cols = []
    for h, spk in enumerate(hyp.speaker_order):
        if spk in mapping:
            aligned[:, ref_col[mapping[spk]]] = hyp.values[:, h]
            mapped_cols.append(h)
    unmapped = [h for h in range(hyp.num_speakers) if h not in mapped_cols]
    extra = (
        hyp.values[:, unmapped].any(axis=1)
        if unmapped
        else np.zeros(hyp.num_frames, dtype=bool)
    )
    return (aligned != ref.values).any(axis=1) | extra


def _ribbon_runs(column: np.ndarray, frame_rate: float) -> list[tuple[float, float]]:
    edges = np.flatnonzero(np.diff(np.pad(column, 1)))
    return [(a / frame_rate, (b - a) / frame_rate) for a, b in zip(edges[::2], edges[1::2])]


def timeline_plot(
    ref: ActivityMatrix,
    hyp: ActivityMatrix | None,
    out_path,
    title: str = "",
) -> np.ndarray:
    """Draw per-speaker activity ribbons (reference above hypothesis) and
    shade frames where the two disagree. Returns the disagreement mask so
    callers can cross-check the highlighted frame count."""
    if hyp is not None and hyp.num_speakers > 0:
        mapping = optimal_speaker_mapping(ref, hyp)
        diff = disagreement_frames(ref, hyp, mapping)
        hyp_rows = hyp.num_speakers
    else:
        hyp = None
        mapping = {}
        diff = np.zeros(ref.num_frames, dtype=bool)
        hyp_rows = 0

    duration = ref.num_frames / ref.frame_rate
    n_rows = ref.num_speakers + hyp_rows
    fig, ax = plt.subplots(figsize=(max(8.0, duration / 8.0), 1.0 + 0.5 * n_rows))
    labels, y = [], []
    row = n_rows
    for j, spk in enumerate(ref.speaker_order):
        ax.broken_barh(
            _ribbon_runs(ref.values[:, j], ref.frame_rate),
            (row - 0.4, 0.8),
            color="#2a7e3b",
        )
        labels.append(f"ref {spk}")
        y.append(row)
        row -= 1
    if hyp is not None:
        for j, spk in enumerate(hyp.speaker_order):
            tag = f" -> {mapping[spk]}" if spk in mapping else " (unmapped)"
            ax.broken_barh(
                _ribbon_runs(hyp.values[:, j], hyp.frame_rate),
                (row - 0.4, 0.8),
                color="#2b5fa3",
            )
            labels.append(f"hyp {spk}{tag}")
            y.append(row)
            row -= 1
    if diff.any():
        t = np.arange(ref.num_frames + 1) / ref.frame_rate
        ax.fill_between(
            t,
            0.2,
            n_rows + 0.8,
            where=np.append(diff, False),
            step="post",
            color="red",
            alpha=0.2,
            linewidth=0,
        )
    ax.set_yticks(y, labels)
    ax.set_ylim(0.2, n_rows + 0.8)
    ax.set_xlim(0, duration)
    ax.set_xlabel("time (s)")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return diff
