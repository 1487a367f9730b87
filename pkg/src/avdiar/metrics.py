"""Frame-based diarization error rate (DER) with optimal speaker mapping.

DER decomposes into missed speech (MISS), false alarm (FA), and speaker
confusion (SPKERR), each expressed as a percentage of total reference
speech frames. Scoring is frame-based (no collar): at a 10 ms hop the
result is deterministic and consistent with the frame-level training targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations
from typing import NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .rttm import ActivityMatrix

# Exhaustive assignment is exact and fast enough up to 8 speakers (the
# realistic meeting range); larger casts fall back to the Hungarian method.
_EXHAUSTIVE_LIMIT = 8


@dataclass(frozen=True)
class DerBreakdown:
    """DER and its additive components, in percent.

    ``der == miss + fa + spkerr`` holds exactly (same floating-point sums).
    ``mapping`` is the optimal partial hypothesis->reference speaker map.
    """

    miss: float
    fa: float
    spkerr: float
    der: float
    mapping: dict[str, str] = field(default_factory=dict)


class FrameErrorCounts(NamedTuple):
    miss_frames: int
    fa_frames: int
    spkerr_frames: int
    speech_frames: int


def _check_aligned(ref: ActivityMatrix, hyp: ActivityMatrix) -> None:
    if ref.num_frames != hyp.num_frames:
        raise ValueError(
            f"frame count mismatch: ref has {ref.num_frames}, hyp has {hyp.num_frames}"
        )
    if ref.frame_rate != hyp.frame_rate:
        raise ValueError(
            f"frame rate mismatch: ref {ref.frame_rate} vs hyp {hyp.frame_rate}"
        )


def _best_assignment(overlap: np.ndarray) -> list[tuple[int, int]]:
    """Injective (hyp, ref) index pairs maximizing total agreed frames."""
    n_hyp, n_ref = overlap.shape
    if n_hyp == 0 or n_ref == 0:
        return []
    if max(n_hyp, n_ref) <= _EXHAUSTIVE_LIMIT:
        best_pairs: list[tuple[int, int]] = []
        best_score = -1
        if n_hyp <= n_ref:
            for perm in permutations(range(n_ref), n_hyp):
                score = sum(overlap[h, r] for h, r in enumerate(perm))
                if score > best_score:
                    best_score = score
                    best_pairs = list(enumerate(perm))
        else:
            for perm in permutations(range(n_hyp), n_ref):
                score = sum(overlap[h, r] for r, h in enumerate(perm))
                if score > best_score:
                    best_score = score
                    best_pairs = [(h, r) for r, h in enumerate(perm)]
        return best_pairs
    rows, cols = linear_sum_assignment(overlap, maximize=True)
    return list(zip(rows.tolist(), cols.tolist()))


def optimal_speaker_mapping(ref: ActivityMatrix, hyp: ActivityMatrix) -> dict[str, str]:
    """One-to-one partial map hyp speaker -> ref speaker maximizing agreement.

    Pairs that share zero frames of agreed speech are left unmapped, so a
    hypothesis speaker that never coincides with reference speech stays out
    of the map entirely.
    """
    _check_aligned(ref, hyp)
    overlap = hyp.values.T.astype(np.int64) @ ref.values.astype(np.int64)
    pairs = _best_assignment(overlap)
    return {
        hyp.speaker_order[h]: ref.speaker_order[r]
        for h, r in pairs
        if overlap[h, r] > 0
    }


def frame_error_counts(
    ref: ActivityMatrix, hyp: ActivityMatrix, mapping: dict[str, str]
) -> FrameErrorCounts:
    """Per-frame multiset error counts under a given speaker mapping.

    With R the reference active set and H the mapped hypothesis active set
    at one frame: miss += max(|R|-|H|, 0), fa += max(|H|-|R|, 0),
    spkerr += min(|R|, |H|) - |R n H|.
    """
    _check_aligned(ref, hyp)
    r = ref.values.astype(np.int64)
    h = hyp.values.astype(np.int64)
    n_ref_t = r.sum(axis=1)
    n_hyp_t = h.sum(axis=1)
    ref_col = {spk: j for j, spk in enumerate(ref.speaker_order)}
    hyp_col = {spk: j for j, spk in enumerate(hyp.speaker_order)}
    agree_t = np.zeros(ref.num_frames, dtype=np.int64)
    for hyp_spk, ref_spk in mapping.items():
        agree_t += r[:, ref_col[ref_spk]] * h[:, hyp_col[hyp_spk]]
    miss = int(np.maximum(n_ref_t - n_hyp_t, 0).sum())
    fa = int(np.maximum(n_hyp_t - n_ref_t, 0).sum())
    spkerr = int((np.minimum(n_ref_t, n_hyp_t) - agree_t).sum())
    return FrameErrorCounts(miss, fa, spkerr, int(n_ref_t.sum()))


def breakdown_from_counts(
    counts: FrameErrorCounts, mapping: dict[str, str] | None = None
) -> DerBreakdown:
    if counts.speech_frames == 0:
        raise ValueError("reference contains no speech; DER is undefined")
    denom = float(counts.speech_frames)
    miss = 100.0 * counts.miss_frames / denom
    fa = 100.0 * counts.fa_frames / denom
    spkerr = 100.0 * counts.spkerr_frames / denom
    return DerBreakdown(
        miss=miss, fa=fa, spkerr=spkerr, der=miss + fa + spkerr, mapping=dict(mapping or {})
    )


def compute_der(ref: ActivityMatrix, hyp: ActivityMatrix) -> DerBreakdown:
    """Score a hypothesis against a reference under the optimal speaker map."""
    _check_aligned(ref, hyp)
    mapping = optimal_speaker_mapping(ref, hyp)
    counts = frame_error_counts(ref, hyp, mapping)
    return breakdown_from_counts(counts, mapping)
