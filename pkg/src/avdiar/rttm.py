"""RTTM segment I/O and conversion to/from frame-aligned activity matrices.

RTTM (Rich Transcription Time Marked) is the NIST line-based interchange
format for diarization output: one ``SPEAKER`` line per speech segment.
Only the SPEAKER subtype is supported; other line types are skipped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_RTTM_LINE = "SPEAKER {rec} 1 {onset:.2f} {dur:.2f} <NA> <NA> {spk} <NA> <NA>"


class RttmParseError(ValueError):
    """Raised when an RTTM line cannot be parsed."""


@dataclass(frozen=True)
class Segment:
    """One speaker-homogeneous speech interval, in seconds."""

    recording_id: str
    speaker_id: str
    onset: float
    duration: float

    def __post_init__(self):
        if self.onset < 0:
            raise ValueError(f"segment onset must be >= 0, got {self.onset}")
        if self.duration <= 0:
            raise ValueError(f"segment duration must be > 0, got {self.duration}")

    @property
    def end(self) -> float:
        return self.onset + self.duration


@dataclass
class ActivityMatrix:
    """Frame x speaker binary speech activity.

    ``values[t, n]`` is 1 iff speaker ``speaker_order[n]`` is speaking during
    frame ``t``. Overlap is allowed (several 1s in a row).
    """

    values: np.ndarray
    frame_rate: float
    speaker_order: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.dtype != np.int8:
            self.values = self.values.astype(np.int8)
        self.speaker_order = list(self.speaker_order)
        if self.values.ndim != 2:
            raise ValueError(f"activity grid must be 2-D, got shape {self.values.shape}")
        if self.values.shape[1] != len(self.speaker_order):
            raise ValueError(
                f"grid has {self.values.shape[1]} columns but speaker_order has "
                f"{len(self.speaker_order)} entries"
            )
        if len(set(self.speaker_order)) != len(self.speaker_order):
            raise ValueError(f"duplicate speaker ids in {self.speaker_order}")
        if self.frame_rate <= 0:
            raise ValueError(f"frame_rate must be positive, got {self.frame_rate}")
        bad = (self.values != 0) & (self.values != 1)
        if bad.any():
            raise ValueError("activity values must be 0 or 1")

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def num_speakers(self) -> int:
        return self.values.shape[1]


def parse_rttm(text: str) -> list[Segment]:
    """Parse RTTM text into segments, preserving line order.

    SPEAKER lines are consumed; any other subtype is skipped silently.
    Raises RttmParseError (naming the line) on malformed numeric fields,
    missing fields, or non-positive durations.
    """
    segments = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        fields = line.split()
        if fields[0] != "SPEAKER":
            continue
        if len(fields) < 9:
            raise RttmParseError(
                f"line {lineno}: expected >= 9 fields on a SPEAKER line, got {len(fields)}"
            )
        try:
            onset = float(fields[3])
            duration = float(fields[4])
        except ValueError:
            raise RttmParseError(
                f"line {lineno}: malformed numeric field "
                f"(onset={fields[3]!r}, duration={fields[4]!r})"
            ) from None
        if duration <= 0:
            raise RttmParseError(f"line {lineno}: non-positive duration {duration}")
        if onset < 0:
            raise RttmParseError(f"line {lineno}: negative onset {onset}")
        segments.append(Segment(fields[1], fields[7], onset, duration))
    return segments


def write_rttm(segments: list[Segment]) -> str:
    """Serialize segments as RTTM, sorted by (recording_id, onset).

    Timestamps are formatted with two decimals, which is exact at the 10 ms
    frame hop used throughout.
    """
    ordered = sorted(segments, key=lambda s: (s.recording_id, s.onset, s.speaker_id))
    return "".join(
        _RTTM_LINE.format(rec=s.recording_id, onset=s.onset, dur=s.duration, spk=s.speaker_id)
        + "\n"
        for s in ordered
    )


def segments_to_activity(
    segments: list[Segment],
    frame_rate: float,
    num_frames: int,
    speaker_order: list[str],
) -> ActivityMatrix:
    """Rasterize segments onto a frame grid.

    Frame t is active for a speaker iff the frame midpoint (t + 0.5) / frame_rate
    falls inside one of that speaker's segments (half-open [onset, end)).
    Using midpoints makes the target builder and the scorer agree on boundaries.
    """
    if frame_rate <= 0:
        raise ValueError(f"frame_rate must be positive, got {frame_rate}")
    col = {spk: j for j, spk in enumerate(speaker_order)}
    unknown = sorted({s.speaker_id for s in segments} - col.keys())
    if unknown:
        raise ValueError(f"segments reference speakers not in speaker_order: {', '.join(unknown)}")
    values = np.zeros((num_frames, len(speaker_order)), dtype=np.int8)
    midpoints = (np.arange(num_frames) + 0.5) / frame_rate
    for seg in segments:
        j = col[seg.speaker_id]
        values[(midpoints >= seg.onset) & (midpoints < seg.end), j] = 1
    return ActivityMatrix(values, frame_rate, list(speaker_order))


def activity_to_segments(
    matrix: ActivityMatrix,
    min_duration: float = 0.0,
    recording_id: str = "rec",
) -> list[Segment]:
    """Extract maximal per-speaker runs of 1s as segments.

    Runs strictly shorter than ``min_duration`` seconds are dropped. For
    frame-aligned segments and min_duration=0 this inverts
    ``segments_to_activity`` exactly (adjacent runs merge).
    """
    out = []
    fr = matrix.frame_rate
    for j, spk in enumerate(matrix.speaker_order):
        col = matrix.values[:, j]
        edges = np.flatnonzero(np.diff(np.pad(col, 1)))
        for a, b in zip(edges[::2], edges[1::2]):
            duration = (b - a) / fr
            if duration < min_duration:
                continue
            out.append(Segment(recording_id, spk, a / fr, duration))
    out.sort(key=lambda s: (s.onset, s.speaker_id))
    return out
