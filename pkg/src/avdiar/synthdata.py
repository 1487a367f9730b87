"""Reproducible synthetic multi-speaker scenarios.

Each scenario bundles (a) per-speaker speech activity sampled as alternating
speech/silence runs and steered toward a target overlap ratio, (b) acoustic
features built from identity-specific spectral templates modulated by a
speaking envelope plus Gaussian noise, (c) lip ROI streams whose mouth
aperture oscillates with that envelope, and (d) ground-truth segments that
match the sampled activity exactly.

Identity-dependent structure (spectral template, mouth geometry) is derived
by hashing the identity label, so the same identity sounds and looks the
same across scenarios while train/test identity pools stay disjoint.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from .encoders import LipRoiSequence
from .rttm import ActivityMatrix, Segment, activity_to_segments
from .tensorio import read_json, read_tensor, write_json, write_tensor

_MAX_OVERLAP_ATTEMPTS = 400
_OVERLAP_SLACK = 0.045  # accept slightly inside the documented +/-0.05 band


@dataclass
class ScenarioConfig:
    num_speakers: int = 3
    duration: float = 60.0
    frame_rate: float = 100.0
    visual_frame_rate: float = 25.0
    overlap_ratio: float = 0.2
    noise_level: float = 0.1
    seed: int = 0
    feature_dim: int = 80
    roi_size: int = 16
    mean_speech_run: float = 2.0


@dataclass
class ScenarioBundle:
    recording_id: str
    audio_features: np.ndarray          # (T, feature_dim) at frame_rate
    lip_rois: list[LipRoiSequence]      # per speaker, at visual_frame_rate
    truth: list[Segment]
    speaker_identities: list[str]
    frame_rate: float
    visual_frame_rate: float

    @property
    def num_frames(self) -> int:
        return self.audio_features.shape[0]

    def truth_matrix(self) -> ActivityMatrix:
        return _segments_to_matrix(self)

    def lips_at_audio_rate(self) -> list[LipRoiSequence]:
        factor = int(round(self.frame_rate / self.visual_frame_rate))
        out = []
        for seq in self.lip_rois:
            frames = np.repeat(seq.frames, factor, axis=0)[: self.num_frames]
            out.append(LipRoiSequence(frames, seq.speaker_id))
        return out


def _segments_to_matrix(bundle: ScenarioBundle) -> ActivityMatrix:
    from .rttm import segments_to_activity

    return segments_to_activity(
        bundle.truth, bundle.frame_rate, bundle.num_frames, bundle.speaker_identities
    )


def _identity_rng(identity: str) -> np.random.Generator:
    digest = hashlib.blake2s(identity.encode("utf-8"), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def spectral_template(identity: str, feature_dim: int = 80) -> np.ndarray:
    """Fixed per-identity spectral shape: a few Gaussian formant-like bumps."""
    rng = _identity_rng(identity)
    bins = np.arange(feature_dim, dtype=np.float64)
    template = np.full(feature_dim, 0.05)
    for _ in range(3):
        center = rng.uniform(4, feature_dim - 4)
        width = rng.uniform(1.5, 5.0)
        amp = rng.uniform(0.5, 1.0)
        template += amp * np.exp(-0.5 * ((bins - center) / width) ** 2)
    return 3.0 * template / np.linalg.norm(template)


def _mouth_geometry(identity: str, roi_size: int) -> tuple[float, float, float]:
    rng = _identity_rng(identity + "/mouth")
    half_width = rng.uniform(0.25, 0.38) * roi_size
    center_y = roi_size / 2 + rng.uniform(-1.5, 1.5)
    max_aperture = rng.uniform(0.14, 0.20) * roi_size
    return half_width, center_y, max_aperture


def _overlap_fraction(activity: np.ndarray) -> float:
    concurrent = activity.sum(axis=1)
    speech = int((concurrent >= 1).sum())
    if speech == 0:
        return 0.0
    return float((concurrent >= 2).sum()) / speech


def _solve_speech_prob(target_ratio: float, n_speakers: int) -> float:
    """Per-speaker speaking probability whose independent-overlap ratio hits
    the target: ratio(p) = 1 - N p (1-p)^(N-1) / (1 - (1-p)^N)."""

    def ratio(p: float) -> float:
        p_any = 1.0 - (1.0 - p) ** n_speakers
        p_single = n_speakers * p * (1.0 - p) ** (n_speakers - 1)
        return 1.0 - p_single / p_any

    lo, hi = 1e-6, 1.0 - 1e-6
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if ratio(mid) < target_ratio:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _sample_speaker_runs(
    rng: np.random.Generator, n_frames: int, frame_rate: float, p_speech: float, mean_speech_run: float
) -> np.ndarray:
    mean_speech = max(mean_speech_run * frame_rate, 2.0)
    mean_silence = mean_speech * (1.0 - p_speech) / max(p_speech, 1e-6)
    out = np.zeros(n_frames, dtype=np.int8)
    speaking = rng.random() < p_speech
    t = 0
    while t < n_frames:
        mean = mean_speech if speaking else mean_silence
        run = max(1, int(round(rng.exponential(mean))))
        if speaking:
            out[t : t + run] = 1
        t += run
        speaking = not speaking
    return out


def sample_activity(rng: np.random.Generator, config: ScenarioConfig) -> np.ndarray:
    """(T, N) binary activity with overlap fraction within +/-0.05 of target.

    Each speaker alternates exponential speech/silence runs; the shared
    speaking probability is nudged between rejection attempts until the
    realized overlap lands inside the band.
    """
    n_frames = int(round(config.duration * config.frame_rate))
    target = config.overlap_ratio
    p = _solve_speech_prob(min(max(target, 0.03), 0.97), config.num_speakers)
    for _ in range(_MAX_OVERLAP_ATTEMPTS):
        cols = [
            _sample_speaker_runs(rng, n_frames, config.frame_rate, p, config.mean_speech_run)
            for _ in range(config.num_speakers)
        ]
        activity = np.stack(cols, axis=1)
        if (activity.sum(axis=0) == 0).any():
            continue  # every speaker must say something
        achieved = _overlap_fraction(activity)
        if abs(achieved - target) <= _OVERLAP_SLACK:
            return activity
        p = float(np.clip(p * (1.10 if achieved < target else 0.90), 1e-4, 0.995))
    raise ValueError(
        f"could not reach overlap_ratio={target} with {config.num_speakers} speakers "
        f"in {_MAX_OVERLAP_ATTEMPTS} attempts; target infeasible for this configuration"
    )


def _speaking_envelope(
    rng: np.random.Generator, active: np.ndarray, frame_rate: float
) -> np.ndarray:
    """Slow positive modulation of speech energy; zero off-speech."""
    mod_freq = rng.uniform(0.8, 2.0)
    phase = rng.uniform(0, 2 * np.pi)
    t = np.arange(active.shape[0]) / frame_rate
    return active * (0.75 + 0.25 * np.sin(2 * np.pi * mod_freq * t + phase))


def _render_lips(
    rng: np.random.Generator,
    identity: str,
    envelope_visual: np.ndarray,
    roi_size: int,
    noise_level: float,
) -> np.ndarray:
    """Mouth aperture oscillates while speaking, sits nearly closed otherwise."""
    n_frames = envelope_visual.shape[0]
    half_width, center_y, max_aperture = _mouth_geometry(identity, roi_size)
    syllable_freq = rng.uniform(3.0, 5.0)
    phase = rng.uniform(0, 2 * np.pi)
    t = np.arange(n_frames)
    osc = 0.5 + 0.5 * np.sin(2 * np.pi * syllable_freq * t / 25.0 + phase)
    aperture = 0.6 + max_aperture * envelope_visual * osc  # half-height, pixels
    yy, xx = np.mgrid[0:roi_size, 0:roi_size].astype(np.float64)
    dx = ((xx - roi_size / 2) / half_width) ** 2
    dy = (yy - center_y) ** 2
    mouth = dx[None] + dy[None] / (aperture[:, None, None] ** 2) <= 1.0
    frames = 0.75 + 0.4 * noise_level * rng.standard_normal((n_frames, roi_size, roi_size))
    frames = np.where(mouth, 0.15, frames)
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


def _validate_config(config: ScenarioConfig) -> int:
    if not 2 <= config.num_speakers <= 6:
        raise ValueError(f"num_speakers must be in [2, 6], got {config.num_speakers}")
    if not 0 <= config.overlap_ratio < 1:
        raise ValueError(f"overlap_ratio must be in [0, 1), got {config.overlap_ratio}")
    if config.duration <= 0:
        raise ValueError(f"duration must be positive, got {config.duration}")
    if config.noise_level < 0:
        raise ValueError(f"noise_level must be >= 0, got {config.noise_level}")
    factor = config.frame_rate / config.visual_frame_rate
    if abs(factor - round(factor)) > 1e-9 or factor < 1:
        raise ValueError(
            f"frame_rate {config.frame_rate} must be an integer multiple of "
            f"visual_frame_rate {config.visual_frame_rate}"
        )
    return int(round(factor))


def generate_scenario(
    config: ScenarioConfig,
    identity_pool: list[str] | None = None,
    recording_id: str | None = None,
) -> ScenarioBundle:
    """Generate one scenario; bit-identical for a fixed config and pool."""
    factor = _validate_config(config)
    rng = np.random.default_rng(config.seed)
    if identity_pool is None:
        picks = rng.choice(10000, size=config.num_speakers, replace=False)
    else:
        if len(set(identity_pool)) < config.num_speakers:
            raise ValueError(
                f"identity pool has {len(set(identity_pool))} ids, need {config.num_speakers}"
            )
        picks = rng.choice(len(identity_pool), size=config.num_speakers, replace=False)
    identities = (
        [f"id{int(k):04d}" for k in picks]
        if identity_pool is None
        else [identity_pool[int(k)] for k in picks]
    )
    if recording_id is None:
        recording_id = f"scn{config.seed:06d}"

    activity = sample_activity(rng, config)  # (T, N)
    n_frames = activity.shape[0]
    n_visual = int(round(config.duration * config.visual_frame_rate))

    features = config.noise_level * rng.standard_normal((n_frames, config.feature_dim))
    lip_rois = []
    for j, identity in enumerate(identities):
        envelope = _speaking_envelope(rng, activity[:, j].astype(np.float64), config.frame_rate)
        features += np.outer(envelope, spectral_template(identity, config.feature_dim))
        envelope_visual = envelope[::factor][:n_visual]
        frames = _render_lips(rng, identity, envelope_visual, config.roi_size, config.noise_level)
        lip_rois.append(LipRoiSequence(frames, identity))

    truth = activity_to_segments(
        ActivityMatrix(activity, config.frame_rate, identities), 0.0, recording_id
    )
    return ScenarioBundle(
        recording_id=recording_id,
        audio_features=features.astype(np.float32),
        lip_rois=lip_rois,
        truth=truth,
        speaker_identities=identities,
        frame_rate=config.frame_rate,
        visual_frame_rate=config.visual_frame_rate,
    )


DEFAULT_TRAIN_POOL = [f"id{k:04d}" for k in range(10)]
DEFAULT_TEST_POOL = [f"id{k:04d}" for k in range(100, 108)]


def make_split(
    config: ScenarioConfig,
    counts: tuple[int, int, int] = (40, 10, 10),
    seed_starts: tuple[int, int, int] = (1000, 2000, 3000),
    train_pool: list[str] | None = None,
    test_pool: list[str] | None = None,
) -> dict[str, list[ScenarioBundle]]:
    """Generate train/dev/test scenario sets.

    Seed ranges must be disjoint across splits; the dev set shares the train
    identity pool while the test pool is disjoint from it, so evaluation
    always sees unseen voices and faces.
    """
    train_pool = list(train_pool or DEFAULT_TRAIN_POOL)
    test_pool = list(test_pool or DEFAULT_TEST_POOL)
    clash = set(train_pool) & set(test_pool)
    if clash:
        raise ValueError(f"train/test identity pools overlap: {sorted(clash)}")
    names = ("train", "dev", "test")
    ranges = {
        name: range(start, start + count)
        for name, start, count in zip(names, seed_starts, counts)
    }
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            if set(ranges[a]) & set(ranges[b]):
                raise ValueError(
                    f"overlapping seed ranges for splits {a!r} and {b!r}: "
                    f"{ranges[a]} vs {ranges[b]}"
                )
    pools = {"train": train_pool, "dev": train_pool, "test": test_pool}
    out: dict[str, list[ScenarioBundle]] = {}
    for name in names:
        bundles = []
        for seed in ranges[name]:
            scenario = generate_scenario(
                replace(config, seed=seed),
                identity_pool=pools[name],
                recording_id=f"{name}-{seed:06d}",
            )
            bundles.append(scenario)
        out[name] = bundles
    return out


def save_scenario(directory, bundle: ScenarioBundle) -> None:
    """Persist a scenario as tensor containers + truth RTTM + metadata."""
    from pathlib import Path

    from .rttm import write_rttm

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(directory / "audio.f32bin", bundle.audio_features)
    for seq in bundle.lip_rois:
        write_tensor(directory / f"lips_{seq.speaker_id}.f32bin", seq.frames)
    (directory / "truth.rttm").write_text(write_rttm(bundle.truth), encoding="utf-8")
    write_json(
        directory / "scenario.json",
        {
            "recording_id": bundle.recording_id,
            "speaker_identities": bundle.speaker_identities,
            "frame_rate": bundle.frame_rate,
            "visual_frame_rate": bundle.visual_frame_rate,
        },
    )


def load_scenario(directory) -> ScenarioBundle:
    from pathlib import Path

    from .rttm import parse_rttm

    directory = Path(directory)
    meta = read_json(directory / "scenario.json")
    audio = read_tensor(directory / "audio.f32bin")
    lips = [
        LipRoiSequence(read_tensor(directory / f"lips_{spk}.f32bin"), spk)
        for spk in meta["speaker_identities"]
    ]
    truth = parse_rttm((directory / "truth.rttm").read_text(encoding="utf-8"))
    return ScenarioBundle(
        recording_id=meta["recording_id"],
        audio_features=audio,
        lip_rois=lips,
        truth=truth,
        speaker_identities=list(meta["speaker_identities"]),
        frame_rate=float(meta["frame_rate"]),
        visual_frame_rate=float(meta["visual_frame_rate"]),
    )
