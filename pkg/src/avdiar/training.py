"""Training loops, losses, and the end-to-end inference pipeline.

Joint training follows a freeze/unfreeze schedule: the decoder always
trains, while the pre-trained audio/speaker encoders stay frozen for the
first ``freeze_epochs`` epochs and then unfreeze according to the regime
flags (``ae_joint``, ``se_joint``). The lip encoder is trained once as a
visual VAD front-end and stays frozen throughout joint training unless
explicitly overridden.

Speaker embeddings use oracle non-overlapped segments during training and
visually estimated ones at decode time; inference ends with median
smoothing, thresholding, and run extraction back to RTTM segments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.ndimage
import torch
import torch.nn.functional as F
from torch import nn

from .decoders import DECODER_KINDS, decode
from .encoders import (
    EncoderBundle,
    LipEncoder,
    SpeakerEncoder,
    VisualVadHead,
    embed_frames,
    estimate_non_overlapped_segments,
    lip_encode,
    segment_frame_indices,
    visual_vad,
)
from .metrics import DerBreakdown, breakdown_from_counts, frame_error_counts, optimal_speaker_mapping
from .rttm import ActivityMatrix, Segment, activity_to_segments, segments_to_activity
from .synthdata import ScenarioBundle
from .tensorio import read_json, read_tensor, write_json, write_tensor

_ENROLL_MIN_LEN = 25      # frames a single-speaker run must last to enroll
_MAX_ENROLL_FRAMES = 1000  # cap enrollment length, keeps embedding cost flat


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    freeze_epochs: int = 5
    joint_epochs: int = 10
    batch_size: int = 4          # chunks per optimizer step
    chunk_len: int = 1000        # frames per training chunk (10 s at 100 fps)
    decoder_kind: str = "transformer"
    aam_margin: float = 0.2
    aam_scale: float = 32.0
    seed: int = 0
    ae_joint: bool = True
    se_joint: bool = False
    lip_joint: bool = False
    median_window: int = 11
    threshold: float = 0.5
    embedding_source: str = "oracle"  # or "visual"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.freeze_epochs + self.joint_epochs < 1:
            raise ValueError("freeze_epochs + joint_epochs must be >= 1")
        if self.decoder_kind not in DECODER_KINDS:
            raise ValueError(
                f"unknown decoder kind {self.decoder_kind!r}; choose one of: "
                f"{', '.join(DECODER_KINDS)}"
            )
        if self.embedding_source not in ("oracle", "visual"):
            raise ValueError(f"embedding_source must be 'oracle' or 'visual', got {self.embedding_source!r}")

    @property
    def total_epochs(self) -> int:
        return self.freeze_epochs + self.joint_epochs


@dataclass
class TrainState:
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)


def diarization_loss(probs, target):
    """Mean per-cell binary cross-entropy with probabilities clamped at 1e-7."""
    if isinstance(probs, torch.Tensor):
        if tuple(probs.shape) != tuple(target.shape):
            raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs target {tuple(target.shape)}")
        p = probs.clamp(1e-7, 1 - 1e-7)
        t = target.to(p.dtype)
        return -(t * torch.log(p) + (1 - t) * torch.log(1 - p)).mean()
    probs = np.asarray(probs, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if probs.shape != target.shape:
        raise ValueError(f"shape mismatch: probs {probs.shape} vs target {target.shape}")
    p = np.clip(probs, 1e-7, 1 - 1e-7)
    return float(-(target * np.log(p) + (1 - target) * np.log(1 - p)).mean())


def median_smooth(probs: np.ndarray, window: int) -> np.ndarray:
    """Median-filter each speaker track along time (edge frames replicated)."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"median window must be odd and >= 1, got {window}")
    if window == 1:
        return np.asarray(probs).copy()
    return scipy.ndimage.median_filter(np.asarray(probs), size=(window, 1), mode="nearest")


class AamSoftmaxHead(nn.Module):
    """Additive angular margin softmax over cosine logits.

    The true-class logit uses cos(theta + margin), all logits are scaled;
    margin 0 and scale 1 reduce exactly to plain softmax on cosines.
    """

    def __init__(self, emb_dim: int, num_classes: int, margin: float = 0.2, scale: float = 32.0):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_classes, emb_dim))
        nn.init.xavier_normal_(self.weight)
        self.margin = margin
        self.scale = scale

    def logits(self, emb: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        cosine = F.linear(F.normalize(emb, dim=-1), F.normalize(self.weight, dim=-1))
        cos_m = float(np.cos(self.margin))
        sin_m = float(np.sin(self.margin))
        sine = torch.sqrt((1.0 - cosine**2).clamp_min(0.0))
        phi = cosine * cos_m - sine * sin_m
        # Past theta + margin > pi the cosine form stops being monotonic;
        # fall back to a linear penalty there.
        phi = torch.where(cosine > -cos_m, phi, cosine - self.margin * sin_m)
        onehot = F.one_hot(labels, cosine.shape[-1]).bool()
        return self.scale * torch.where(onehot, phi, cosine)

    def forward(self, emb: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        return F.cross_entropy(self.logits(emb, labels), labels)


def _alone_mask(activity: np.ndarray) -> np.ndarray:
    active = activity > 0
    return active & (active.sum(axis=1, keepdims=True) == 1)


def oracle_enrollment_indices(truth: ActivityMatrix, min_len: int = _ENROLL_MIN_LEN) -> list[np.ndarray]:
    """Per-speaker frame indices of single-speaker speech from oracle labels.

    Speakers who are never alone long enough fall back to all their active
    frames (overlap included) so enrollment never comes up empty.
    """
    segs = estimate_non_overlapped_segments(
        truth.values.astype(np.float64),
        threshold=0.5,
        min_len=min_len,
        frame_rate=truth.frame_rate,
        speaker_order=truth.speaker_order,
    )
    out = []
    for j, speaker_segs in enumerate(segs):
        idx = segment_frame_indices(speaker_segs, truth.frame_rate, truth.num_frames)
        if idx.size == 0:
            idx = np.flatnonzero(truth.values[:, j])
        out.append(idx[:_MAX_ENROLL_FRAMES])
    return out


@dataclass
class _PreparedScenario:
    features: torch.Tensor        # (T, F)
    target: torch.Tensor          # (T, N)
    visual_emb: torch.Tensor      # (T, N, D_V), lip encoder output (frozen)
    enroll_idx: list[np.ndarray]  # per-speaker oracle enrollment frames
    speaker_cache: torch.Tensor | None  # (N, D_A) embeddings while SE frozen
    audio_cache: torch.Tensor | None    # (T, D_A) embeddings while AE frozen
    recording_id: str


def _prepare_scenario(bundle: EncoderBundle, scenario: ScenarioBundle) -> _PreparedScenario:
    truth = scenario.truth_matrix()
    features = torch.from_numpy(np.asarray(scenario.audio_features, dtype=np.float32))
    target = torch.from_numpy(truth.values.astype(np.float32))
    ev = torch.from_numpy(lip_encode(scenario.lips_at_audio_rate(), bundle.lip_encoder))
    enroll = oracle_enrollment_indices(truth)
    return _PreparedScenario(
        features=features,
        target=target,
        visual_emb=ev,
        enroll_idx=enroll,
        speaker_cache=None,
        audio_cache=None,
        recording_id=scenario.recording_id,
    )


def prepare_training_data(bundle: EncoderBundle, scenarios: list[ScenarioBundle]):
    """Precompute per-scenario tensors (targets, frozen visual embeddings,
    oracle enrollment frames). The result can be passed to ``train`` and
    reused across runs that share the same lip encoder."""
    return [_prepare_scenario(bundle, s) for s in scenarios]


def _speaker_embeddings(
    bundle: EncoderBundle, prep: _PreparedScenario, with_grad: bool
) -> torch.Tensor:
    def compute() -> torch.Tensor:
        return torch.stack(
            [embed_frames(bundle.speaker_encoder, prep.features, idx) for idx in prep.enroll_idx]
        )

    if with_grad:
        return compute()
    if prep.speaker_cache is None:
        with torch.no_grad():
            prep.speaker_cache = compute()
    return prep.speaker_cache


def _chunk_starts(n_frames: int, chunk_len: int) -> list[int]:
    if n_frames <= chunk_len:
        return [0]
    return list(range(0, n_frames - chunk_len + 1, chunk_len))


def train(
    bundle: EncoderBundle,
    decoder: nn.Module,
    scenarios: list[ScenarioBundle],
    config: TrainConfig,
    state: TrainState | None = None,
    prepared: list[_PreparedScenario] | None = None,
) -> TrainState:
    """Joint training with the freeze/unfreeze schedule.

    Epochs 1..freeze_epochs update the decoder only; afterwards the encoder
    groups whose joint flags are set are unfrozen and added to the Adam
    optimizer. Passing a non-fresh ``state`` resumes epoch numbering;
    ``prepared`` may carry precomputed tensors from ``prepare_training_data``
    (only valid while the lip encoder is unchanged).
    """
    if not scenarios:
        raise ValueError("empty training dataset")
    state = state or TrainState()
    torch.manual_seed(config.seed + state.epoch)
    rng = np.random.default_rng(config.seed + state.epoch)

    bundle.set_frozen("lip", True)
    bundle.set_frozen("speaker", True)
    if "audio" in bundle.group_modules():
        bundle.set_frozen("audio", True)
    if prepared is None:
        prepared = prepare_training_data(bundle, scenarios)
    for prep in prepared:
        # caches belong to this bundle's audio/speaker encoders
        prep.audio_cache = None
        prep.speaker_cache = None

    optimizer = torch.optim.Adam(decoder.parameters(), lr=config.learning_rate)
    toy_audio = isinstance(bundle.audio_encoder, nn.Module)
    unfrozen = False

    def maybe_unfreeze(epoch: int) -> None:
        nonlocal unfrozen
        if unfrozen or epoch <= config.freeze_epochs:
            return
        joint = [("audio", config.ae_joint), ("speaker", config.se_joint), ("lip", config.lip_joint)]
        for name, flag in joint:
            if not flag or name not in bundle.group_modules():
                continue
            bundle.set_frozen(name, False)
            params = bundle.group_parameters(name)
            if params:
                optimizer.add_param_group({"params": params})
        unfrozen = True

    for epoch in range(state.epoch + 1, config.total_epochs + 1):
        maybe_unfreeze(epoch)
        epoch_losses = []
        for si in rng.permutation(len(prepared)):
            prep = prepared[si]
            n_frames = prep.features.shape[0]
            starts = _chunk_starts(n_frames, config.chunk_len)
            for batch_at in range(0, len(starts), config.batch_size):
                batch = starts[batch_at : batch_at + config.batch_size]
                length = min(config.chunk_len, n_frames)
                feats = torch.stack([prep.features[a : a + length] for a in batch])
                target = torch.stack([prep.target[a : a + length] for a in batch])
                ev = torch.stack([prep.visual_emb[a : a + length] for a in batch])
                if toy_audio:
                    if bundle.audio_frozen:
                        if prep.audio_cache is None:
                            with torch.no_grad():
                                prep.audio_cache = bundle.audio_encoder(prep.features)
                        ea = torch.stack([prep.audio_cache[a : a + length] for a in batch])
                    else:
                        ea = bundle.audio_encoder(feats)
                else:
                    full = torch.from_numpy(bundle.audio_encoder.fetch(prep.recording_id))
                    ea = torch.stack([full[a : a + length] for a in batch])
                es = _speaker_embeddings(bundle, prep, with_grad=not bundle.speaker_frozen)
                es = es.unsqueeze(0).expand(len(batch), *es.shape)
                probs = decode(decoder, ev, ea, es)
                loss = diarization_loss(probs, target)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                epoch_losses.append(float(loss.detach()))
            if not bundle.speaker_frozen:
                prep.speaker_cache = None
        state.epoch = epoch
        state.loss_history.append(float(np.mean(epoch_losses)))
    return state


def pretrain_lip_encoder(
    lip_encoder: LipEncoder,
    vad_head: VisualVadHead,
    scenarios: list[ScenarioBundle],
    epochs: int = 4,
    learning_rate: float = 1e-3,
    chunk_len: int = 500,
    seed: int = 0,
) -> list[float]:
    """Train the visual VAD front-end (lip encoder + logistic head) with
    frame-level binary cross-entropy against the ground-truth activity."""
    if not scenarios:
        raise ValueError("empty lip pre-training dataset")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    optimizer = torch.optim.Adam(
        list(lip_encoder.parameters()) + list(vad_head.parameters()), lr=learning_rate
    )
    losses = []
    cached = []
    for s in scenarios:
        lips = torch.from_numpy(np.stack([q.frames for q in s.lips_at_audio_rate()]))
        target = torch.from_numpy(s.truth_matrix().values.astype(np.float32))
        cached.append((lips, target))
    for _ in range(epochs):
        epoch_losses = []
        for si in rng.permutation(len(cached)):
            lips, target = cached[si]
            n_frames = lips.shape[1]
            for a in _chunk_starts(n_frames, chunk_len):
                length = min(chunk_len, n_frames)
                ev = lip_encoder(lips[:, a : a + length])
                probs = vad_head(ev)
                loss = diarization_loss(probs, target[a : a + length])
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                epoch_losses.append(float(loss.detach()))
        losses.append(float(np.mean(epoch_losses)))
    return losses


def _enrollment_utterances(
    scenarios: list[ScenarioBundle], utterance_len: int
) -> tuple[list[np.ndarray], list[str]]:
    feats, labels = [], []
    for s in scenarios:
        truth = s.truth_matrix()
        alone = _alone_mask(truth.values)
        for j, identity in enumerate(s.speaker_identities):
            idx = np.flatnonzero(alone[:, j])
            for a in range(0, idx.size - utterance_len + 1, utterance_len):
                feats.append(s.audio_features[idx[a : a + utterance_len]])
                labels.append(identity)
    return feats, labels


def pretrain_speaker_encoder(
    scenarios: list[ScenarioBundle],
    config: TrainConfig,
    encoder: SpeakerEncoder | None = None,
    epochs: int = 8,
    learning_rate: float = 1e-3,
    utterance_len: int = 150,
    batch_size: int = 32,
    max_utterances: int = 600,
) -> tuple[SpeakerEncoder, list[float]]:
    """Train the speaker encoder with AAM-softmax over synthetic identities.

    Utterances are fixed-length slices of each speaker's single-speaker
    speech; the margin/scale come from the training config.
    """
    feats, labels = _enrollment_utterances(scenarios, utterance_len)
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ValueError(f"speaker pre-training needs >= 2 identities, got {len(classes)}")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    if len(feats) > max_utterances:
        keep = rng.choice(len(feats), size=max_utterances, replace=False)
        feats = [feats[i] for i in keep]
        labels = [labels[i] for i in keep]
    class_idx = {c: i for i, c in enumerate(classes)}
    x = torch.from_numpy(np.stack(feats).astype(np.float32))
    y = torch.tensor([class_idx[l] for l in labels])

    feature_dim = x.shape[-1]
    if encoder is None:
        encoder = SpeakerEncoder(feature_dim=feature_dim)
    head = AamSoftmaxHead(encoder.output_dim, len(classes), config.aam_margin, config.aam_scale)
    optimizer = torch.optim.Adam(
        list(encoder.parameters()) + list(head.parameters()), lr=learning_rate
    )
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(feats))
        epoch_losses = []
        for a in range(0, len(order), batch_size):
            sel = order[a : a + batch_size]
            emb = encoder(x[sel])
            loss = head(emb, y[sel])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
        losses.append(float(np.mean(epoch_losses)))
    return encoder, losses


def infer_probability_matrix(
    bundle: EncoderBundle,
    decoder: nn.Module,
    scenario: ScenarioBundle,
    config: TrainConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Raw decoder probabilities (T, N) plus the visual VAD track (T, N)."""
    if scenario.audio_features is None or scenario.audio_features.size == 0:
        raise ValueError("missing audio feature stream")
    if not scenario.lip_rois:
        raise ValueError("missing lip ROI stream")
    from .encoders import audio_encode, extract_speaker_embedding

    identities = scenario.speaker_identities
    ev = lip_encode(scenario.lips_at_audio_rate(), bundle.lip_encoder)
    vad = visual_vad(ev, bundle.vad_head)
    if config.embedding_source == "visual":
        segs = estimate_non_overlapped_segments(
            vad,
            threshold=config.threshold,
            min_len=_ENROLL_MIN_LEN,
            frame_rate=scenario.frame_rate,
            speaker_order=identities,
            recording_id=scenario.recording_id,
        )
        source = "visual-estimated"
    else:
        truth = scenario.truth_matrix()
        segs = estimate_non_overlapped_segments(
            truth.values.astype(np.float64),
            threshold=0.5,
            min_len=_ENROLL_MIN_LEN,
            frame_rate=scenario.frame_rate,
            speaker_order=identities,
            recording_id=scenario.recording_id,
        )
        source = "oracle"
    embeddings = extract_speaker_embedding(
        scenario.audio_features,
        segs,
        bundle.speaker_encoder,
        frame_rate=scenario.frame_rate,
        vad_probs=vad,
        source=source,
        speaker_order=identities,
    )
    es = torch.from_numpy(np.stack([e.values for e in embeddings]))
    ea_np = audio_encode(scenario.audio_features, bundle.audio_encoder, scenario.recording_id)
    ea_full = torch.from_numpy(ea_np)
    ev_full = torch.from_numpy(ev)
    n_frames = ev.shape[0]
    probs = np.zeros((n_frames, len(identities)), dtype=np.float64)
    with torch.no_grad():
        for a in range(0, n_frames, config.chunk_len):
            b = min(a + config.chunk_len, n_frames)
            out = decode(decoder, ev_full[a:b], ea_full[a:b], es)
            probs[a:b] = out.numpy()
    return probs, vad


def run_inference(
    bundle: EncoderBundle,
    decoder: nn.Module,
    scenario: ScenarioBundle,
    config: TrainConfig,
) -> list[Segment]:
    """Full pipeline: encoders -> fusion decoder -> median smoothing ->
    threshold -> maximal-run segments."""
    probs, _ = infer_probability_matrix(bundle, decoder, scenario, config)
    smoothed = median_smooth(probs, config.median_window)
    binary = (smoothed > config.threshold).astype(np.int8)
    matrix = ActivityMatrix(binary, scenario.frame_rate, scenario.speaker_identities)
    return activity_to_segments(matrix, 0.0, scenario.recording_id)


def evaluate_scenarios(
    bundle: EncoderBundle,
    decoder: nn.Module,
    scenarios: list[ScenarioBundle],
    config: TrainConfig,
) -> DerBreakdown:
    """Pooled frame-based DER over a scenario set (counts summed, then rated)."""
    total = np.zeros(4, dtype=np.int64)
    for scenario in scenarios:
        segments = run_inference(bundle, decoder, scenario, config)
        ref = scenario.truth_matrix()
        hyp = segments_to_activity(
            segments, scenario.frame_rate, ref.num_frames, scenario.speaker_identities
        )
        mapping = optimal_speaker_mapping(ref, hyp)
        counts = frame_error_counts(ref, hyp, mapping)
        total += np.array(counts, dtype=np.int64)
    from .metrics import FrameErrorCounts

    return breakdown_from_counts(FrameErrorCounts(*total.tolist()))


def save_checkpoint(
    path,
    exp_config: dict,
    state: TrainState,
    bundle: EncoderBundle,
    decoder: nn.Module,
) -> None:
    """Checkpoint = meta.json + one tensor container per parameter."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    groups: dict[str, list[nn.Module]] = {"decoder": [decoder], **bundle.group_modules()}
    manifest: dict[str, dict[str, str]] = {}
    for gname, modules in groups.items():
        entries = {}
        for i, module in enumerate(modules):
            for pname, param in module.named_parameters():
                key = f"{i}.{pname}"
                rel = f"params/{gname}__{key}.f32bin"
                write_tensor(path / rel, param.detach().numpy())
                entries[key] = rel
        manifest[gname] = entries
    write_json(
        path / "meta.json",
        {
            "config": exp_config,
            "epoch": state.epoch,
            "loss_history": state.loss_history,
            "groups": manifest,
            "container": {"dtype": "f32", "layout": "json-header+raw-row-major"},
        },
    )


def load_checkpoint(path, bundle: EncoderBundle, decoder: nn.Module) -> TrainState:
    """Restore parameters written by ``save_checkpoint`` into live modules."""
    path = Path(path)
    meta = read_json(path / "meta.json")
    groups: dict[str, list[nn.Module]] = {"decoder": [decoder], **bundle.group_modules()}
    for gname, entries in meta["groups"].items():
        if gname not in groups:
            raise ValueError(f"checkpoint group {gname!r} has no matching module")
        named = {}
        for i, module in enumerate(groups[gname]):
            for pname, param in module.named_parameters():
                named[f"{i}.{pname}"] = param
        for key, rel in entries.items():
            if key not in named:
                raise ValueError(f"checkpoint parameter {gname}/{key} not found in model")
            data = torch.from_numpy(read_tensor(path / rel))
            with torch.no_grad():
                named[key].copy_(data)
    return TrainState(epoch=int(meta["epoch"]), loss_history=list(meta["loss_history"]))
