"""Visual, audio, and speaker embedding extractors.

Three desk-scale backbones produce the embeddings consumed by the fusion
decoders:

* ``LipEncoder``  - per-speaker lip ROI stream -> visual embeddings (T, N, D_V),
  with a linear + logistic head (``VisualVadHead``) giving per-frame speaking
  probabilities (visual voice activity detection).
* ``AudioEncoder`` - log-Mel style features -> convolutional bottleneck map ->
  ``frame_level_pooling`` (sliding mean (+) std) -> audio embeddings (T, 2*D').
* ``SpeakerEncoder`` - the same trunk with utterance-level statistics pooling,
  producing one L2-normalized vector per speaker from their non-overlapped
  speech.

Real pre-trained extractors enter through ``PrecomputedEmbeddings``, a
manifest of per-recording tensor files, registered like any other backbone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .rttm import Segment
from .tensorio import read_json, read_tensor


@dataclass
class LipRoiSequence:
    """Grayscale lip crops for one speaker: (T, W, H) values in [0, 1]."""

    frames: np.ndarray
    speaker_id: str

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ValueError(f"lip ROI stream must be (T, W, H) with T >= 1, got {self.frames.shape}")
        if self.frames.min() < 0 or self.frames.max() > 1:
            raise ValueError("lip ROI values must lie in [0, 1]")

    def repeated(self, factor: int) -> "LipRoiSequence":
        """Upsample in time by integer frame repetition (e.g. 25 -> 100 fps)."""
        return LipRoiSequence(np.repeat(self.frames, factor, axis=0), self.speaker_id)


@dataclass
class SpeakerEmbedding:
    """Unit-norm voice print for one speaker; ``source`` records how the
    enrollment frames were chosen (oracle labels vs. visual VAD estimate)."""

    values: np.ndarray
    source: str
    speaker_id: str = ""


class _StableSqrt(torch.autograd.Function):
    """sqrt with exact forward and a bounded backward near zero.

    The usual sqrt(var + eps) trick would break the "zero variance gives
    exactly zero std" contract; clamping only the backward keeps both the
    value exact and the gradient finite.
    """

    @staticmethod
    def forward(ctx, x):
        y = x.clamp_min(0).sqrt()
        ctx.save_for_backward(y)
        return y

    @staticmethod
    def backward(ctx, grad):
        (y,) = ctx.saved_tensors
        return grad / (2.0 * y.clamp_min(1e-4))


def _pool_numpy(feature_map: np.ndarray, segment_len: int, shift: int) -> np.ndarray:
    pad = segment_len // 2
    padded = np.pad(feature_map, ((pad, pad), (0, 0)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, segment_len, axis=0)[::shift]
    mu = win.mean(axis=-1)
    var = win.var(axis=-1)
    spread = win.max(axis=-1) - win.min(axis=-1)
    sigma = np.where(spread == 0, 0.0, np.sqrt(np.maximum(var, 0.0)))
    return np.concatenate([mu, sigma], axis=-1)


def _pool_torch(feature_map: torch.Tensor, segment_len: int, shift: int) -> torch.Tensor:
    pad = segment_len // 2
    squeeze = feature_map.dim() == 2
    x = feature_map.unsqueeze(0) if squeeze else feature_map  # (B, T, D)
    x = x.transpose(1, 2)  # (B, D, T)
    x = F.pad(x, (pad, pad), mode="replicate")
    win = x.unfold(-1, segment_len, shift)  # (B, D, T', L)
    mu = win.mean(dim=-1)
    var = win.var(dim=-1, unbiased=False)
    spread = win.amax(dim=-1) - win.amin(dim=-1)
    sigma = torch.where(spread == 0, torch.zeros_like(var), _StableSqrt.apply(var))
    out = torch.cat([mu, sigma], dim=1).transpose(1, 2)  # (B, T', 2D)
    return out.squeeze(0) if squeeze else out


def frame_level_pooling(feature_map, segment_len: int = 5, shift: int = 1):
    """Sliding-window statistics pooling of a (T, D') feature map.

    Each output frame i is the concatenation of the window mean and the
    population standard deviation over ``segment_len`` frames centered at i
    (edge frames replicated so the output keeps exactly T rows at shift 1).
    A window of identical rows yields std exactly 0.

    Accepts numpy arrays or torch tensors (torch path is differentiable and
    supports a leading batch axis).
    """
    if segment_len < 1:
        raise ValueError(f"segment_len must be >= 1, got {segment_len}")
    if segment_len % 2 == 0:
        raise ValueError(f"segment_len must be odd so windows have a center frame, got {segment_len}")
    if shift < 1:
        raise ValueError(f"shift must be >= 1, got {shift}")
    if isinstance(feature_map, torch.Tensor):
        return _pool_torch(feature_map, segment_len, shift)
    feature_map = np.asarray(feature_map)
    if feature_map.ndim != 2:
        raise ValueError(f"feature map must be (T, D'), got shape {feature_map.shape}")
    return _pool_numpy(feature_map, segment_len, shift)


class SinusoidalPositionalEncoding(nn.Module):
    """Classic fixed sin/cos time encoding, grown on demand."""

    def __init__(self, dim: int, initial_len: int = 1024):
        super().__init__()
        self.dim = dim
        self.register_buffer("table", self._build(initial_len), persistent=False)

    def _build(self, length: int) -> torch.Tensor:
        position = torch.arange(length, dtype=torch.float32).unsqueeze(1)
        div = torch.exp(
            torch.arange(0, self.dim, 2, dtype=torch.float32) * (-math.log(10000.0) / self.dim)
        )
        table = torch.zeros(length, self.dim)
        table[:, 0::2] = torch.sin(position * div)
        table[:, 1::2] = torch.cos(position * div[: self.dim // 2])
        return table

    def forward(self, length: int) -> torch.Tensor:
        if length > self.table.shape[0]:
            self.table = self._build(length).to(self.table.device)
        return self.table[:length]


class LipEncoder(nn.Module):
    """Lip ROI stream encoder: spatial conv -> temporal conv -> windowed
    self-attention -> bidirectional LSTM -> linear projection.

    All speakers share weights, so outputs are equivariant under any
    reordering of the input speaker list.
    """

    def __init__(
        self,
        roi_size: int = 16,
        emb_dim: int = 32,
        hidden_dim: int = 64,
        attn_heads: int = 2,
        attn_window: int = 512,
    ):
        super().__init__()
        self.roi_size = roi_size
        self.emb_dim = emb_dim
        self.attn_window = attn_window
        self.spatial = nn.Sequential(
            nn.Conv2d(1, 8, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(8, 16, 3, stride=2, padding=1),
            nn.ReLU(),
        )
        flat = 16 * (roi_size // 4) ** 2
        self.spatial_proj = nn.Linear(flat, hidden_dim)
        self.temporal = nn.Sequential(
            nn.Conv1d(hidden_dim, hidden_dim, 5, padding=2),
            nn.ReLU(),
            nn.Conv1d(hidden_dim, hidden_dim, 3, padding=2, dilation=2),
            nn.ReLU(),
        )
        self.pos = SinusoidalPositionalEncoding(hidden_dim)
        self.attn = nn.TransformerEncoderLayer(
            hidden_dim, attn_heads, hidden_dim * 2, dropout=0.0, batch_first=True
        )
        self.blstm = nn.LSTM(
            hidden_dim, hidden_dim // 2, batch_first=True, bidirectional=True
        )
        self.out_proj = nn.Linear(hidden_dim, emb_dim)

    def forward(self, rois: torch.Tensor) -> torch.Tensor:
        """(N, T, W, H) lip streams -> (T, N, emb_dim) visual embeddings."""
        n_spk, n_frames, w, h = rois.shape
        x = self.spatial(rois.reshape(n_spk * n_frames, 1, w, h))
        x = self.spatial_proj(x.reshape(n_spk * n_frames, -1)).reshape(n_spk, n_frames, -1)
        x = self.temporal(x.transpose(1, 2)).transpose(1, 2)
        x = x + self.pos(n_frames).unsqueeze(0)
        # Attention within fixed windows keeps memory linear in T for long
        # recordings; the LSTM below carries context across window edges.
        chunks = []
        for start in range(0, n_frames, self.attn_window):
            chunks.append(self.attn(x[:, start : start + self.attn_window]))
        x = torch.cat(chunks, dim=1)
        x, _ = self.blstm(x)
        x = self.out_proj(x)
        return x.permute(1, 0, 2)


class VisualVadHead(nn.Module):
    """Affine map + logistic squashing: visual embeddings -> speaking probs."""

    def __init__(self, emb_dim: int = 32):
        super().__init__()
        self.proj = nn.Linear(emb_dim, 1)

    def forward(self, visual_emb: torch.Tensor) -> torch.Tensor:
        # Clamp keeps probabilities strictly inside (0, 1) even where
        # float32 sigmoid saturates.
        return torch.sigmoid(self.proj(visual_emb)[..., 0]).clamp(1e-7, 1 - 1e-7)


class ConvTrunk(nn.Module):
    """Small 1-D conv stack mapping (..., T, F) features to a bottleneck map."""

    def __init__(self, feature_dim: int = 80, hidden_dim: int = 64, bottleneck_dim: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv1d(feature_dim, hidden_dim, 5, padding=2),
            nn.ReLU(),
            nn.Conv1d(hidden_dim, hidden_dim, 3, padding=1),
            nn.ReLU(),
            nn.Conv1d(hidden_dim, bottleneck_dim, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        x = self.net(x.transpose(1, 2)).transpose(1, 2)
        return x.squeeze(0) if squeeze else x


class AudioEncoder(nn.Module):
    """Conv trunk + frame-level statistics pooling -> (..., T, 2*D') embeddings."""

    def __init__(
        self,
        feature_dim: int = 80,
        hidden_dim: int = 64,
        bottleneck_dim: int = 32,
        segment_len: int = 5,
        shift: int = 1,
    ):
        super().__init__()
        self.trunk = ConvTrunk(feature_dim, hidden_dim, bottleneck_dim)
        self.segment_len = segment_len
        self.shift = shift
        self.output_dim = 2 * bottleneck_dim

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return frame_level_pooling(self.trunk(features), self.segment_len, self.shift)


class SpeakerEncoder(nn.Module):
    """Conv trunk + utterance-level statistics pooling -> one (2*D',) vector."""

    def __init__(self, feature_dim: int = 80, hidden_dim: int = 64, bottleneck_dim: int = 32):
        super().__init__()
        self.trunk = ConvTrunk(feature_dim, hidden_dim, bottleneck_dim)
        self.output_dim = 2 * bottleneck_dim

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        squeeze = features.dim() == 2
        x = self.trunk(features)
        if squeeze:
            x = x.unsqueeze(0)
        mu = x.mean(dim=1)
        var = x.var(dim=1, unbiased=False)
        spread = x.amax(dim=1) - x.amin(dim=1)
        sigma = torch.where(spread == 0, torch.zeros_like(var), _StableSqrt.apply(var))
        out = torch.cat([mu, sigma], dim=-1)
        return out.squeeze(0) if squeeze else out


class PrecomputedEmbeddings:
    """Adapter for externally extracted embeddings.

    The manifest is a JSON object mapping recording ids to tensor-container
    files (relative to the manifest directory). This is how features from
    large pre-trained models enter without shipping any weights.
    """

    def __init__(self, manifest_path):
        from pathlib import Path

        self.root = Path(manifest_path).parent
        self.manifest = read_json(manifest_path)

    def fetch(self, recording_id: str) -> np.ndarray:
        if recording_id not in self.manifest:
            known = ", ".join(sorted(self.manifest))
            raise KeyError(f"recording {recording_id!r} not in manifest (has: {known})")
        return read_tensor(self.root / self.manifest[recording_id])


AUDIO_BACKBONES = {
    "toy_conv": AudioEncoder,
    "precomputed": PrecomputedEmbeddings,
}


def create_audio_encoder(name: str, **kwargs):
    """Instantiate a registered audio backbone by name."""
    if name not in AUDIO_BACKBONES:
        raise ValueError(
            f"unknown audio backbone {name!r}; registered backbones: "
            f"{', '.join(sorted(AUDIO_BACKBONES))}"
        )
    return AUDIO_BACKBONES[name](**kwargs)


def audio_encode(features: np.ndarray, encoder, recording_id: str | None = None) -> np.ndarray:
    """(T, F) acoustic features -> (T, D_A) audio embeddings.

    ``encoder`` is either a trainable backbone module or a
    ``PrecomputedEmbeddings`` source, in which case the features are ignored
    and the stored embeddings for ``recording_id`` are returned bit-exact.
    """
    if isinstance(encoder, PrecomputedEmbeddings):
        if recording_id is None:
            raise ValueError("precomputed embeddings need a recording_id")
        return encoder.fetch(recording_id)
    with torch.no_grad():
        out = encoder(torch.as_tensor(np.asarray(features), dtype=torch.float32))
    return out.numpy()


def lip_encode(rois: list[LipRoiSequence], encoder: LipEncoder) -> np.ndarray:
    """Encode per-speaker ROI streams into a (T, N, D_V) embedding stack."""
    if not rois:
        raise ValueError("need at least one lip ROI stream")
    lengths = {seq.frames.shape[0] for seq in rois}
    if len(lengths) != 1:
        raise ValueError(f"ragged ROI streams: frame counts {sorted(lengths)} differ across speakers")
    stacked = torch.from_numpy(np.stack([seq.frames for seq in rois]))
    with torch.no_grad():
        out = encoder(stacked)
    return out.numpy()


def visual_vad(visual_emb: np.ndarray, head: VisualVadHead) -> np.ndarray:
    """(T, N, D_V) embeddings -> (T, N) speaking probabilities in (0, 1)."""
    with torch.no_grad():
        probs = head(torch.as_tensor(visual_emb, dtype=torch.float32))
    return probs.numpy()


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    edges = np.flatnonzero(np.diff(np.pad(mask.astype(np.int8), 1)))
    return list(zip(edges[::2], edges[1::2]))


def estimate_non_overlapped_segments(
    probs: np.ndarray,
    threshold: float = 0.5,
    min_len: int = 25,
    frame_rate: float = 100.0,
    speaker_order: list[str] | None = None,
    recording_id: str = "rec",
) -> list[list[Segment]]:
    """Single-speaker regions from (T, N) speaking probabilities.

    Frame t belongs to speaker n iff n is strictly above threshold and every
    other speaker is at or below it; runs shorter than ``min_len`` frames are
    dropped. Overlapped regions never qualify, which keeps the extracted
    enrollment speech speaker-pure.
    """
    probs = np.asarray(probs)
    n_frames, n_spk = probs.shape
    if speaker_order is None:
        speaker_order = [f"spk{j}" for j in range(n_spk)]
    above = probs > threshold
    alone = above & (above.sum(axis=1, keepdims=True) == 1)
    out: list[list[Segment]] = []
    for j in range(n_spk):
        segs = []
        for a, b in _runs(alone[:, j]):
            if b - a < min_len:
                continue
            segs.append(Segment(recording_id, speaker_order[j], a / frame_rate, (b - a) / frame_rate))
        out.append(segs)
    return out


def segment_frame_indices(
    segments: list[Segment], frame_rate: float, num_frames: int
) -> np.ndarray:
    """Frame indices covered by segments (clipped to [0, num_frames))."""
    idx = []
    for seg in segments:
        a = int(round(seg.onset * frame_rate))
        b = int(round(seg.end * frame_rate))
        idx.append(np.arange(max(a, 0), min(b, num_frames)))
    if not idx:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate(idx)


def embed_frames(
    encoder: SpeakerEncoder, features: torch.Tensor, frame_idx: np.ndarray
) -> torch.Tensor:
    """Differentiable speaker embedding from selected feature frames."""
    emb = encoder(features[frame_idx])
    return emb / emb.norm().clamp_min(1e-12)


def extract_speaker_embedding(
    features: np.ndarray,
    segments_per_speaker: list[list[Segment]],
    encoder: SpeakerEncoder,
    frame_rate: float = 100.0,
    vad_probs: np.ndarray | None = None,
    top_k: int = 100,
    source: str = "oracle",
    speaker_order: list[str] | None = None,
) -> list[SpeakerEmbedding]:
    """One L2-normalized embedding per speaker from their single-speaker frames.

    A speaker with no usable segments falls back to their ``top_k`` frames by
    visual VAD probability (overlap allowed), so decoding never dies on a
    speaker the visual front-end failed to isolate.
    """
    features_t = torch.as_tensor(np.asarray(features), dtype=torch.float32)
    n_frames = features_t.shape[0]
    if speaker_order is None:
        speaker_order = [f"spk{j}" for j in range(len(segments_per_speaker))]
    out = []
    for j, segments in enumerate(segments_per_speaker):
        idx = segment_frame_indices(segments, frame_rate, n_frames)
        if idx.size == 0:
            if vad_probs is None:
                raise ValueError(
                    f"speaker {speaker_order[j]!r} has no non-overlapped segments and "
                    "no vad_probs were given for the fallback"
                )
            order = np.argsort(-np.asarray(vad_probs)[:, j], kind="stable")[:top_k]
            idx = np.sort(order)
        with torch.no_grad():
            emb = embed_frames(encoder, features_t, idx)
        out.append(SpeakerEmbedding(emb.numpy(), source=source, speaker_id=speaker_order[j]))
    return out


@dataclass
class EncoderBundle:
    """The three encoders plus their freeze flags.

    A frozen group receives zero parameter updates; the lip encoder defaults
    to frozen because it is trained once as a visual VAD front-end and then
    reused, while the audio/speaker encoders may unfreeze for joint training.
    """

    lip_encoder: LipEncoder
    vad_head: VisualVadHead
    audio_encoder: AudioEncoder | PrecomputedEmbeddings
    speaker_encoder: SpeakerEncoder
    lip_frozen: bool = True
    audio_frozen: bool = True
    speaker_frozen: bool = True

    def group_modules(self) -> dict[str, list[nn.Module]]:
        groups: dict[str, list[nn.Module]] = {
            "lip": [self.lip_encoder, self.vad_head],
            "speaker": [self.speaker_encoder],
        }
        if isinstance(self.audio_encoder, nn.Module):
            groups["audio"] = [self.audio_encoder]
        return groups

    def group_parameters(self, name: str) -> list[nn.Parameter]:
        return [p for m in self.group_modules()[name] for p in m.parameters()]

    def set_frozen(self, name: str, frozen: bool) -> None:
        for p in self.group_parameters(name):
            p.requires_grad_(not frozen)
        setattr(self, f"{name}_frozen", frozen)

    def apply_freeze_flags(self) -> None:
        for name in self.group_modules():
            self.set_frozen(name, getattr(self, f"{name}_frozen"))

    def snapshot(self, name: str) -> dict[str, torch.Tensor]:
        """Bit-exact copy of a group's parameters, for freeze audits."""
        out = {}
        for i, module in enumerate(self.group_modules()[name]):
            for pname, p in module.named_parameters():
                out[f"{i}.{pname}"] = p.detach().clone()
        return out
