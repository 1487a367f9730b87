"""Audio-visual fusion and per-speaker activity decoders.

``fuse_embeddings`` broadcasts the shared audio embeddings across speakers
and the per-speaker voice prints across time, then concatenates them with
the visual embeddings into a (T, N, D_V + 2*D_A) grid.

Four interchangeable decoders map that grid to per-frame, per-speaker
speech probabilities in (0, 1):

* ``TransformerDecoder`` - stage 1 self-attends along time within each
  speaker (speaker state tracking), stage 2 self-attends along the speaker
  axis within each frame (cross-speaker exclusion). No positional encoding
  on the speaker axis: speakers are an unordered set, so outputs are
  equivariant under speaker permutations.
* ``ConformerDecoder``  - same two stages with Conformer blocks
  (attention + convolution); the speaker-axis conv uses kernel 1 to keep
  the permutation equivariance exact.
* ``CrossAttentionDecoder`` - visual queries attend over the speaker
  embedding set, then over the audio embedding sequence, with pre-norm
  residual blocks.
* ``BlstmDecoder`` - weight-tied bidirectional recurrence along time
  (directions summed), which makes the output exactly equivariant to time
  reversal.

Every decoder emits independent per-speaker logistic probabilities rather
than a softmax: overlapped speech needs several simultaneous positives.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoders import SinusoidalPositionalEncoding


def _fuse_torch(ev: torch.Tensor, ea: torch.Tensor, es: torch.Tensor) -> torch.Tensor:
    squeeze = ev.dim() == 3
    if squeeze:
        ev, ea, es = ev.unsqueeze(0), ea.unsqueeze(0), es.unsqueeze(0)
    b, t, n, _ = ev.shape
    if ea.shape[0] != b or ea.shape[1] != t:
        raise ValueError(f"time mismatch: visual {tuple(ev.shape)} vs audio {tuple(ea.shape)}")
    if es.shape[0] != b or es.shape[1] != n:
        raise ValueError(f"speaker mismatch: visual {tuple(ev.shape)} vs speaker {tuple(es.shape)}")
    ea_b = ea.unsqueeze(2).expand(b, t, n, ea.shape[-1])
    es_b = es.unsqueeze(1).expand(b, t, n, es.shape[-1])
    out = torch.cat([ev, ea_b, es_b], dim=-1)
    return out.squeeze(0) if squeeze else out


def fuse_embeddings(visual_emb, audio_emb, speaker_embs):
    """Concatenate (T, N, D_V) visual, (T, D_A) audio, and (N, D_A) speaker
    embeddings into (T, N, D_V + 2*D_A) fusion embeddings.

    Audio rows are repeated across the speaker axis and speaker vectors
    across the time axis. Torch tensors may carry a leading batch axis.
    """
    if isinstance(visual_emb, torch.Tensor):
        return _fuse_torch(visual_emb, audio_emb, speaker_embs)
    ev = np.asarray(visual_emb)
    ea = np.asarray(audio_emb)
    es = np.asarray(speaker_embs)
    t, n = ev.shape[0], ev.shape[1]
    if ea.shape[0] != t:
        raise ValueError(f"time mismatch: visual {ev.shape} vs audio {ea.shape}")
    if es.shape[0] != n:
        raise ValueError(f"speaker mismatch: visual {ev.shape} vs speaker {es.shape}")
    ea_b = np.broadcast_to(ea[:, None, :], (t, n, ea.shape[-1]))
    es_b = np.broadcast_to(es[None, :, :], (t, n, es.shape[-1]))
    return np.concatenate([ev, ea_b, es_b], axis=-1)


def _time_stage(blocks: nn.ModuleList, x: torch.Tensor) -> torch.Tensor:
    """Run sequence blocks along the time axis independently per speaker."""
    b, t, n, d = x.shape
    y = x.permute(0, 2, 1, 3).reshape(b * n, t, d)
    for blk in blocks:
        y = blk(y)
    return y.reshape(b, n, t, d).permute(0, 2, 1, 3)


def _speaker_stage(blocks: nn.ModuleList, x: torch.Tensor) -> torch.Tensor:
    """Run sequence blocks along the speaker axis independently per frame."""
    b, t, n, d = x.shape
    y = x.reshape(b * t, n, d)
    for blk in blocks:
        y = blk(y)
    return y.reshape(b, t, n, d)


class _TwoStageDecoder(nn.Module):
    """Shared scaffolding: input projection, time positions, logistic head."""

    def __init__(self, input_dim: int, d_model: int, use_time_pe: bool = True):
        super().__init__()
        self.in_proj = nn.Linear(input_dim, d_model)
        self.use_time_pe = use_time_pe
        self.pos = SinusoidalPositionalEncoding(d_model) if use_time_pe else None
        self.head = nn.Linear(d_model, 1)

    def _stages(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        """(T, N, D_F) or (B, T, N, D_F) -> probabilities (T, N) / (B, T, N)."""
        squeeze = fused.dim() == 3
        x = fused.unsqueeze(0) if squeeze else fused
        x = self.in_proj(x)
        if self.use_time_pe:
            x = x + self.pos(x.shape[1])[None, :, None, :]
        x = self._stages(x)
        probs = torch.sigmoid(self.head(x)[..., 0]).clamp(1e-7, 1 - 1e-7)
        return probs.squeeze(0) if squeeze else probs


def _transformer_blocks(n: int, d_model: int, num_heads: int, ff_dim: int) -> nn.ModuleList:
    return nn.ModuleList(
        nn.TransformerEncoderLayer(d_model, num_heads, ff_dim, dropout=0.0, batch_first=True)
        for _ in range(n)
    )


class TransformerDecoder(_TwoStageDecoder):
    def __init__(
        self,
        input_dim: int,
        d_model: int = 256,
        num_heads: int = 2,
        ff_dim: int = 1024,
        blocks_per_stage: int = 2,
    ):
        super().__init__(input_dim, d_model)
        self.time_blocks = _transformer_blocks(blocks_per_stage, d_model, num_heads, ff_dim)
        self.speaker_blocks = _transformer_blocks(blocks_per_stage, d_model, num_heads, ff_dim)

    def _stages(self, x):
        x = _time_stage(self.time_blocks, x)
        return _speaker_stage(self.speaker_blocks, x)


class ConformerBlock(nn.Module):
    """Macaron Conformer block: half-FF, self-attention, conv module, half-FF."""

    def __init__(self, d_model: int, num_heads: int, ff_dim: int, conv_kernel: int = 7):
        super().__init__()
        if conv_kernel % 2 == 0:
            raise ValueError(f"conv_kernel must be odd, got {conv_kernel}")
        self.ff1 = self._feed_forward(d_model, ff_dim)
        self.attn_norm = nn.LayerNorm(d_model)
        self.attn = nn.MultiheadAttention(d_model, num_heads, batch_first=True)
        self.conv_norm = nn.LayerNorm(d_model)
        self.conv = nn.Sequential(
            nn.Conv1d(d_model, 2 * d_model, 1),
            nn.GLU(dim=1),
            nn.Conv1d(d_model, d_model, conv_kernel, padding=conv_kernel // 2, groups=d_model),
            nn.SiLU(),
            nn.Conv1d(d_model, d_model, 1),
        )
        self.ff2 = self._feed_forward(d_model, ff_dim)
        self.final_norm = nn.LayerNorm(d_model)

    @staticmethod
    def _feed_forward(d_model: int, ff_dim: int) -> nn.Sequential:
        return nn.Sequential(
            nn.LayerNorm(d_model), nn.Linear(d_model, ff_dim), nn.SiLU(), nn.Linear(ff_dim, d_model)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + 0.5 * self.ff1(x)
        a = self.attn_norm(x)
        x = x + self.attn(a, a, a, need_weights=False)[0]
        c = self.conv_norm(x).transpose(1, 2)
        x = x + self.conv(c).transpose(1, 2)
        x = x + 0.5 * self.ff2(x)
        return self.final_norm(x)


class ConformerDecoder(_TwoStageDecoder):
    def __init__(
        self,
        input_dim: int,
        d_model: int = 256,
        num_heads: int = 2,
        ff_dim: int = 1024,
        blocks_per_stage: int = 2,
        conv_kernel: int = 7,
    ):
        super().__init__(input_dim, d_model)
        self.time_blocks = nn.ModuleList(
            ConformerBlock(d_model, num_heads, ff_dim, conv_kernel) for _ in range(blocks_per_stage)
        )
        # Kernel 1 on the speaker axis: speakers are unordered, so the conv
        # module must stay pointwise there to preserve permutation symmetry.
        self.speaker_blocks = nn.ModuleList(
            ConformerBlock(d_model, num_heads, ff_dim, conv_kernel=1) for _ in range(blocks_per_stage)
        )

    def _stages(self, x):
        x = _time_stage(self.time_blocks, x)
        return _speaker_stage(self.speaker_blocks, x)


class CrossAttentionDecoder(nn.Module):
    """Visual queries -> speaker-set cross-attention -> audio cross-attention.

    Pre-norm residual blocks keep the residual stream untouched by the
    attention branches, so a zero-contribution branch passes its input
    through exactly.
    """

    def __init__(
        self,
        visual_dim: int,
        audio_dim: int,
        d_model: int = 256,
        num_heads: int = 2,
    ):
        super().__init__()
        self.visual_proj = nn.Linear(visual_dim, d_model)
        self.pos = SinusoidalPositionalEncoding(d_model)
        self.audio_pos = SinusoidalPositionalEncoding(audio_dim)
        self.speaker_norm = nn.LayerNorm(d_model)
        self.speaker_attn = nn.MultiheadAttention(
            d_model, num_heads, kdim=audio_dim, vdim=audio_dim, batch_first=True
        )
        self.audio_norm = nn.LayerNorm(d_model)
        self.audio_attn = nn.MultiheadAttention(
            d_model, num_heads, kdim=audio_dim, vdim=audio_dim, batch_first=True
        )
        self.head = nn.Linear(d_model, 1)

    def speaker_stage(self, x: torch.Tensor, es: torch.Tensor) -> torch.Tensor:
        """Each (frame, speaker) query attends over the speaker embedding set."""
        b, t, n, d = x.shape
        q = self.speaker_norm(x).reshape(b * t, n, d)
        kv = es.unsqueeze(1).expand(b, t, n, es.shape[-1]).reshape(b * t, n, -1)
        out, _ = self.speaker_attn(q, kv, kv, need_weights=False)
        return x + out.reshape(b, t, n, d)

    def audio_stage(self, x: torch.Tensor, ea: torch.Tensor) -> torch.Tensor:
        """Each speaker's frame queries attend over the audio sequence.

        Time positions are added to the keys only; values stay raw audio so
        that zeroed audio contributes exactly nothing.
        """
        b, t, n, d = x.shape
        q = self.audio_norm(x).permute(0, 2, 1, 3).reshape(b * n, t, d)
        keys = (ea + self.audio_pos(t).unsqueeze(0)).unsqueeze(1)
        keys = keys.expand(b, n, t, ea.shape[-1]).reshape(b * n, t, -1)
        values = ea.unsqueeze(1).expand(b, n, t, ea.shape[-1]).reshape(b * n, t, -1)
        out, _ = self.audio_attn(q, keys, values, need_weights=False)
        return x + out.reshape(b, n, t, d).permute(0, 2, 1, 3)

    def forward(self, visual_emb: torch.Tensor, speaker_embs: torch.Tensor, audio_emb: torch.Tensor) -> torch.Tensor:
        """(T, N, D_V), (N, D_A), (T, D_A) -> (T, N) probabilities (batch ok)."""
        squeeze = visual_emb.dim() == 3
        ev = visual_emb.unsqueeze(0) if squeeze else visual_emb
        es = speaker_embs.unsqueeze(0) if squeeze else speaker_embs
        ea = audio_emb.unsqueeze(0) if squeeze else audio_emb
        x = self.visual_proj(ev) + self.pos(ev.shape[1])[None, :, None, :]
        x = self.speaker_stage(x, es)
        x = self.audio_stage(x, ea)
        probs = torch.sigmoid(self.head(x)[..., 0]).clamp(1e-7, 1 - 1e-7)
        return probs.squeeze(0) if squeeze else probs


class BlstmDecoder(_TwoStageDecoder):
    """Bidirectional recurrence along time per speaker.

    One LSTM cell per layer is shared by both directions and the direction
    outputs are summed, so reversing the input time axis reverses the output
    rows bit-exactly.
    """

    def __init__(self, input_dim: int, d_model: int = 64, num_layers: int = 2):
        super().__init__(input_dim, d_model, use_time_pe=False)
        self.layers = nn.ModuleList(
            nn.LSTM(d_model, d_model, batch_first=True) for _ in range(num_layers)
        )

    def _stages(self, x):
        b, t, n, d = x.shape
        y = x.permute(0, 2, 1, 3).reshape(b * n, t, d)
        for lstm in self.layers:
            fwd, _ = lstm(y)
            bwd, _ = lstm(y.flip(1))
            y = fwd + bwd.flip(1)
        return y.reshape(b, n, t, d).permute(0, 2, 1, 3)


DECODER_KINDS = ("transformer", "conformer", "cross_attention", "blstm")


def build_decoder(
    kind: str,
    visual_dim: int,
    audio_dim: int,
    d_model: int = 256,
    num_heads: int = 2,
    ff_dim: int = 1024,
    blocks_per_stage: int = 2,
    conv_kernel: int = 7,
    lstm_layers: int = 2,
) -> nn.Module:
    """Instantiate a decoder by kind; fusion width is D_V + 2*D_A."""
    input_dim = visual_dim + 2 * audio_dim
    if kind == "transformer":
        return TransformerDecoder(input_dim, d_model, num_heads, ff_dim, blocks_per_stage)
    if kind == "conformer":
        return ConformerDecoder(input_dim, d_model, num_heads, ff_dim, blocks_per_stage, conv_kernel)
    if kind == "cross_attention":
        return CrossAttentionDecoder(visual_dim, audio_dim, d_model, num_heads)
    if kind == "blstm":
        return BlstmDecoder(input_dim, d_model, lstm_layers)
    raise ValueError(f"unknown decoder kind {kind!r}; choose one of: {', '.join(DECODER_KINDS)}")


def decode(decoder: nn.Module, visual_emb: torch.Tensor, audio_emb: torch.Tensor, speaker_embs: torch.Tensor) -> torch.Tensor:
    """Run any decoder kind on the three embedding streams."""
    if isinstance(decoder, CrossAttentionDecoder):
        return decoder(visual_emb, speaker_embs, audio_emb)
    return decoder(fuse_embeddings(visual_emb, audio_emb, speaker_embs))
