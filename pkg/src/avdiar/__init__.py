"""Desk-scale audio-visual speaker diarization.

Lip, audio, and speaker encoders feed fused embeddings into interchangeable
per-speaker activity decoders; training follows a freeze-then-joint schedule
and evaluation uses frame-based DER over RTTM segment lists. Synthetic
multi-speaker scenarios make the whole pipeline verifiable end to end
without external datasets or pre-trained checkpoints.
"""

from .decoders import (
    BlstmDecoder,
    ConformerDecoder,
    CrossAttentionDecoder,
    DECODER_KINDS,
    TransformerDecoder,
    build_decoder,
    decode,
    fuse_embeddings,
)
from .encoders import (
    AudioEncoder,
    EncoderBundle,
    LipEncoder,
    LipRoiSequence,
    PrecomputedEmbeddings,
    SpeakerEmbedding,
    SpeakerEncoder,
    VisualVadHead,
    create_audio_encoder,
    estimate_non_overlapped_segments,
    extract_speaker_embedding,
    frame_level_pooling,
    lip_encode,
    visual_vad,
)
from .metrics import DerBreakdown, compute_der, optimal_speaker_mapping
from .rttm import (
    ActivityMatrix,
    RttmParseError,
    Segment,
    activity_to_segments,
    parse_rttm,
    segments_to_activity,
    write_rttm,
)
from .synthdata import ScenarioBundle, ScenarioConfig, generate_scenario, make_split
from .training import (
    TrainConfig,
    TrainState,
    diarization_loss,
    evaluate_scenarios,
    median_smooth,
    pretrain_lip_encoder,
    pretrain_speaker_encoder,
    run_inference,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "ActivityMatrix",
    "AudioEncoder",
    "BlstmDecoder",
    "ConformerDecoder",
    "CrossAttentionDecoder",
    "DECODER_KINDS",
    "DerBreakdown",
    "EncoderBundle",
    "LipEncoder",
    "LipRoiSequence",
    "PrecomputedEmbeddings",
    "RttmParseError",
    "ScenarioBundle",
    "ScenarioConfig",
    "Segment",
    "SpeakerEmbedding",
    "SpeakerEncoder",
    "TrainConfig",
    "TrainState",
    "TransformerDecoder",
    "VisualVadHead",
    "activity_to_segments",
    "build_decoder",
    "compute_der",
    "create_audio_encoder",
    "decode",
    "diarization_loss",
    "estimate_non_overlapped_segments",
    "evaluate_scenarios",
    "extract_speaker_embedding",
    "frame_level_pooling",
    "fuse_embeddings",
    "generate_scenario",
    "lip_encode",
    "make_split",
    "median_smooth",
    "optimal_speaker_mapping",
    "parse_rttm",
    "pretrain_lip_encoder",
    "pretrain_speaker_encoder",
    "run_inference",
    "segments_to_activity",
    "train",
    "visual_vad",
    "write_rttm",
]
