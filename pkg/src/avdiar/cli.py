"""Command-line entry point: gen-data, train, infer, score, plot.

One flat JSON config file fully determines an experiment; CLI flags
override individual keys. Errors print a single machine-parseable
``error: <reason>`` line and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decoders import build_decoder
from .encoders import EncoderBundle, LipEncoder, SpeakerEncoder, VisualVadHead, create_audio_encoder
from .metrics import (
    DerBreakdown,
    breakdown_from_counts,
    frame_error_counts,
    optimal_speaker_mapping,
)
from .rttm import RttmParseError, parse_rttm, segments_to_activity, write_rttm
from .synthdata import ScenarioConfig, load_scenario, make_split, save_scenario
from .tensorio import read_json, write_json
from .training import (
    TrainConfig,
    TrainState,
    load_checkpoint,
    pretrain_lip_encoder,
    pretrain_speaker_encoder,
    run_inference,
    save_checkpoint,
    train,
)


@dataclass
class ExperimentConfig:
    """Flat union of scenario, split, training, and architecture settings."""

    # scenario generation
    num_speakers: int = 3
    duration: float = 60.0
    frame_rate: float = 100.0
    visual_frame_rate: float = 25.0
    overlap_ratio: float = 0.2
    noise_level: float = 0.1
    feature_dim: int = 80
    roi_size: int = 16
    mean_speech_run: float = 2.0
    # split layout
    train_count: int = 40
    dev_count: int = 10
    test_count: int = 10
    train_seed_start: int = 1000
    dev_seed_start: int = 2000
    test_seed_start: int = 3000
    # joint training (schedule per the freeze/unfreeze regime)
    learning_rate: float = 1e-4
    freeze_epochs: int = 5
    joint_epochs: int = 10
    batch_size: int = 4
    chunk_len: int = 1000
    decoder_kind: str = "transformer"
    aam_margin: float = 0.2
    aam_scale: float = 32.0
    seed: int = 0
    ae_joint: bool = True
    se_joint: bool = False
    lip_joint: bool = False
    median_window: int = 11
    threshold: float = 0.5
    embedding_source: str = "oracle"
    # encoder pre-training
    lip_pretrain_epochs: int = 3
    lip_pretrain_scenarios: int = 16
    speaker_pretrain_epochs: int = 8
    pretrain_learning_rate: float = 1e-3
    # architecture (desk scale; the module defaults carry the full-size dims)
    visual_dim: int = 32
    bottleneck_dim: int = 32
    hidden_dim: int = 64
    d_model: int = 64
    num_heads: int = 2
    ff_dim: int = 128
    blocks_per_stage: int = 2
    audio_backbone: str = "toy_conv"
    audio_manifest: str = ""

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_dict(read_json(path))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def scenario_config(self, seed: int = 0) -> ScenarioConfig:
        return ScenarioConfig(
            num_speakers=self.num_speakers,
            duration=self.duration,
            frame_rate=self.frame_rate,
            visual_frame_rate=self.visual_frame_rate,
            overlap_ratio=self.overlap_ratio,
            noise_level=self.noise_level,
            seed=seed,
            feature_dim=self.feature_dim,
            roi_size=self.roi_size,
            mean_speech_run=self.mean_speech_run,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            freeze_epochs=self.freeze_epochs,
            joint_epochs=self.joint_epochs,
            batch_size=self.batch_size,
            chunk_len=self.chunk_len,
            decoder_kind=self.decoder_kind,
            aam_margin=self.aam_margin,
            aam_scale=self.aam_scale,
            seed=self.seed,
            ae_joint=self.ae_joint,
            se_joint=self.se_joint,
            lip_joint=self.lip_joint,
            median_window=self.median_window,
            threshold=self.threshold,
            embedding_source=self.embedding_source,
        )


def build_bundle(cfg: ExperimentConfig) -> EncoderBundle:
    import torch

    torch.manual_seed(cfg.seed)
    lip = LipEncoder(roi_size=cfg.roi_size, emb_dim=cfg.visual_dim, hidden_dim=cfg.hidden_dim)
    vad = VisualVadHead(cfg.visual_dim)
    if cfg.audio_backbone == "precomputed":
        audio = create_audio_encoder("precomputed", manifest_path=cfg.audio_manifest)
    else:
        audio = create_audio_encoder(
            cfg.audio_backbone,
            feature_dim=cfg.feature_dim,
            hidden_dim=cfg.hidden_dim,
            bottleneck_dim=cfg.bottleneck_dim,
        )
    speaker = SpeakerEncoder(
        feature_dim=cfg.feature_dim, hidden_dim=cfg.hidden_dim, bottleneck_dim=cfg.bottleneck_dim
    )
    return EncoderBundle(lip, vad, audio, speaker)


def build_experiment_decoder(cfg: ExperimentConfig):
    import torch

    torch.manual_seed(cfg.seed + 1)
    return build_decoder(
        cfg.decoder_kind,
        visual_dim=cfg.visual_dim,
        audio_dim=2 * cfg.bottleneck_dim,
        d_model=cfg.d_model,
        num_heads=cfg.num_heads,
        ff_dim=cfg.ff_dim,
        blocks_per_stage=cfg.blocks_per_stage,
    )


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "decoder_kind", None):
        cfg = dataclasses.replace(cfg, decoder_kind=args.decoder_kind)
    if getattr(args, "embedding_source", None):
        cfg = dataclasses.replace(cfg, embedding_source=args.embedding_source)
    cfg.train_config()  # validate eagerly so bad configs fail before any work
    return cfg


def _prepare_out_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ValueError(f"output directory {path} exists and is not empty (use --force)")
        for child in sorted(path.rglob("*"), reverse=True):
            child.unlink() if child.is_file() else child.rmdir()
    path.mkdir(parents=True, exist_ok=True)


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    splits = make_split(
        cfg.scenario_config(),
        counts=(cfg.train_count, cfg.dev_count, cfg.test_count),
        seed_starts=(
            cfg.train_seed_start + cfg.seed,
            cfg.dev_seed_start + cfg.seed,
            cfg.test_seed_start + cfg.seed,
        ),
    )
    manifest: dict[str, list[str]] = {}
    for split, bundles in splits.items():
        manifest[split] = []
        for bundle in bundles:
            rel = f"{split}/{bundle.recording_id}"
            save_scenario(out / rel, bundle)
            manifest[split].append(rel)
    write_json(out / "manifest.json", {"splits": manifest, "config": cfg.to_dict()})
    total = sum(len(v) for v in manifest.values())
    print(f"wrote {total} scenarios to {out}")
    return 0


def load_split(data_dir, split: str):
    data_dir = Path(data_dir)
    manifest = read_json(data_dir / "manifest.json")
    if split not in manifest["splits"]:
        raise ValueError(f"split {split!r} not in manifest (has: {', '.join(manifest['splits'])})")
    return [load_scenario(data_dir / rel) for rel in manifest["splits"][split]]


def cmd_train(args) -> int:
    out = Path(args.out)
    if args.resume:
        meta = read_json(out / "meta.json")
        cfg = ExperimentConfig.from_dict(meta["config"])
        if getattr(args, "seed", None) is not None:
            raise ValueError("--seed cannot be changed when resuming")
        bundle = build_bundle(cfg)
        decoder = build_experiment_decoder(cfg)
        state = load_checkpoint(out, bundle, decoder)
    else:
        cfg = _load_config(args)
        _prepare_out_dir(out, args.force)
        bundle = build_bundle(cfg)
        decoder = build_experiment_decoder(cfg)
        state = TrainState()
    train_scen = load_split(args.data, "train")
    tc = cfg.train_config()
    if not args.resume:
        pretrain_lip_encoder(
            bundle.lip_encoder,
            bundle.vad_head,
            train_scen[: cfg.lip_pretrain_scenarios],
            epochs=cfg.lip_pretrain_epochs,
            learning_rate=cfg.pretrain_learning_rate,
            seed=cfg.seed,
        )
        pretrain_speaker_encoder(
            train_scen,
            tc,
            encoder=bundle.speaker_encoder,
            epochs=cfg.speaker_pretrain_epochs,
            learning_rate=cfg.pretrain_learning_rate,
        )
    state = train(bundle, decoder, train_scen, tc, state=state)
    save_checkpoint(out, cfg.to_dict(), state, bundle, decoder)
    loss_lines = [f"{i + 1} {loss:.6f}" for i, loss in enumerate(state.loss_history)]
    (out / "loss_curve.txt").write_text("\n".join(loss_lines) + "\n", encoding="utf-8")
    print(f"trained {state.epoch} epochs; checkpoint at {out}")
    return 0


def cmd_infer(args) -> int:
    ckpt = Path(args.checkpoint)
    meta = read_json(ckpt / "meta.json")
    cfg = ExperimentConfig.from_dict(meta["config"])
    if args.embedding_source:
        cfg = dataclasses.replace(cfg, embedding_source=args.embedding_source)
    bundle = build_bundle(cfg)
    decoder = build_experiment_decoder(cfg)
    load_checkpoint(ckpt, bundle, decoder)
    scenarios = load_split(args.data, args.split)
    segments = []
    tc = cfg.train_config()
    for scenario in scenarios:
        segments.extend(run_inference(bundle, decoder, scenario, tc))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(write_rttm(segments), encoding="utf-8")
    print(f"wrote {len(segments)} segments to {out}")
    return 0


def _first_appearance_order(segments) -> dict[str, list[str]]:
    order: dict[str, list[str]] = {}
    for seg in segments:
        speakers = order.setdefault(seg.recording_id, [])
        if seg.speaker_id not in speakers:
            speakers.append(seg.speaker_id)
    return order


def score_rttm(ref_text: str, hyp_text: str, frame_rate: float = 100.0) -> DerBreakdown:
    """Pooled frame-based DER between two RTTM documents.

    Counts are accumulated per recording (with an optimal speaker map each)
    and pooled; for a single recording this equals ``compute_der`` exactly.
    """
    ref_segs = parse_rttm(ref_text)
    hyp_segs = parse_rttm(hyp_text)
    ref_order = _first_appearance_order(ref_segs)
    hyp_order = _first_appearance_order(hyp_segs)
    recordings = sorted(set(ref_order) | set(hyp_order))
    if not recordings:
        raise ValueError("no SPEAKER segments in either RTTM input")
    totals = np.zeros(4, dtype=np.int64)
    merged_mapping: dict[str, str] = {}
    for rec in recordings:
        rsegs = [s for s in ref_segs if s.recording_id == rec]
        hsegs = [s for s in hyp_segs if s.recording_id == rec]
        end = max([s.end for s in rsegs + hsegs], default=0.0)
        n_frames = int(math.ceil(end * frame_rate - 1e-9))
        ref = segments_to_activity(rsegs, frame_rate, n_frames, ref_order.get(rec, []))
        hyp = segments_to_activity(hsegs, frame_rate, n_frames, hyp_order.get(rec, []))
        mapping = optimal_speaker_mapping(ref, hyp)
        counts = frame_error_counts(ref, hyp, mapping)
        totals += np.array(counts, dtype=np.int64)
        prefix = "" if len(recordings) == 1 else f"{rec}:"
        merged_mapping.update({f"{prefix}{h}": f"{prefix}{r}" for h, r in mapping.items()})
    from .metrics import FrameErrorCounts

    return breakdown_from_counts(FrameErrorCounts(*totals.tolist()), merged_mapping)


def cmd_score(args) -> int:
    ref_text = Path(args.ref).read_text(encoding="utf-8")
    hyp_text = Path(args.hyp).read_text(encoding="utf-8")
    result = score_rttm(ref_text, hyp_text, frame_rate=args.frame_rate)
    print(
        f"MISS {result.miss:.2f} FA {result.fa:.2f} "
        f"SPKERR {result.spkerr:.2f} DER {result.der:.2f}"
    )
    return 0


def cmd_plot(args) -> int:
    from .viz import timeline_plot

    ref_segs = parse_rttm(Path(args.ref).read_text(encoding="utf-8"))
    hyp_segs = parse_rttm(Path(args.hyp).read_text(encoding="utf-8"))
    if not ref_segs:
        raise ValueError("reference RTTM contains no SPEAKER segments")
    recs = sorted({s.recording_id for s in ref_segs + hyp_segs})
    if len(recs) > 1:
        raise ValueError(f"plot expects a single recording, found: {', '.join(recs)}")
    fr = args.frame_rate
    end = max(s.end for s in ref_segs + hyp_segs)
    n_frames = int(math.ceil(end * fr - 1e-9))
    ref_order = _first_appearance_order(ref_segs).get(recs[0], [])
    hyp_order = _first_appearance_order(hyp_segs).get(recs[0], [])
    ref = segments_to_activity(ref_segs, fr, n_frames, ref_order)
    hyp = segments_to_activity(hyp_segs, fr, n_frames, hyp_order) if hyp_segs else None
    diff = timeline_plot(ref, hyp, args.out, title=recs[0])
    print(f"wrote {args.out} ({int(diff.sum())} disagreement frames)")
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat JSON experiment config")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--force", action="store_true", help="overwrite existing output")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avdiar", description="audio-visual speaker diarization experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic train/dev/test split")
    _add_common(p)
    p.add_argument("--out", required=True, help="dataset output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="pre-train encoders and run joint training")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.add_argument("--decoder-kind", dest="decoder_kind", help="transformer|conformer|cross_attention|blstm")
    p.add_argument("--resume", action="store_true", help="continue training from --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="decode a split to an RTTM file")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True, help="output RTTM path")
    p.add_argument("--embedding-source", dest="embedding_source", choices=("oracle", "visual"))
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("score", help="frame-based DER between two RTTM files")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--frame-rate", dest="frame_rate", type=float, default=100.0)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("plot", help="timeline plot of reference vs hypothesis")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--out", required=True, help="output image path")
    p.add_argument("--frame-rate", dest="frame_rate", type=float, default=100.0)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, RttmParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
