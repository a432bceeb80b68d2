"""Command-line pipeline: data generation, staged training, inference,
evaluation, and attention export.

Stages write checkpoints into a shared directory and validate their inputs
before creating any output file. Every run is deterministic given the
resolved config (which every checkpoint echoes). EM_LOG={error|info|debug}
controls verbosity.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import Config, config_from_text, resolve_config
from .errors import ConfigurationError, DimensionError, StageDependencyError
from .fileio import (
    Checkpoint,
    manifest_record,
    params_to_tensors,
    parse_manifest,
    read_checkpoint,
    read_tensor_file,
    write_checkpoint,
    write_tensor_file,
)
from .mam import MamModel, MamTrainConfig, SpeechFeatures, alignment_diagnostics, train_mam
from .masked_transformer import (
    SEED_FRAMES,
    GenerationStack,
    MaskedTrainConfig,
    StudentConfig,
    TeacherState,
    infer,
    infer_long,
    masked_token_accuracy,
    teacher_scores,
    train_masked,
)
from .metrics import MetricReport, beat_consistency, div, lvd, toy_fgd, vertex_mse
from .numerics import RngState
from .rvq import Codebook, MotionSequence, RvqModel, RvqTrainConfig, train_rvq
from .sqa import export_attention
from .synth import CorpusSpec, GestureEvent, SynthSample, corpus_stats, event_labels, generate

logger = logging.getLogger("speechmask")

# distinct RNG streams per pipeline stage
_STREAM_DATA, _STREAM_RVQ, _STREAM_MAM, _STREAM_MASK, _STREAM_EVAL = 1, 2, 3, 4, 9


def setup_logging() -> None:
    level = os.environ.get("EM_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigurationError(f"EM_LOG must be one of {tuple(levels)}, got '{level}'")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def corpus_spec(cfg: Config) -> CorpusSpec:
    return CorpusSpec(
        num_sequences=cfg.num_sequences, frames=cfg.frames, layout=cfg.layout,
        fps=cfg.fps, event_rate=cfg.event_rate, noise_level=cfg.noise_level,
        feature_dim_low=cfg.feature_dim_low, feature_dim_high=cfg.feature_dim_high)


def rvq_train_config(cfg: Config) -> RvqTrainConfig:
    return RvqTrainConfig(
        dim=cfg.latent_dim, hidden=cfg.encoder_hidden, entries=cfg.codebook_entries,
        layers=cfg.codebook_layers, epochs=cfg.rvq_epochs, batch_size=cfg.batch_size,
        lr=cfg.rvq_lr, betas=cfg.betas, commitment_weight=cfg.commitment_weight,
        codebook_decay=cfg.codebook_decay, quantizer_dropout=cfg.quantizer_dropout,
        dead_code_batches=cfg.dead_code_batches)


def mam_train_config(cfg: Config) -> MamTrainConfig:
    return MamTrainConfig(
        d_q=cfg.embed_dim, heads=cfg.mam_heads, shared_blocks=cfg.shared_blocks,
        ff_mult=cfg.ff_mult, temperature=cfg.temperature, epochs=cfg.mam_epochs,
        batch_size=cfg.mam_batch_size, lr=cfg.mam_lr, betas=cfg.betas)


def masked_train_config(cfg: Config) -> MaskedTrainConfig:
    student = StudentConfig(width=cfg.model_width, blocks=cfg.model_blocks,
                            heads=cfg.model_heads, ff_mult=cfg.ff_mult,
                            score_dim=cfg.score_dim)
    return MaskedTrainConfig(student=student, epochs=cfg.epochs,
                             batch_size=cfg.batch_size, lr=cfg.lr, betas=cfg.betas,
                             semantic_weight=cfg.semantic_weight, ema_decay=cfg.ema_decay)


def split_corpus(samples: list[SynthSample], cfg: Config):
    held = max(1, int(round(cfg.holdout_fraction * len(samples))))
    if held >= len(samples):
        raise ConfigurationError("holdout fraction leaves no training data")
    return samples[:-held], samples[-held:]


# ---------------------------------------------------------------------------
# corpus persistence
# ---------------------------------------------------------------------------

def save_corpus(samples: list[SynthSample], cfg: Config, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, sample in enumerate(samples):
        motion_name = f"sample{i:05d}.motion.emtf"
        feat_name = f"sample{i:05d}.features.emtf"
        write_tensor_file(out_dir / motion_name, sample.motion.frames)
        write_tensor_file(out_dir / feat_name,
                          np.concatenate([sample.features.low, sample.features.high], axis=1))
        lines.append(manifest_record(i, motion_name, feat_name, sample.seed, sample.events))
    (out_dir / "manifest.jsonl").write_text("\n".join(lines) + "\n")


def load_corpus(data_dir: Path, cfg: Config) -> list[SynthSample]:
    manifest = data_dir / "manifest.jsonl"
    if not manifest.exists():
        raise StageDependencyError("gen-data", str(manifest))
    samples = []
    for record in parse_manifest(manifest.read_text()):
        frames = read_tensor_file(data_dir / record["motion"])
        features = read_tensor_file(data_dir / record["features"])
        if features.shape[1] != cfg.feature_dim_low + cfg.feature_dim_high:
            raise DimensionError(
                f"feature file width {features.shape[1]} != configured "
                f"{cfg.feature_dim_low}+{cfg.feature_dim_high}")
        events = [GestureEvent(e["onset"], e["duration"], e["part"], e["amplitude"],
                               e["shape"]) for e in record["events"]]
        samples.append(SynthSample(
            motion=MotionSequence(frames, cfg.layout, cfg.fps),
            features=SpeechFeatures(features[:, :cfg.feature_dim_low],
                                    features[:, cfg.feature_dim_low:]),
            labels=event_labels(events, frames.shape[0]),
            events=events,
            seed=record["seed"]))
    return samples


# ---------------------------------------------------------------------------
# checkpoint helpers
# ---------------------------------------------------------------------------

def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageDependencyError(stage, str(path))
    return path


def save_rvq(model: RvqModel, cfg: Config, rng: RngState, path: Path) -> None:
    tensors = params_to_tensors(model.params)
    for i, table in enumerate(model.codebook.layers):
        tensors[f"codebook.{i}"] = table
    write_checkpoint(path, tensors, cfg.to_text(), rng)


def load_rvq(ckpt_dir: Path) -> tuple[RvqModel, Config]:
    ckpt = read_checkpoint(_require(ckpt_dir / "rvq.emck", "train-rvq"))
    cfg = config_from_text(ckpt.config_text)
    layers = [ckpt.tensors[f"codebook.{i}"] for i in range(cfg.codebook_layers)]
    params = Checkpoint({k: v for k, v in ckpt.tensors.items()
                         if not k.startswith("codebook.")},
                        ckpt.config_text, ckpt.rng).to_param_set()
    return RvqModel(params, Codebook(layers), cfg.layout, cfg.encoder_hidden, cfg.fps), cfg


def save_mam(model: MamModel, cfg: Config, rng: RngState, path: Path) -> None:
    write_checkpoint(path, params_to_tensors(model.params), cfg.to_text(), rng)


def load_mam(ckpt_dir: Path) -> MamModel:
    ckpt = read_checkpoint(_require(ckpt_dir / "mam.emck", "train-mam"))
    cfg = config_from_text(ckpt.config_text)
    return MamModel(ckpt.to_param_set(), cfg.frames // SEED_FRAMES, cfg.embed_dim,
                    cfg.mam_heads, cfg.shared_blocks)


def mask_ckpt_name(strategy: str) -> str:
    return f"mask_{strategy}.emck"


def save_mask(student, teacher: TeacherState, cfg: Config, rng: RngState, path: Path) -> None:
    tensors = params_to_tensors(student)
    tensors.update(params_to_tensors(teacher.params, prefix="teacher/"))
    write_checkpoint(path, tensors, cfg.to_text(), rng)


def load_mask(ckpt_dir: Path, strategy: str):
    ckpt = read_checkpoint(_require(ckpt_dir / mask_ckpt_name(strategy), "train-mask"))
    cfg = config_from_text(ckpt.config_text)
    student = Checkpoint({k: v for k, v in ckpt.tensors.items()
                          if not k.startswith("teacher/")},
                         ckpt.config_text, ckpt.rng).to_param_set()
    teacher = TeacherState(ckpt.to_param_set(prefix="teacher/"), cfg.ema_decay)
    return student, teacher, cfg


def load_stack(ckpt_dir: Path, strategy: str) -> tuple[GenerationStack, TeacherState, Config]:
    tokenizer, _ = load_rvq(ckpt_dir)
    mam = load_mam(ckpt_dir)
    student, teacher, cfg = load_mask(ckpt_dir, strategy)
    return GenerationStack(tokenizer, mam, student, masked_train_config(cfg).student), teacher, cfg


def write_curve_csv(path: Path, curve: list[dict]) -> None:
    if not curve:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(curve[0]))
        writer.writeheader()
        writer.writerows(curve)


# ---------------------------------------------------------------------------
# stage implementations
# ---------------------------------------------------------------------------

def run_gen_data(cfg: Config, out_dir: Path) -> None:
    samples = generate(corpus_spec(cfg), RngState(cfg.seed).split(_STREAM_DATA))
    save_corpus(samples, cfg, out_dir)
    stats = corpus_stats(samples)
    logger.info("wrote %d sequences to %s (event density %.3f/s, median velocity %.4f)",
                len(samples), out_dir, stats.event_density, stats.velocity_median)


def run_train_rvq(cfg: Config, data_dir: Path, ckpt_dir: Path) -> None:
    samples = load_corpus(data_dir, cfg)
    train, _ = split_corpus(samples, cfg)
    model, curve = train_rvq([s.motion for s in train], rvq_train_config(cfg),
                             RngState(cfg.seed).split(_STREAM_RVQ))
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    save_rvq(model, cfg, RngState(cfg.seed, _STREAM_RVQ), ckpt_dir / "rvq.emck")
    write_curve_csv(ckpt_dir / "rvq_loss.csv", curve)
    logger.info("tokenizer trained: final loss %.5f", curve[-1]["loss"])


def run_train_mam(cfg: Config, data_dir: Path, ckpt_dir: Path) -> None:
    samples = load_corpus(data_dir, cfg)
    tokenizer, _ = load_rvq(ckpt_dir)
    train, held = split_corpus(samples, cfg)
    model, curve = train_mam(train, tokenizer, mam_train_config(cfg),
                             RngState(cfg.seed).split(_STREAM_MAM))
    save_mam(model, cfg, RngState(cfg.seed, _STREAM_MAM), ckpt_dir / "mam.emck")
    write_curve_csv(ckpt_dir / "mam_loss.csv", curve)
    diag = alignment_diagnostics(model, held, tokenizer, cfg.temperature)
    logger.info("alignment trained: loss %.4f, retrieval top-1 %.3f, positive cosine %.3f",
                curve[-1]["loss"], diag["retrieval_top1"], diag["positive_cosine"])


def run_train_mask(cfg: Config, data_dir: Path, ckpt_dir: Path) -> None:
    samples = load_corpus(data_dir, cfg)
    tokenizer, _ = load_rvq(ckpt_dir)
    mam = load_mam(ckpt_dir)
    train, _ = split_corpus(samples, cfg)
    student, teacher, curve = train_masked(
        train, tokenizer, mam, cfg.schedule(), masked_train_config(cfg),
        RngState(cfg.seed).split(_STREAM_MASK), strategy=cfg.strategy)
    save_mask(student, teacher, cfg, RngState(cfg.seed, _STREAM_MASK),
              ckpt_dir / mask_ckpt_name(cfg.strategy))
    write_curve_csv(ckpt_dir / f"mask_{cfg.strategy}_loss.csv", curve)
    logger.info("student trained (%s): CE %.4f, semantic %.4f",
                cfg.strategy, curve[-1]["ce"], curve[-1]["semantic"])


def run_infer(cfg: Config, ckpt_dir: Path, features_path: Path, seed_path: Path,
              out_path: Path, frames: int | None, steps: int) -> None:
    stack, _, _ = load_stack(ckpt_dir, cfg.strategy)
    raw = read_tensor_file(features_path)
    if raw.shape[1] != cfg.feature_dim_low + cfg.feature_dim_high:
        raise DimensionError(
            f"feature file width {raw.shape[1]} != configured "
            f"{cfg.feature_dim_low}+{cfg.feature_dim_high}")
    features = SpeechFeatures(raw[:, :cfg.feature_dim_low], raw[:, cfg.feature_dim_low:])
    seed = read_tensor_file(seed_path)
    target = frames if frames is not None else stack.clip_frames
    if target <= stack.clip_frames:
        motion = infer(features, seed, stack, steps)
        result = motion.frames[:target]
    else:
        result = infer_long(features, seed, stack, target, steps).frames
    write_tensor_file(out_path, result)
    logger.info("wrote %d generated frames to %s", result.shape[0], out_path)


def run_eval(cfg: Config, data_dir: Path, ckpt_dir: Path, steps: int) -> MetricReport:
    samples = load_corpus(data_dir, cfg)
    stack, _, _ = load_stack(ckpt_dir, cfg.strategy)
    _, held = split_corpus(samples, cfg)

    accuracy = masked_token_accuracy(
        held, stack.tokenizer, stack.mam, stack.student, stack.student_cfg,
        cfg.mask_ratio, RngState(cfg.seed).split(_STREAM_EVAL),
        repeats=cfg.eval_mask_repeats)

    generated = [infer(s.features, s.motion.frames[:SEED_FRAMES], stack, steps)
                 for s in held]
    reference = [s.motion for s in held]
    bc_scores = [beat_consistency(g, [e.onset / cfg.fps for e in s.events], cfg.beat_sigma)
                 for g, s in zip(generated, held)]
    report = MetricReport(
        fgd=toy_fgd(generated, reference, stack.tokenizer.encode),
        bc=float(np.mean(bc_scores)),
        div=div(generated),
        mse=float(np.mean([vertex_mse(g, r) for g, r in zip(generated, reference)])),
        lvd=float(np.mean([lvd(g, r) for g, r in zip(generated, reference)])),
        n_generated=len(generated),
        n_reference=len(reference),
        config_echo={"strategy": cfg.strategy, "seed": cfg.seed, "steps": steps,
                     "masked_token_accuracy": accuracy},
    )
    print(report.machine_line())
    print(report.table())
    print(f"masked-token accuracy ({cfg.strategy}): {accuracy:.4f}")
    return report


def run_export_attn(cfg: Config, data_dir: Path, ckpt_dir: Path, sample_id: int,
                    out_path: Path) -> None:
    samples = load_corpus(data_dir, cfg)
    if not 0 <= sample_id < len(samples):
        raise ConfigurationError(f"sample id {sample_id} outside corpus of {len(samples)}")
    stack, teacher, _ = load_stack(ckpt_dir, cfg.strategy)
    sample = samples[sample_id]
    grid = stack.tokenizer.tokenize(sample.motion)
    queries = stack.mam.aligned_queries(sample.features)
    amap = teacher_scores(grid.quantized, queries, teacher, stack.student_cfg)
    written = export_attention(amap, out_path)
    logger.info("wrote attention maps: %s", ", ".join(str(p) for p in written))


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key=value config file")
    parser.add_argument("--seed", type=int, help="root RNG seed")
    parser.add_argument("--profile", choices=("toy", "paper"), help="config profile")
    parser.add_argument("--strategy", choices=("attention", "random", "loss"),
                        help="masking strategy")
    parser.add_argument("--steps", type=int, help="inference decoding steps")


def _resolve(args: argparse.Namespace) -> Config:
    file_text = None
    if args.config is not None:
        if not args.config.exists():
            raise ConfigurationError(f"config file not found: {args.config}")
        file_text = args.config.read_text()
    cfg = resolve_config(file_text, seed=args.seed, profile=args.profile,
                         strategy=args.strategy, steps=args.steps)
    logger.info("resolved config:\n%s", cfg.to_text())
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speechmask",
        description="speech-queried masked motion modeling pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    _common_flags(p)
    p.add_argument("--out", type=Path, required=True, help="corpus directory")

    for stage in ("train-rvq", "train-mam", "train-mask"):
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        _common_flags(p)
        p.add_argument("--data", type=Path, required=True, help="corpus directory")
        p.add_argument("--ckpt-dir", type=Path, required=True, help="checkpoint directory")

    p = sub.add_parser("infer", help="generate motion from speech features")
    _common_flags(p)
    p.add_argument("--ckpt-dir", type=Path, required=True)
    p.add_argument("--features", type=Path, required=True, help="feature tensor file")
    p.add_argument("--seed-frames", type=Path, required=True, help="4-frame seed tensor file")
    p.add_argument("--frames", type=int, help="output length in raw frames")
    p.add_argument("--out", type=Path, required=True, help="output motion tensor file")

    p = sub.add_parser("eval", help="evaluate a trained stack on the held-out split")
    _common_flags(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ckpt-dir", type=Path, required=True)

    p = sub.add_parser("export-attn", help="export teacher attention maps as CSV")
    _common_flags(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ckpt-dir", type=Path, required=True)
    p.add_argument("--sample-id", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)

    return parser


def main(argv: list[str] | None = None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        steps = args.steps if args.steps is not None else cfg.steps
        if args.command == "gen-data":
            run_gen_data(cfg, args.out)
        elif args.command == "train-rvq":
            run_train_rvq(cfg, args.data, args.ckpt_dir)
        elif args.command == "train-mam":
            run_train_mam(cfg, args.data, args.ckpt_dir)
        elif args.command == "train-mask":
            run_train_mask(cfg, args.data, args.ckpt_dir)
        elif args.command == "infer":
            run_infer(cfg, args.ckpt_dir, args.features, args.seed_frames,
                      args.out, args.frames, steps)
        elif args.command == "eval":
            run_eval(cfg, args.data, args.ckpt_dir, steps)
        elif args.command == "export-attn":
            run_export_attn(cfg, args.data, args.ckpt_dir, args.sample_id, args.out)
    except Exception as exc:  # noqa: BLE001 - single CLI boundary
        logger.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
