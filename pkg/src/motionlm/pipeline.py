"""Stage orchestration: corpus loading, the three training stages and model loading."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import torch

from .checkpoint import Checkpoint, load_checkpoint, load_module, module_tensors, save_checkpoint
from .config import Config
from .errors import EmptyBatch, MissingDependencyCheckpoint
from .formats import read_manifest, read_mseq, read_vemb
from .instruct import InstructConfig, InstructModel, InstructTrainer, samples_for_clip
from .kinematics import Skeleton, default_skeleton, load_skeleton
from .lm import MotionLM, PretrainConfig, PretrainTrainer, Vocabulary, expand_vocab
from .sensors import VideoEmbeddingTrack
from .synth import Clip
from .vqvae import MotionTokenizer, VqTrainConfig, VqTrainer

log = logging.getLogger(__name__)


def skeleton_for(cfg: Config) -> Skeleton:
    return load_skeleton(cfg.paths.skeleton) if cfg.paths.skeleton else default_skeleton()


def load_corpus(corpus_dir, split: str = "train", skeleton: Skeleton | None = None) -> list[Clip]:
    """Clips listed in ``<split>.jsonl`` (one per clip id, manifest order)."""
    root = Path(corpus_dir)
    skeleton = skeleton or (load_skeleton(root / "skeleton.txt") if (root / "skeleton.txt").exists()
                            else default_skeleton())
    clips, seen = [], set()
    for row in read_manifest(root / f"{split}.jsonl"):
        if row["clip"] in seen:
            continue
        seen.add(row["clip"])
        clips.append(Clip(row["clip"], row["label"], row["scene"], row["narration"],
                          read_mseq(root / row["motion"], skeleton),
                          VideoEmbeddingTrack(read_vemb(root / row["video"])), int(row["seed"])))
    if not clips:
        raise EmptyBatch(f"{split} split of {root} is empty")
    return clips


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------

def tokenizer_arch(cfg: Config) -> dict:
    t = cfg.tokenizer
    return {"n_codebooks": t.n_codebooks, "codebook_size": t.codebook_size, "code_dim": t.code_dim,
            "down_rate": t.down_rate, "width": t.width, "decay": t.decay, "reset_threshold": t.reset_threshold}


def build_tokenizer(arch: dict, skeleton: Skeleton | None = None) -> MotionTokenizer:
    return MotionTokenizer(**arch, skeleton=skeleton)


def vq_train_config(cfg: Config, steps: int | None = None, seed: int | None = None) -> VqTrainConfig:
    t, tr = cfg.tokenizer, cfg.train
    return VqTrainConfig(
        steps=tr.vq_steps if steps is None else steps, batch=tr.vq_batch, window=cfg.inference.window,
        lr=tr.vq_lr, beta1=tr.beta1, beta2=tr.beta2, reset_every=t.reset_every,
        seed=tr.seed if seed is None else seed, smooth_l1_beta=t.smooth_l1_beta,
        weights=dict(commit=t.lambda_commit, recon=t.lambda_recon, raw=t.lambda_raw,
                     joints=t.lambda_joints, vel=t.lambda_vel))


def tokenizer_checkpoint(trainer: VqTrainer, arch: dict, cfg: Config) -> Checkpoint:
    meta = {"tokenizer_arch": arch, "skeleton": trainer.model.skeleton.to_text(), "trainer": trainer.state_meta()}
    return Checkpoint("tokenizer", trainer.state_tensors(), meta, cfg.fingerprint())


def train_tokenizer(cfg: Config, clips: list[Clip], out=None, steps: int | None = None, resume=None,
                    log_every: int = 0) -> VqTrainer:
    """Train (or resume) stage 1 and optionally write the checkpoint to ``out``."""
    vcfg = vq_train_config(cfg, steps)
    arch = tokenizer_arch(cfg)
    torch.manual_seed(vcfg.seed)
    trainer = VqTrainer(build_tokenizer(arch, skeleton_for(cfg)), [c.motion for c in clips], vcfg)
    if resume is not None:
        ck = load_checkpoint(resume, "tokenizer", cfg.fingerprint())
        trainer.load_state(ck.tensors, ck.meta["trainer"])
    trainer.run(log_every=log_every)
    if out is not None:
        save_checkpoint(tokenizer_checkpoint(trainer, arch, cfg), out)
    return trainer


def tokenizer_from_checkpoint(ck: Checkpoint, prefix: str = "model.") -> MotionTokenizer:
    tok = build_tokenizer(ck.meta["tokenizer_arch"], Skeleton.from_text(ck.meta["skeleton"]))
    load_module(tok, ck.tensors, prefix)
    tok.eval()
    return tok


def load_tokenizer(path) -> MotionTokenizer:
    ck = load_checkpoint(path)
    if ck.stage == "tokenizer":
        return tokenizer_from_checkpoint(ck)
    return tokenizer_from_checkpoint(ck, "tokenizer.")


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------

def vocab_for(cfg: Config) -> Vocabulary:
    return Vocabulary(cfg.lm.text_vocab, cfg.tokenizer.n_codebooks, cfg.tokenizer.codebook_size)


def new_lm(cfg: Config, vocab: Vocabulary) -> MotionLM:
    lm = MotionLM(vocab.motion_offset, cfg.lm.d_model, cfg.lm.layers, cfg.lm.heads, cfg.lm.max_len,
                  seed=cfg.train.seed)
    return expand_vocab(lm, vocab.motion_size, seed=cfg.train.seed)


def pretrain_config(cfg: Config, steps: int | None = None) -> PretrainConfig:
    tr = cfg.train
    return PretrainConfig(steps=tr.pre_steps if steps is None else steps, batch=tr.pre_batch, lr=tr.pre_lr,
                          betas=(tr.beta1, tr.beta2), seed=tr.seed, freeze_text=cfg.lm.freeze_text)


def _require(path, stage: str, what: str):
    if path is None or not Path(path).exists():
        raise MissingDependencyCheckpoint(f"{what} needs a {stage} checkpoint (got {path})")
    return load_checkpoint(path, stage)


def pretrain(cfg: Config, clips: list[Clip], tokenizer_ckpt, out=None, steps: int | None = None,
             resume=None, until: float | None = None):
    tck = _require(tokenizer_ckpt, "tokenizer", "pretrain")
    tok = tokenizer_from_checkpoint(tck)
    vocab = vocab_for(cfg)
    streams = [tok.tokenize(c.motion) for c in clips]
    lm = new_lm(cfg, vocab)
    trainer = PretrainTrainer(lm, vocab, streams, pretrain_config(cfg, steps))
    if resume is not None:
        ck = load_checkpoint(resume, "pretrain", cfg.fingerprint())
        load_module(lm, ck.tensors)
        trainer.load_state(ck.tensors, ck.meta["trainer"])
    trainer.run(until=until)
    if out is not None:
        tensors = {**module_tensors(lm), **module_tensors(tok, "tokenizer."), **trainer.state_tensors()}
        meta = {"tokenizer_arch": tck.meta["tokenizer_arch"], "skeleton": tck.meta["skeleton"],
                "lm_arch": lm.arch(), "vocab": vocab.to_dict(), "trainer": trainer.state_meta()}
        save_checkpoint(Checkpoint("pretrain", tensors, meta, cfg.fingerprint()), out)
    return trainer, tok, vocab


@dataclass
class Bundle:
    tokenizer: MotionTokenizer
    vocab: Vocabulary
    lm: MotionLM
    model: InstructModel | None = None
    meta: dict | None = None


def load_pretrained(path) -> Bundle:
    ck = _require(path, "pretrain", "this command")
    lm = MotionLM.from_arch(ck.meta["lm_arch"])
    load_module(lm, ck.tensors)
    lm.eval()
    return Bundle(tokenizer_from_checkpoint(ck, "tokenizer."), Vocabulary.from_dict(ck.meta["vocab"]), lm,
                  meta=ck.meta)


# ---------------------------------------------------------------------------
# Stage 3
# ---------------------------------------------------------------------------

def instruct_config(cfg: Config, steps: int | None = None) -> InstructConfig:
    tr = cfg.train
    return InstructConfig(steps=tr.ins_steps if steps is None else steps, batch=tr.ins_batch, lr=tr.ins_lr,
                          betas=(tr.beta1, tr.beta2), seed=tr.seed, tasks=tr.tasks)


def build_samples(clips: list[Clip], tok: MotionTokenizer, tasks, kind: str, use_video: bool) -> dict:
    out = {t: [] for t in tasks}
    for c in clips:
        for task, s in samples_for_clip(c, tok.tokenize(c.motion), tasks, kind, use_video).items():
            out[task].append(s)
    return out


def instruct(cfg: Config, clips: list[Clip], pretrain_ckpt, out=None, steps: int | None = None,
             resume=None, until: float | None = None):
    b = load_pretrained(pretrain_ckpt) if pretrain_ckpt is not None else None
    if b is None:
        raise MissingDependencyCheckpoint("instruct needs a pretrain checkpoint")
    b.lm.train()
    torch.manual_seed(cfg.train.seed)
    model = InstructModel(b.lm, cfg.corpus.sensor_kind, cfg.corpus.video_dim, cfg.lm.sensor_width,
                          cfg.tokenizer.down_rate)
    model.sensor.set_normalization([c.sensors(cfg.corpus.sensor_kind) for c in clips])
    samples = build_samples(clips, b.tokenizer, cfg.train.tasks, cfg.corpus.sensor_kind, cfg.train.use_video)
    trainer = InstructTrainer(model, b.vocab, samples, instruct_config(cfg, steps))
    if resume is not None:
        ck = load_checkpoint(resume, "instruct", cfg.fingerprint())
        load_module(model, ck.tensors)
        trainer.load_state(ck.tensors, ck.meta["trainer"])
    trainer.run(until=until)
    if out is not None:
        save_checkpoint(instruct_checkpoint(model, b, trainer, cfg), out)
    return trainer, model, b


def instruct_checkpoint(model: InstructModel, b: Bundle, trainer: InstructTrainer | None, cfg: Config) -> Checkpoint:
    tensors = {**module_tensors(model), **module_tensors(b.tokenizer, "tokenizer.")}
    meta = {"tokenizer_arch": b.meta["tokenizer_arch"], "skeleton": b.meta["skeleton"],
            "instruct_arch": model.arch(), "vocab": b.vocab.to_dict(), "use_video": cfg.train.use_video}
    if trainer is not None:
        tensors.update(trainer.state_tensors())
        meta["trainer"] = trainer.state_meta()
    return Checkpoint("instruct", tensors, meta, cfg.fingerprint())


def load_instruct(path) -> Bundle:
    ck = _require(path, "instruct", "this command")
    model = InstructModel.from_arch(ck.meta["instruct_arch"])
    load_module(model, ck.tensors)
    model.eval()
    return Bundle(tokenizer_from_checkpoint(ck, "tokenizer."), Vocabulary.from_dict(ck.meta["vocab"]),
                  model.lm, model, ck.meta)
