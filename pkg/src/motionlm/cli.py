"""Command-line entry point: ``motionlm <command> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .config import load_config
from .errors import ConfigInvalid, MotionLMError, ShapeMismatch
from .formats import iter_stream_frames, read_mseq, read_vemb, write_mseq, write_mtok
from .inference import (
    GREEDY,
    Sampling,
    TrackerSession,
    narrate,
    predict_motion,
    text_to_motion,
    track_sequence,
)
from .kinematics import MotionSequence
from .sensors import POINT_WIDTH, SENSOR_POINTS, VideoEmbeddingTrack
from . import pipeline
from .synth import build_corpus, derive_sensors

log = logging.getLogger("motionlm")


def _sampling(args, cfg) -> Sampling:
    if args.greedy:
        return GREEDY
    t = args.temperature if args.temperature is not None else cfg.inference.temperature
    k = args.top_k if args.top_k is not None else cfg.inference.top_k
    return Sampling(temperature=t, top_k=k, seed=args.seed)


def _emit(args, values: dict, rows: list[dict]):
    text = metrics.report_csv(rows) if args.format == "csv" else metrics.report_text(values)
    if args.report:
        Path(args.report).write_text(text)
    else:
        sys.stdout.write(text)


def _overrides(args) -> dict:
    out: dict = {}
    if getattr(args, "seed", None) is not None:
        out.setdefault("train", {})["seed"] = args.seed
    for item in args.set or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigInvalid(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, k = key.split(".", 1)
        out.setdefault(section, {})[k] = value
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_corpus(args, cfg):
    c = cfg.corpus
    summary = build_corpus(args.out, c.n_train if args.n_train is None else args.n_train,
                           c.n_test if args.n_test is None else args.n_test, cfg.train.seed,
                           c.duration, c.fps, c.video_dim, cfg.tokenizer.down_rate, c.sensor_kind)
    log.info("corpus written to %s: %s", args.out, summary)


def cmd_train_tokenizer(args, cfg):
    clips = pipeline.load_corpus(args.corpus, "train")
    t0 = time.time()
    tr = pipeline.train_tokenizer(cfg, clips, args.out, args.steps, args.resume, log_every=args.log_every)
    if tr.trace:
        log.info("tokenizer: %d steps in %.1fs, final %s", tr.step, time.time() - t0, tr.trace[-1])


def cmd_pretrain(args, cfg):
    clips = pipeline.load_corpus(args.corpus, "train")
    tr, _, _ = pipeline.pretrain(cfg, clips, args.tokenizer, args.out, args.steps, args.resume)
    if tr.trace:
        log.info("pretrain: %d steps, final loss %.4f", tr.step, tr.trace[-1]["loss"])


def cmd_instruct(args, cfg):
    clips = pipeline.load_corpus(args.corpus, "train")
    tr, _, _ = pipeline.instruct(cfg, clips, args.pretrain, args.out, args.steps, args.resume)
    if tr.trace:
        log.info("instruct: %d steps, final loss %.4f, batches per task %s", tr.step, tr.trace[-1]["loss"],
                 tr.task_counts())


def _video_for(b, clip):
    return clip.video if b.meta.get("use_video") else None


def cmd_track(args, cfg):
    b = pipeline.load_instruct(args.checkpoint)
    out = Path(args.out)
    (out / "motions").mkdir(parents=True, exist_ok=True)
    clips = pipeline.load_corpus(args.corpus, args.split)
    kind = b.model.sensor.kind
    for c in clips:
        pred = track_sequence(c.sensors(kind), _video_for(b, c), b.model, b.tokenizer, b.vocab,
                              cfg.inference.window, c.motion.fps)
        write_mseq(out / "motions" / f"{c.clip_id}.mseq", pred)
    log.info("tracked %d clips into %s", len(clips), out)


def cmd_track_stream(args, cfg):
    b = pipeline.load_instruct(args.checkpoint)
    use_video = bool(b.meta.get("use_video"))
    width = POINT_WIDTH * len(SENSOR_POINTS[b.model.sensor.kind])
    sess = TrackerSession(b.model, b.tokenizer, b.vocab, cfg.inference.window, use_video, args.fps)
    r = sess.r
    fh = sys.stdin.buffer if args.input == "-" else open(args.input, "rb")
    frames_out, group, last_video = [], [], None
    buf_s, buf_v = [], []
    try:
        for sensor, video in iter_stream_frames(fh, width, b.model.video.in_dim):
            if video is not None:
                last_video = video
            group.append(sensor)
            if len(group) < r:
                continue
            if use_video and last_video is None:
                raise ShapeMismatch("stream carries no video block but the model expects video")
            buf_s.extend(group)
            buf_v.append(last_video)
            group = []
            if not sess.initialized:
                if len(buf_s) >= args.init_frames:
                    frames_out.append(sess.initialize(np.stack(buf_s), np.stack(buf_v) if use_video else None).frames)
                    buf_s, buf_v = [], []
                continue
            frames_out.append(sess.step(np.stack(buf_s), np.stack(buf_v) if use_video else None).frames)
            buf_s, buf_v = [], []
    finally:
        if fh is not sys.stdin.buffer:
            fh.close()
    if not sess.initialized and buf_s:
        frames_out.append(sess.initialize(np.stack(buf_s), np.stack(buf_v) if use_video else None).frames)
    if not frames_out:
        raise ShapeMismatch(f"stream held fewer than r={r} frames")
    m = MotionSequence(np.concatenate(frames_out), fps=args.fps, skeleton=b.tokenizer.skeleton)
    write_mseq(args.out, m)
    if args.tokens:
        write_mtok(args.tokens, b.vocab.ids_to_stream(sess.history, r, args.fps))
    log.info("streamed %d frames, %d tokens", m.T, sess.committed)


def _window_inputs(args, b):
    m = read_mseq(args.motion, b.tokenizer.skeleton)
    sensor = derive_sensors(m, b.model.sensor.kind)
    video = None
    if b.meta.get("use_video"):
        if not args.video:
            raise ConfigInvalid("this checkpoint was trained with video; pass --video")
        video = VideoEmbeddingTrack(read_vemb(args.video))
    return sensor, video


def cmd_narrate(args, cfg):
    b = pipeline.load_instruct(args.checkpoint)
    sensor, video = _window_inputs(args, b)
    print(narrate(sensor, video, b.model, b.vocab, _sampling(args, cfg)).text)


def cmd_t2m(args, cfg):
    b = pipeline.load_instruct(args.checkpoint)
    g = text_to_motion(args.text, b.model, b.tokenizer, b.vocab, _sampling(args, cfg),
                       cfg.inference.window // cfg.tokenizer.down_rate)
    if g.motion is None:
        raise MotionLMError("model produced no motion tokens")
    write_mseq(args.out, g.motion)


def cmd_predict(args, cfg):
    b = pipeline.load_pretrained(args.checkpoint)
    prompt = read_mseq(args.motion, b.tokenizer.skeleton)
    g = predict_motion(prompt, args.horizon, b.lm, b.tokenizer, b.vocab, _sampling(args, cfg))
    write_mseq(args.out, g.motion)


def _pairs(gt_arg, pred_arg):
    gt, pred = Path(gt_arg), Path(pred_arg)
    if gt.is_dir():
        names = sorted(p.name for p in pred.glob("*.mseq"))
        if not names:
            raise FileNotFoundError(f"no .mseq files in {pred}")
        return [(n, gt / n, pred / n) for n in names]
    return [(gt.name, gt, pred)]


def cmd_eval_tracking(args, cfg):
    pairs = [(n, read_mseq(g), read_mseq(p)) for n, g, p in _pairs(args.gt, args.pred)]
    rep = metrics.evaluate_tracking(pairs)
    _emit(args, metrics.summary(rep), rep.per_sequence)


def _lines(path) -> list[str]:
    return [l.rstrip("\n") for l in Path(path).read_text().splitlines()]


def cmd_eval_nlp(args, cfg):
    cand, ref = _lines(args.candidates), _lines(args.references)
    if len(cand) != len(ref):
        raise ShapeMismatch(f"{len(cand)} candidates vs {len(ref)} references")
    rep = metrics.evaluate_nlp(cand, ref)
    _emit(args, metrics.summary(rep), rep.per_pair)


def cmd_eval_tokenizer(args, cfg):
    tok = pipeline.load_tokenizer(args.checkpoint)
    clips = pipeline.load_corpus(args.corpus, args.split)
    rows = []
    for c in clips:
        rows.append({"name": c.clip_id, **metrics.tokenizer_metrics([(c.motion, tok.reconstruct(c.motion))])})
    values = {k: float(np.mean([r[k] for r in rows])) for k in ("mpjpe", "pa_mpjpe", "accel")}
    _emit(args, values, rows)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="motionlm", description="Motion tokenizer + language model toolkit.")
    p.add_argument("--config", help="INI config file layered over the preset")
    p.add_argument("--preset", default="desk", help="canonical or desk (default: desk)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    p.add_argument("--seed", type=int, help="overrides train.seed; also seeds sampling")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="same as the global --seed")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-corpus", cmd_gen_corpus, "write the synthetic corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-train", type=int)
    sp.add_argument("--n-test", type=int)

    for name, fn, dep in (("train-tokenizer", cmd_train_tokenizer, None),
                          ("pretrain", cmd_pretrain, "--tokenizer"),
                          ("instruct", cmd_instruct, "--pretrain")):
        sp = add(name, fn, f"training stage: {name}")
        sp.add_argument("--corpus", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--resume", help="checkpoint of the same stage to continue from")
        sp.add_argument("--log-every", type=int, default=0)
        if dep:
            sp.add_argument(dep, required=True)

    sp = add("track", cmd_track, "batch tracking over a corpus split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--out", required=True)

    sp = add("track-stream", cmd_track_stream, "online tracking from a length-prefixed frame stream")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", default="-", help="stream file or - for stdin")
    sp.add_argument("--out", required=True)
    sp.add_argument("--tokens", help="also write the committed tokens (.mtok)")
    sp.add_argument("--init-frames", type=int, default=60)
    sp.add_argument("--fps", type=float, default=60.0)

    for name, fn in (("narrate", cmd_narrate), ("t2m", cmd_t2m), ("predict", cmd_predict)):
        sp = add(name, fn, f"{name} generation")
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--temperature", type=float)
        sp.add_argument("--top-k", type=int)
        sp.add_argument("--greedy", action="store_true")
        if name == "narrate":
            sp.add_argument("--motion", required=True, help=".mseq the sensors are derived from")
            sp.add_argument("--video", help=".vemb track")
        elif name == "t2m":
            sp.add_argument("--text", required=True)
            sp.add_argument("--out", required=True)
        else:
            sp.add_argument("--motion", required=True)
            sp.add_argument("--horizon", type=int, required=True)
            sp.add_argument("--out", required=True)

    for name, fn in (("eval-tracking", cmd_eval_tracking), ("eval-nlp", cmd_eval_nlp),
                     ("eval-tokenizer", cmd_eval_tokenizer)):
        sp = add(name, fn, "metrics report")
        sp.add_argument("--format", choices=("text", "csv"), default="text")
        sp.add_argument("--report", help="write the report here instead of stdout")
        if name == "eval-tracking":
            sp.add_argument("--gt", required=True, help=".mseq file or directory")
            sp.add_argument("--pred", required=True, help=".mseq file or directory")
        elif name == "eval-nlp":
            sp.add_argument("--candidates", required=True)
            sp.add_argument("--references", required=True)
        else:
            sp.add_argument("--checkpoint", required=True)
            sp.add_argument("--corpus", required=True)
            sp.add_argument("--split", default="test")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.preset, overrides=_overrides(args))
        torch.manual_seed(cfg.train.seed)
        args.fn(args, cfg)
    except MotionLMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, EOFError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5
    return 0


if __name__ == "__main__":
    sys.exit(main())
