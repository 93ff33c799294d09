"""Batch and streaming tracking, narration, text-to-motion and motion continuation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContextOverflow, LengthNotDivisible, SessionOverflow, ShapeMismatch
from .instruct import (
    InstructModel,
    InstructionSample,
    assemble,
    m2t_sample,
    t2m_sample,
    tracking_sample,
    understanding_sample,
)
from .kinematics import MotionSequence
from .lm import DecodeSession, MotionLM, Vocabulary, decode_loop
from .sensors import SensorStream, VideoEmbeddingTrack
from .vqvae import MotionTokenizer, TokenStream


@dataclass
class Sampling:
    temperature: float = 1.0
    top_k: int | None = None
    seed: int | None = None
    greedy: bool = False


GREEDY = Sampling(greedy=True)


@dataclass
class Generation:
    ids: list[int]
    motion: MotionSequence | None = None
    text: str | None = None


# ---------------------------------------------------------------------------
# Logit masks
# ---------------------------------------------------------------------------

def trunk_mask(vocab: Vocabulary, n: int) -> torch.Tensor:
    m = torch.zeros(vocab.total_size, dtype=torch.bool)
    lo, hi = vocab.trunk_range(n)
    m[lo:hi] = True
    return m


def forced_motion(vocab: Vocabulary, start: int = 0):
    """Allow only codebook ``(start + step) mod N`` ids at each step."""
    masks = [trunk_mask(vocab, n) for n in range(vocab.n_codebooks)]
    return lambda step, out: masks[(start + step) % vocab.n_codebooks]


def text_only(vocab: Vocabulary) -> torch.Tensor:
    m = torch.zeros(vocab.total_size, dtype=torch.bool)
    m[:256] = True
    m[vocab.eos] = True
    return m


def _room(model: MotionLM, prompt_len: int, want: int) -> int:
    if prompt_len > model.max_len:
        raise ContextOverflow(f"prompt of {prompt_len} exceeds max_len {model.max_len}")
    return min(want, model.max_len - prompt_len + 1)


def _embed(model: InstructModel, ids) -> torch.Tensor:
    return model.lm.embed_ids(torch.tensor(ids, dtype=torch.long))


@torch.no_grad()
def prompt_embeds(sample: InstructionSample, vocab: Vocabulary, model: InstructModel, extra_ids=()) -> torch.Tensor:
    e = assemble(sample, vocab, model, include_output=False).embeds
    if len(extra_ids):
        e = torch.cat([e, _embed(model, list(extra_ids))])
    return e


@torch.no_grad()
def greedy_uncached(lm: MotionLM, prefix: torch.Tensor, n_new: int, allowed=None) -> list[int]:
    """Greedy decoding that re-runs the full sequence for every token (no cache)."""
    out: list[int] = []
    x = prefix
    for step in range(n_new):
        logits, _ = lm(embeds=x.unsqueeze(0))
        l = logits[0, -1]
        if allowed is not None:
            l = l.masked_fill(~allowed(step, out), float("-inf"))
        tok = int(torch.argmax(l))
        out.append(tok)
        x = torch.cat([x, lm.embed_ids(torch.tensor([tok]))])
    return out


@torch.no_grad()
def _decode(lm: MotionLM, prefix: torch.Tensor, n_new: int, sampling: Sampling, allowed=None,
            stop_ids=()) -> list[int]:
    sess = DecodeSession(lm)
    logits = sess.append(embeds=prefix)[-1]
    return decode_loop(sess, logits, n_new, sampling.temperature, sampling.top_k, sampling.seed,
                       sampling.greedy, allowed, stop_ids)


# ---------------------------------------------------------------------------
# Tracking
# ---------------------------------------------------------------------------

def _check_video(video, n_groups):
    if video is not None and len(video) != n_groups:
        raise ShapeMismatch(f"video track has {len(video)} frames, sensor window needs {n_groups}")


def track_tokens(sensor: SensorStream, video: VideoEmbeddingTrack | None, model: InstructModel,
                 vocab: Vocabulary) -> list[int]:
    r = model.sensor.down_rate
    if sensor.T % r:
        raise LengthNotDivisible(f"window of {sensor.T} frames not divisible by r={r}")
    G = sensor.T // r
    _check_video(video, G)
    prefix = prompt_embeds(tracking_sample(sensor, None, video), vocab, model, [vocab.mot])
    n = vocab.n_codebooks * G
    if prefix.shape[0] + n - 1 > model.lm.max_len:
        raise ContextOverflow("tracking window does not fit the model context")
    return _decode(model.lm, prefix, n, GREEDY, forced_motion(vocab))


def track_batch(sensor: SensorStream, video: VideoEmbeddingTrack | None, model: InstructModel,
                tokenizer: MotionTokenizer, vocab: Vocabulary, fps: float = 60.0) -> MotionSequence:
    """Greedy-decode ``N * T/r`` motion tokens for one window and decode them to frames."""
    ids = track_tokens(sensor, video, model, vocab)
    return tokenizer.decode(vocab.ids_to_stream(ids, tokenizer.down_rate, fps))


def track_sequence(sensor: SensorStream, video: VideoEmbeddingTrack | None, model: InstructModel,
                   tokenizer: MotionTokenizer, vocab: Vocabulary, window: int = 60,
                   fps: float = 60.0) -> MotionSequence:
    """Independent ``window``-frame chunks, concatenated (trailing partial window dropped)."""
    r = tokenizer.down_rate
    chunks = []
    for s in range(0, sensor.T - window + 1, window):
        v = None if video is None else video.slice(s // r, (s + window) // r)
        chunks.append(track_batch(sensor.slice(s, s + window), v, model, tokenizer, vocab, fps).frames)
    if not chunks:
        raise LengthNotDivisible(f"sequence of {sensor.T} frames shorter than one window of {window}")
    frames = np.concatenate(chunks)
    return MotionSequence(frames, fps=fps, skeleton=tokenizer.skeleton)


class TrackerSession:
    """Streaming tracker that slides a ``window``-frame context over the input.

    Each r-frame group appends its sensor (and video) conditions, rebuilds
    the prompt, and greedily decodes N new tokens after the motion tokens
    already committed for the frames still inside the window.
    """

    def __init__(self, model: InstructModel, tokenizer: MotionTokenizer, vocab: Vocabulary,
                 window: int = 60, use_video: bool = True, fps: float = 60.0):
        self.model, self.tokenizer, self.vocab = model, tokenizer, vocab
        self.r = tokenizer.down_rate
        if window % self.r:
            raise LengthNotDivisible(f"window {window} not divisible by r={self.r}")
        self.window, self.use_video, self.fps = window, use_video, fps
        self.kind = model.sensor.kind
        self.sensor = np.zeros((0, model.sensor.mean.shape[0]), dtype=np.float32)
        self.video: list[np.ndarray] = []
        self.tokens: list[int] = []   # committed ids for frames inside the window
        self.history: list[int] = []  # every committed id
        self.t = 0
        self.initialized = False

    @property
    def committed(self) -> int:
        return len(self.history)

    def _video_track(self):
        return VideoEmbeddingTrack(np.stack(self.video)) if self.use_video else None

    def prefix(self) -> torch.Tensor:
        """Prompt embeddings for the current window, through the committed motion tokens."""
        sample = tracking_sample(SensorStream(self.kind, self.sensor), None, self._video_track())
        return prompt_embeds(sample, self.vocab, self.model, [self.vocab.mot] + self.tokens)

    def _check_inputs(self, sensor, video):
        sensor = np.asarray(sensor, dtype=np.float32).reshape(-1, self.sensor.shape[1])
        if len(sensor) % self.r:
            raise LengthNotDivisible(f"{len(sensor)} new frames is not a whole number of {self.r}-frame groups")
        G = len(sensor) // self.r
        if self.use_video:
            if video is None:
                raise ShapeMismatch("session expects video frames")
            video = np.asarray(video, dtype=np.float32)
            if video.size != G * self.model.video.in_dim:
                raise ShapeMismatch(f"{G} sensor groups need {G} video frames of width {self.model.video.in_dim}")
            video = video.reshape(G, self.model.video.in_dim)
        return sensor, video, G

    def _frames(self, n: int) -> MotionSequence:
        ts = self.vocab.ids_to_stream(self.tokens, self.r, self.fps)
        m = self.tokenizer.decode(ts)
        return m.slice(m.T - n, m.T)

    def initialize(self, sensor, video=None) -> MotionSequence:
        """Start from at least ``r`` (and at most ``window``) frames; decodes their tokens."""
        sensor, video, G = self._check_inputs(sensor, video)
        if G == 0:
            raise LengthNotDivisible(f"initialization needs at least r={self.r} frames")
        if len(sensor) > self.window:
            raise SessionOverflow(f"initial {len(sensor)} frames exceed the {self.window}-frame window")
        self.sensor = sensor
        self.video = list(video) if self.use_video else []
        self.tokens = _decode(self.model.lm, self.prefix(), self.vocab.n_codebooks * G, GREEDY,
                              forced_motion(self.vocab))
        self.history = list(self.tokens)
        self.t = len(sensor)
        self.initialized = True
        return self._frames(len(sensor))

    def step(self, sensor, video=None) -> MotionSequence | None:
        """Consume whole r-frame groups; returns the newly decoded frames (None for no input)."""
        if not self.initialized:
            raise RuntimeError("session not initialized")
        sensor, video, G = self._check_inputs(sensor, video)
        if G == 0:
            return None
        N = self.vocab.n_codebooks
        for g in range(G):
            self.sensor = np.concatenate([self.sensor, sensor[g * self.r:(g + 1) * self.r]])
            if self.use_video:
                self.video.append(video[g])
            if len(self.sensor) > self.window:
                self.sensor = self.sensor[self.r:]
                self.video = self.video[1:]
                self.tokens = self.tokens[N:]
            new = _decode(self.model.lm, self.prefix(), N, GREEDY, forced_motion(self.vocab, len(self.tokens)))
            self.tokens += new
            self.history += new
            self.t += self.r
        return self._frames(G * self.r)


def track_online_step(session: TrackerSession, sensor, video=None) -> MotionSequence | None:
    return session.step(sensor, video)


# ---------------------------------------------------------------------------
# Generation tasks
# ---------------------------------------------------------------------------

def _text_generation(sample: InstructionSample, model: InstructModel, vocab: Vocabulary,
                     sampling: Sampling, max_new: int) -> Generation:
    prefix = prompt_embeds(sample, vocab, model)
    mask = text_only(vocab)
    n = _room(model.lm, prefix.shape[0], max_new)
    ids = _decode(model.lm, prefix, n, sampling, lambda s, o: mask, (vocab.eos,))
    return Generation(ids, text=vocab.decode_text(ids))


def narrate(sensor: SensorStream, video: VideoEmbeddingTrack | None, model: InstructModel, vocab: Vocabulary,
            sampling: Sampling = GREEDY, max_new: int = 120) -> Generation:
    """Narration text for a sensor window; stops at ``<eos>``."""
    return _text_generation(understanding_sample(sensor, "-", video), model, vocab, sampling, max_new)


def caption_motion(tokens: TokenStream, model: InstructModel, vocab: Vocabulary,
                   sampling: Sampling = GREEDY, max_new: int = 120) -> Generation:
    return _text_generation(m2t_sample(tokens, "-"), model, vocab, sampling, max_new)


def _span_mask(vocab: Vocabulary, max_groups: int):
    N = vocab.n_codebooks
    mot = torch.zeros(vocab.total_size, dtype=torch.bool)
    mot[vocab.mot] = True
    end = torch.zeros(vocab.total_size, dtype=torch.bool)
    end[vocab.mot_end] = True
    trunks = [trunk_mask(vocab, n) for n in range(N)]

    def allowed(step, out):
        if step == 0:
            return mot
        p = step - 1
        if p == N * max_groups:
            return end
        if p and p % N == 0:
            return trunks[0] | end
        return trunks[p % N]
    return allowed


def text_to_motion(prompt: str, model: InstructModel, tokenizer: MotionTokenizer | None, vocab: Vocabulary,
                   sampling: Sampling = GREEDY, max_groups: int = 15, fps: float = 60.0) -> Generation:
    """Generate ``<mot> ... </mot>`` for a caption and decode the motion ids.

    With ``tokenizer=None`` only the ids are returned.
    """
    prefix = prompt_embeds(t2m_sample(prompt, None), vocab, model)
    n = _room(model.lm, prefix.shape[0], vocab.n_codebooks * max_groups + 2)
    ids = _decode(model.lm, prefix, n, sampling, _span_mask(vocab, max_groups), (vocab.mot_end,))
    body = [t for t in ids if vocab.is_motion(t)]
    body = body[:len(body) - len(body) % vocab.n_codebooks]
    motion = None
    if body and tokenizer is not None:
        motion = tokenizer.decode(vocab.ids_to_stream(body, tokenizer.down_rate, fps))
    return Generation(ids, motion=motion)


def predict_motion(prompt: MotionSequence, horizon: int, lm: MotionLM, tokenizer: MotionTokenizer,
                   vocab: Vocabulary, sampling: Sampling = Sampling()) -> Generation:
    """Continue a motion with a pre-trained LM.

    The output starts with ``decode(tokenize(prompt))`` unchanged; the
    remaining frames come from decoding prompt plus sampled tokens.
    """
    r, N = tokenizer.down_rate, vocab.n_codebooks
    if prompt.T % r or horizon % r:
        raise LengthNotDivisible(f"prompt ({prompt.T}) and horizon ({horizon}) must be multiples of r={r}")
    ts = tokenizer.tokenize(prompt)
    prompt_ids = vocab.stream_to_ids(ts)
    head = tokenizer.decode(ts, initial_root_position=prompt.initial_root_position)
    if horizon == 0:
        return Generation(prompt_ids, motion=head)
    n = N * horizon // r
    prefix = [vocab.mot] + prompt_ids
    if len(prefix) + n - 1 > lm.max_len:
        raise ContextOverflow("prompt plus horizon exceeds the model context")
    sess = DecodeSession(lm)
    logits = sess.append(prefix)[-1]
    new = decode_loop(sess, logits, n, sampling.temperature, sampling.top_k, sampling.seed, sampling.greedy,
                      forced_motion(vocab, len(prompt_ids)))
    ids = prompt_ids + new
    full = tokenizer.decode(vocab.ids_to_stream(ids, r, prompt.fps),
                            initial_root_position=prompt.initial_root_position)
    frames = np.concatenate([head.frames, full.frames[prompt.T:]])
    return Generation(ids, motion=head.with_frames(frames))
