"""Sensor/video encoders, task templates, sequence assembly and instruction tuning."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autodiff import Conv1d, ParameterStore, adam_step, token_nll
from .errors import (
    ContextOverflow,
    DimMismatch,
    EmptyBatch,
    EmptyOutputSegment,
    LengthNotDivisible,
    NonFiniteLoss,
)
from .lm import MotionLM, Vocabulary
from .sensors import POINT_WIDTH, SENSOR_POINTS, SensorStream, VideoEmbeddingTrack
from .vqvae import TokenStream

TASKS = ("tracking", "understanding", "m2t", "t2m")

INSTRUCTIONS = {
    "tracking": "Track the body from sensors and video:",
    "understanding": "Narrate the motion seen by the sensors:",
    "m2t": "Caption this motion:",
    "t2m": "Animate this caption:",
}


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------

class SensorEncoder(nn.Module):
    """Convolutional encoder from sensor frames to LM-width features at the token rate."""

    def __init__(self, kind: str = "three_points", d_model: int = 256, width: int = 128, down_rate: int = 4):
        super().__init__()
        if down_rate < 1 or down_rate & (down_rate - 1):
            raise ValueError("down_rate must be a power of two")
        self.kind = kind
        self.down_rate = down_rate
        c_in = POINT_WIDTH * len(SENSOR_POINTS[kind])
        layers: list[nn.Module] = [Conv1d(c_in, width, 3, padding=1), nn.ReLU()]
        for _ in range(int(np.log2(down_rate))):
            layers += [Conv1d(width, width, 3, stride=2, padding=1), nn.ReLU()]
        layers.append(Conv1d(width, d_model, 1))
        self.net = nn.Sequential(*layers)
        self.register_buffer("mean", torch.zeros(c_in))
        self.register_buffer("std", torch.ones(c_in))

    def set_normalization(self, streams: list[SensorStream]):
        x = np.concatenate([s.localized() for s in streams]).astype(np.float64)
        self.mean.copy_(torch.as_tensor(x.mean(0), dtype=torch.float32))
        self.std.copy_(torch.as_tensor(np.maximum(x.std(0), 1e-2), dtype=torch.float32))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``[B, T, C]`` localized features -> ``[B, T/r, D]``."""
        if x.shape[1] % self.down_rate:
            raise LengthNotDivisible(f"sensor length {x.shape[1]} not divisible by r={self.down_rate}")
        z = ((x - self.mean) / self.std).transpose(1, 2)
        return self.net(z).transpose(1, 2)

    def encode(self, s: SensorStream, strict: bool = True) -> torch.Tensor:
        if s.kind != self.kind:
            raise DimMismatch(f"encoder expects {self.kind}, got {s.kind}")
        f = s.localized()
        if s.T % self.down_rate:
            if strict:
                raise LengthNotDivisible(f"sensor length {s.T} not divisible by r={self.down_rate}")
            f = np.concatenate([f, np.repeat(f[-1:], self.down_rate - s.T % self.down_rate, 0)])
        return self(torch.as_tensor(f).unsqueeze(0))[0]


class VideoProjector(nn.Module):
    def __init__(self, in_dim: int = 512, d_model: int = 256, identity: bool = False):
        super().__init__()
        self.in_dim = in_dim
        self.proj = nn.Linear(in_dim, d_model)
        if identity:
            if in_dim != d_model:
                raise DimMismatch("identity projection needs in_dim == d_model")
            with torch.no_grad():
                self.proj.weight.copy_(torch.eye(in_dim))
                self.proj.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimMismatch(f"video embedding width {x.shape[-1]} != {self.in_dim}")
        return self.proj(x)

    def encode(self, v: VideoEmbeddingTrack) -> torch.Tensor:
        return self(torch.as_tensor(v.embeddings))


class InstructModel(nn.Module):
    """Language model plus the modality encoders that feed it soft tokens."""

    def __init__(self, lm: MotionLM, sensor_kind: str = "three_points", video_dim: int = 512,
                 sensor_width: int = 128, down_rate: int = 4):
        super().__init__()
        self.lm = lm
        self.sensor = SensorEncoder(sensor_kind, lm.d_model, sensor_width, down_rate)
        self.video = VideoProjector(video_dim, lm.d_model)
        self.sensor_width = sensor_width

    def arch(self) -> dict:
        return {"lm": self.lm.arch(), "sensor_kind": self.sensor.kind, "video_dim": self.video.in_dim,
                "sensor_width": self.sensor_width, "down_rate": self.sensor.down_rate}

    @classmethod
    def from_arch(cls, a: dict) -> "InstructModel":
        return cls(MotionLM.from_arch(a["lm"]), a["sensor_kind"], a["video_dim"], a["sensor_width"],
                   a["down_rate"])


# ---------------------------------------------------------------------------
# Samples and templates
# ---------------------------------------------------------------------------

@dataclass
class Segment:
    kind: str  # text | sensor | video | motion
    payload: object
    output: bool = False

    def to_dict(self) -> dict:
        p = self.payload
        if self.kind == "text":
            data = p
        elif self.kind == "sensor":
            data = {"kind": p.kind, "features": p.features.tolist()}
        elif self.kind == "video":
            data = p.embeddings.tolist()
        else:
            data = {"tokens": p.tokens.tolist(), "N": p.n_codebooks, "K": p.codebook_size,
                    "r": p.down_rate, "fps": p.fps, "frames": p.n_frames}
        return {"kind": self.kind, "output": self.output, "payload": data}

    @classmethod
    def from_dict(cls, d: dict) -> "Segment":
        k, p = d["kind"], d["payload"]
        if k == "sensor":
            p = SensorStream(p["kind"], np.asarray(p["features"], dtype=np.float32))
        elif k == "video":
            p = VideoEmbeddingTrack(np.asarray(p, dtype=np.float32))
        elif k == "motion":
            p = TokenStream(np.asarray(p["tokens"], dtype=np.int64), p["N"], p["K"], p["r"], p["fps"], p["frames"])
        return cls(k, p, bool(d["output"]))


@dataclass
class InstructionSample:
    task: str
    segments: list[Segment] = field(default_factory=list)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        outs = [s for s in self.segments if s.output]
        if len(outs) != 1:
            raise EmptyOutputSegment(f"{self.task} sample needs exactly one output segment, has {len(outs)}")
        if not self.segments[-1].output:
            raise ValueError("the output segment must come last")

    @property
    def output(self) -> Segment:
        return self.segments[-1]

    def to_dict(self) -> dict:
        return {"task": self.task, "segments": [s.to_dict() for s in self.segments]}

    @classmethod
    def from_dict(cls, d: dict) -> "InstructionSample":
        return cls(d["task"], [Segment.from_dict(s) for s in d["segments"]])


def tracking_sample(sensor: SensorStream, target: TokenStream | None = None,
                    video: VideoEmbeddingTrack | None = None, task: str = "tracking",
                    narration: str | None = None) -> InstructionSample:
    segs = [Segment("text", INSTRUCTIONS[task])]
    if video is not None:
        segs.append(Segment("video", video))
    segs.append(Segment("sensor", sensor))
    if task == "tracking":
        segs.append(Segment("motion", target, output=True))
    else:
        segs.append(Segment("text", narration, output=True))
    return InstructionSample(task, segs)


def understanding_sample(sensor: SensorStream, narration: str, video: VideoEmbeddingTrack | None = None):
    return tracking_sample(sensor, None, video, "understanding", narration)


def m2t_sample(motion: TokenStream, narration: str) -> InstructionSample:
    return InstructionSample("m2t", [Segment("text", INSTRUCTIONS["m2t"]), Segment("motion", motion),
                                     Segment("text", narration, output=True)])


def t2m_sample(narration: str, motion: TokenStream) -> InstructionSample:
    return InstructionSample("t2m", [Segment("text", INSTRUCTIONS["t2m"]), Segment("text", narration),
                                     Segment("motion", motion, output=True)])


def samples_for_clip(clip, tokens: TokenStream, tasks=TASKS, sensor_kind: str = "three_points",
                     use_video: bool = True) -> dict[str, InstructionSample]:
    sensor = clip.sensors(sensor_kind)
    video = clip.video if use_video else None
    out = {}
    for task in tasks:
        if task == "tracking":
            out[task] = tracking_sample(sensor, tokens, video)
        elif task == "understanding":
            out[task] = understanding_sample(sensor, clip.narration, video)
        elif task == "m2t":
            out[task] = m2t_sample(tokens, clip.narration)
        else:
            out[task] = t2m_sample(clip.narration, tokens)
    return out


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

@dataclass
class Assembled:
    embeds: torch.Tensor   # [L, D]
    targets: torch.Tensor  # [L] token ids (pad at soft positions)
    mask: torch.Tensor     # [L] bool, true on the output span
    kinds: list[str]       # per-position segment kind

    def __len__(self):
        return self.embeds.shape[0]


def segment_ids(seg: Segment, vocab: Vocabulary) -> list[int]:
    if seg.kind == "text":
        ids = vocab.encode_text(seg.payload)
        return ids + [vocab.eos] if seg.output else ids
    if seg.kind == "motion":
        return vocab.wrap_motion(seg.payload)
    raise ValueError(f"{seg.kind} segments have no token ids")


def assemble(sample: InstructionSample, vocab: Vocabulary, model: InstructModel,
             include_output: bool = True) -> Assembled:
    """Concatenate segments in template order: ``<bos>`` first, soft tokens spliced in place.

    With ``include_output=False`` the output segment is left out so the
    result is a generation prompt.
    """
    if include_output:
        out = sample.output
        if out.kind == "text" and not out.payload:
            raise EmptyOutputSegment("output narration is empty")
        if out.kind == "motion" and (out.payload is None or len(out.payload.tokens) == 0):
            raise EmptyOutputSegment("output motion is empty")
    lm = model.lm
    parts, targets, mask, kinds = [], [], [], []

    def add_ids(ids, out, kind):
        t = torch.tensor(ids, dtype=torch.long)
        parts.append(lm.embed_ids(t))
        targets.extend(ids)
        mask.extend([out] * len(ids))
        kinds.extend([kind] * len(ids))

    add_ids([vocab.bos], False, "text")
    for seg in sample.segments:
        if seg.output and not include_output:
            break
        if seg.kind == "sensor":
            e = model.sensor.encode(seg.payload)
        elif seg.kind == "video":
            e = model.video.encode(seg.payload)
        else:
            add_ids(segment_ids(seg, vocab), seg.output, seg.kind)
            continue
        parts.append(e)
        targets.extend([vocab.pad] * e.shape[0])
        mask.extend([False] * e.shape[0])
        kinds.extend([seg.kind] * e.shape[0])
    emb = torch.cat(parts, dim=0)
    if emb.shape[0] > lm.max_len:
        raise ContextOverflow(f"assembled sequence of {emb.shape[0]} exceeds max_len {lm.max_len}")
    return Assembled(emb, torch.tensor(targets, dtype=torch.long), torch.tensor(mask), kinds)


def collate(items: list[Assembled], pad_embed: torch.Tensor, pad_id: int):
    L = max(len(a) for a in items)
    embeds, targets, masks = [], [], []
    for a in items:
        n = L - len(a)
        embeds.append(torch.cat([a.embeds, pad_embed.expand(n, -1)]) if n else a.embeds)
        targets.append(F.pad(a.targets, (0, n), value=pad_id))
        masks.append(F.pad(a.mask, (0, n), value=False))
    return torch.stack(embeds), torch.stack(targets), torch.stack(masks)


def per_position_loss(model: InstructModel, items: list[Assembled], vocab: Vocabulary):
    """NLL ``[B, L-1]`` at supervised positions (zero elsewhere) and the support mask."""
    pad_embed = model.lm.embed_ids(torch.tensor([vocab.pad]))
    embeds, targets, masks = collate(items, pad_embed, vocab.pad)
    logits, _ = model.lm(embeds=embeds[:, :-1])
    keep = masks[:, 1:]
    nll = token_nll(logits, targets[:, 1:])
    return nll * keep, keep


def instruct_loss(model: InstructModel, items: list[Assembled], vocab: Vocabulary) -> torch.Tensor:
    nll, keep = per_position_loss(model, items, vocab)
    return nll.sum() / keep.sum()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class InstructConfig:
    steps: int = 2000
    batch: int = 8
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.95)
    max_grad_norm: float | None = 1.0
    seed: int = 0
    tasks: tuple[str, ...] = TASKS


class InstructTrainer:
    """Joint training; every batch is drawn from one task picked uniformly at random."""

    def __init__(self, model: InstructModel, vocab: Vocabulary, samples: dict[str, list[InstructionSample]],
                 cfg: InstructConfig | None = None):
        self.model, self.vocab, self.cfg = model, vocab, cfg or InstructConfig()
        self.tasks = [t for t in self.cfg.tasks if samples.get(t)]
        if not self.tasks:
            raise EmptyBatch("no samples for any enabled task")
        self.samples = samples
        self.store = ParameterStore.from_module(model)
        self.rng = np.random.default_rng(self.cfg.seed)
        self.step = 0
        self.trace: list[dict] = []

    def batch(self) -> tuple[str, list[InstructionSample]]:
        task = self.tasks[int(self.rng.integers(0, len(self.tasks)))]
        pool = self.samples[task]
        idx = self.rng.integers(0, len(pool), self.cfg.batch)
        return task, [pool[i] for i in idx]

    def train_step(self) -> float:
        self.model.train()
        task, batch = self.batch()
        items = [assemble(s, self.vocab, self.model) for s in batch]
        loss = instruct_loss(self.model, items, self.vocab)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(f"loss became {float(loss)} at step {self.step}")
        loss.backward()
        adam_step(self.store, self.cfg.lr, *self.cfg.betas, strict=False, max_grad_norm=self.cfg.max_grad_norm)
        self.step += 1
        rec = {"step": self.step, "task": task, "loss": float(loss.detach())}
        self.trace.append(rec)
        return rec["loss"]

    def run(self, steps: int | None = None, until: float | None = None, window: int = 20) -> list[dict]:
        """Train; with ``until`` stop once the trailing mean loss over ``window`` steps is below it."""
        for _ in range(self.cfg.steps - self.step if steps is None else steps):
            self.train_step()
            if until is not None and len(self.trace) >= window:
                if np.mean([r["loss"] for r in self.trace[-window:]]) < until:
                    break
        return self.trace

    def task_counts(self) -> dict[str, int]:
        out = {t: 0 for t in self.tasks}
        for r in self.trace:
            out[r["task"]] += 1
        return out

    def state_tensors(self) -> dict[str, torch.Tensor]:
        return self.store.state_tensors()

    def state_meta(self) -> dict:
        cfg = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.cfg).items()}
        return {"step": self.step, "rng": self.rng.bit_generator.state, "trace": self.trace,
                "adam_step": self.store.step, "config": cfg}

    def load_state(self, tensors: dict, meta: dict):
        self.store.load_state_tensors(tensors, meta["adam_step"])
        self.rng.bit_generator.state = meta["rng"]
        self.step = int(meta["step"])
        self.trace = list(meta["trace"])
