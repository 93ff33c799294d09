"""Product-quantized motion VQ-VAE: convolutional encoder/decoder, EMA codebooks
with dead-code reset, the reconstruction loss family and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autodiff import Conv1d, ParameterStore, adam_step, smooth_l1
from .errors import BadToken, EmptyBatch, LengthMismatch, LengthNotDivisible, ShapeMismatch
from .kinematics import (
    FRAME_DIM,
    ROOT_ROT,
    ROOT_VEL,
    MotionSequence,
    Skeleton,
    default_skeleton,
    forward_kinematics_torch,
    rot6d_to_matrix,
    rotation_velocity_residual,
    yaw_matrix,
)

log = logging.getLogger(__name__)


@dataclass
class TokenStream:
    """Flattened motion tokens, frame-major: ``[i(0,0), i(0,1), ..., i(1,0), ...]``."""

    tokens: np.ndarray
    n_codebooks: int
    codebook_size: int
    down_rate: int = 4
    fps: float = 60.0
    n_frames: int | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)
        if len(self.tokens) % self.n_codebooks:
            raise BadToken(f"{len(self.tokens)} tokens is not a multiple of N={self.n_codebooks}")
        if len(self.tokens) and (self.tokens.min() < 0 or self.tokens.max() >= self.codebook_size):
            raise BadToken(f"token index outside [0, {self.codebook_size})")
        if self.n_frames is None:
            self.n_frames = self.n_groups * self.down_rate

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def n_groups(self) -> int:
        return len(self.tokens) // self.n_codebooks

    def grid(self) -> np.ndarray:
        """Indices as ``(T/r, N)``."""
        return self.tokens.reshape(self.n_groups, self.n_codebooks)


@dataclass
class VqLossReport:
    total: torch.Tensor
    commitment: torch.Tensor
    reconstruction: torch.Tensor
    raw: torch.Tensor
    joints: torch.Tensor
    velocity: torch.Tensor
    weights: dict = field(default_factory=dict)

    def as_dict(self) -> dict[str, float]:
        names = ("total", "commitment", "reconstruction", "raw", "joints", "velocity")
        return {k: float(getattr(self, k).detach()) for k in names}


DEFAULT_WEIGHTS = dict(commit=0.25, recon=1.0, raw=1.0, joints=1.0, vel=0.5)


# ---------------------------------------------------------------------------
# Codebooks
# ---------------------------------------------------------------------------

class CodebookSet(nn.Module):
    """N codebooks of K entries of width ``dim``; trained by EMA, not by gradient."""

    def __init__(self, n_codebooks: int, codebook_size: int, dim: int, decay: float = 0.99,
                 eps: float = 1e-5, reset_threshold: float = 1.0):
        super().__init__()
        self.n_codebooks, self.codebook_size, self.dim = n_codebooks, codebook_size, dim
        self.decay, self.eps, self.reset_threshold = decay, eps, reset_threshold
        g = torch.Generator().manual_seed(0)
        entries = torch.randn(n_codebooks, codebook_size, dim, generator=g)
        self.register_buffer("entries", entries)
        self.register_buffer("ema_cluster_size", torch.ones(n_codebooks, codebook_size))
        self.register_buffer("ema_embed_sum", entries.clone())
        self.register_buffer("usage_count", torch.zeros(n_codebooks, codebook_size))
        self.register_buffer("initialized", torch.zeros(()))

    @property
    def latent_dim(self) -> int:
        return self.n_codebooks * self.dim

    def lookup(self, indices: torch.Tensor) -> torch.Tensor:
        """``(..., N)`` indices to concatenated entries ``(..., c)``."""
        parts = [self.entries[n][indices[..., n]] for n in range(self.n_codebooks)]
        return torch.cat(parts, dim=-1)

    @torch.no_grad()
    def init_from(self, latents: torch.Tensor, rng: np.random.Generator):
        """Seed every entry with a batch latent (with replacement if the batch is small)."""
        x = latents.reshape(-1, self.latent_dim).float()
        if len(x) == 0:
            raise EmptyBatch("cannot initialise codebooks from an empty batch")
        for n in range(self.n_codebooks):
            trunk = x[:, n * self.dim:(n + 1) * self.dim]
            pick = torch.as_tensor(rng.choice(len(trunk), self.codebook_size, replace=len(trunk) < self.codebook_size))
            jitter = torch.as_tensor(rng.normal(0.0, 1e-3, (self.codebook_size, self.dim)), dtype=x.dtype)
            self.entries[n] = trunk[pick] + jitter
        self.ema_embed_sum.copy_(self.entries)
        self.ema_cluster_size.fill_(1.0)
        self.initialized.fill_(1.0)


def quantize(f: torch.Tensor, cb: CodebookSet, chunk: int = 4096):
    """Nearest entry per trunk by Euclidean distance; lowest index wins ties.

    ``f`` is ``(..., c)``. Returns ``(indices (..., N), f_hat (..., c),
    distances (..., N))``. Distances are computed in float64 from explicit
    differences so the choice matches a brute-force scan.
    """
    if f.shape[-1] != cb.latent_dim:
        raise ShapeMismatch(f"latent width {f.shape[-1]} != N*dim = {cb.latent_dim}")
    lead = f.shape[:-1]
    x = f.detach().reshape(-1, cb.n_codebooks, cb.dim).double()
    idx = torch.empty(x.shape[0], cb.n_codebooks, dtype=torch.long)
    dist = torch.empty(x.shape[0], cb.n_codebooks, dtype=torch.float64)
    for n in range(cb.n_codebooks):
        z = cb.entries[n].double()
        for s in range(0, x.shape[0], chunk):
            xs = x[s:s + chunk, n]
            d2 = ((xs.unsqueeze(1) - z.unsqueeze(0)) ** 2).sum(-1)
            best = torch.argmin(d2, dim=1)
            idx[s:s + chunk, n] = best
            dist[s:s + chunk, n] = d2.gather(1, best.unsqueeze(1)).squeeze(1).sqrt()
    idx = idx.reshape(*lead, cb.n_codebooks)
    f_hat = cb.lookup(idx).to(f.dtype)
    return idx, f_hat, dist.reshape(*lead, cb.n_codebooks)


@torch.no_grad()
def ema_update(cb: CodebookSet, indices: torch.Tensor, latents: torch.Tensor):
    """One EMA step of cluster sizes, embedding sums and entries."""
    g = cb.decay
    idx = indices.reshape(-1, cb.n_codebooks)
    x = latents.detach().reshape(-1, cb.n_codebooks, cb.dim).to(cb.entries.dtype)
    for n in range(cb.n_codebooks):
        onehot = F.one_hot(idx[:, n], cb.codebook_size).to(x.dtype)
        counts = onehot.sum(0)
        sums = onehot.t() @ x[:, n]
        cb.ema_cluster_size[n].mul_(g).add_(counts, alpha=1.0 - g)
        cb.ema_embed_sum[n].mul_(g).add_(sums, alpha=1.0 - g)
        cb.entries[n] = cb.ema_embed_sum[n] / (cb.ema_cluster_size[n] + cb.eps).unsqueeze(1)
        cb.usage_count[n].add_(counts)


@torch.no_grad()
def codebook_reset(cb: CodebookSet, latents: torch.Tensor, rng: np.random.Generator) -> int:
    """Re-seed entries whose EMA mass fell below the threshold. Returns the count reset."""
    x = latents.detach().reshape(-1, cb.n_codebooks, cb.dim).to(cb.entries.dtype)
    if x.shape[0] == 0:
        raise EmptyBatch("codebook reset needs batch latents")
    total = 0
    for n in range(cb.n_codebooks):
        dead = torch.nonzero(cb.ema_cluster_size[n] < cb.reset_threshold).flatten()
        if len(dead) == 0:
            continue
        pick = torch.as_tensor(rng.integers(0, x.shape[0], size=len(dead)))
        cb.entries[n, dead] = x[pick, n]
        cb.ema_embed_sum[n, dead] = x[pick, n]
        cb.ema_cluster_size[n, dead] = 1.0
        total += len(dead)
    return total


def perplexity(indices: torch.Tensor, K: int) -> float:
    counts = torch.bincount(indices.reshape(-1), minlength=K).double()
    p = counts / counts.sum()
    return float(torch.exp(-(p * torch.log(p + 1e-12)).sum()))


# ---------------------------------------------------------------------------
# Encoder / decoder
# ---------------------------------------------------------------------------

class ResBlock(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.c1 = Conv1d(width, width, 3, padding=1)
        self.c2 = Conv1d(width, width, 3, padding=1)

    def forward(self, x):
        return x + self.c2(F.relu(self.c1(F.relu(x))))


class MotionEncoder(nn.Module):
    def __init__(self, in_dim: int, width: int, out_dim: int, down_rate: int):
        super().__init__()
        stages = int(round(math.log2(down_rate)))
        if 2 ** stages != down_rate:
            raise ValueError("down-sample rate must be a power of two")
        layers: list[nn.Module] = [Conv1d(in_dim, width, 3, padding=1), nn.ReLU()]
        for _ in range(stages):
            layers += [Conv1d(width, width, 3, stride=2, padding=1), ResBlock(width)]
        layers += [nn.ReLU(), Conv1d(width, out_dim, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):  # [B, C, T] -> [B, c, T/r]
        return self.net(x)


class MotionDecoder(nn.Module):
    def __init__(self, latent_dim: int, width: int, out_dim: int, down_rate: int):
        super().__init__()
        stages = int(round(math.log2(down_rate)))
        layers: list[nn.Module] = [Conv1d(latent_dim, width, 3, padding=1)]
        for _ in range(stages):
            layers += [ResBlock(width), nn.Upsample(scale_factor=2, mode="nearest"),
                       Conv1d(width, width, 3, padding=1)]
        layers += [nn.ReLU(), Conv1d(width, out_dim, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


class MotionTokenizer(nn.Module):
    def __init__(self, n_codebooks: int = 2, codebook_size: int = 256, code_dim: int = 16,
                 down_rate: int = 4, width: int = 128, decay: float = 0.99,
                 reset_threshold: float = 1.0, skeleton: Skeleton | None = None):
        super().__init__()
        self.down_rate = down_rate
        self.skeleton = skeleton or default_skeleton()
        c = n_codebooks * code_dim
        self.encoder = MotionEncoder(FRAME_DIM, width, c, down_rate)
        self.decoder = MotionDecoder(c, width, FRAME_DIM, down_rate)
        self.codebooks = CodebookSet(n_codebooks, codebook_size, code_dim, decay=decay,
                                     reset_threshold=reset_threshold)
        self.register_buffer("mean", torch.zeros(FRAME_DIM))
        self.register_buffer("std", torch.ones(FRAME_DIM))

    @property
    def n_codebooks(self):
        return self.codebooks.n_codebooks

    @property
    def codebook_size(self):
        return self.codebooks.codebook_size

    def set_normalization(self, mean, std):
        self.mean.copy_(torch.as_tensor(mean, dtype=torch.float32))
        self.std.copy_(torch.as_tensor(std, dtype=torch.float32))

    # -- tensor path ------------------------------------------------------

    def encode_frames(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, T, 279)`` -> latents ``(B, T/r, c)``."""
        z = (x - self.mean) / self.std
        return self.encoder(z.transpose(1, 2)).transpose(1, 2)

    def decode_latents(self, f_hat: torch.Tensor) -> torch.Tensor:
        """``(B, T/r, c)`` -> frames ``(B, T, 279)``."""
        y = self.decoder(f_hat.transpose(1, 2)).transpose(1, 2)
        return y * self.std + self.mean

    def forward(self, x: torch.Tensor):
        f = self.encode_frames(x)
        idx, f_hat, _ = quantize(f, self.codebooks)
        f_st = f + (f_hat - f).detach()
        return {"frames": self.decode_latents(f_st), "f": f, "f_hat": f_hat, "indices": idx}

    # -- MotionSequence path ---------------------------------------------

    def _padded(self, m: MotionSequence, strict: bool) -> np.ndarray:
        T, r = m.T, self.down_rate
        if T % r:
            if strict:
                raise LengthNotDivisible(f"T={T} not divisible by r={r}")
            pad = r - T % r
            return np.concatenate([m.frames, np.repeat(m.frames[-1:], pad, axis=0)])
        return m.frames

    @torch.no_grad()
    def encode(self, m: MotionSequence, strict: bool = False) -> np.ndarray:
        x = torch.as_tensor(self._padded(m, strict)).unsqueeze(0)
        return self.encode_frames(x)[0].numpy()

    @torch.no_grad()
    def tokenize(self, m: MotionSequence, strict: bool = False) -> TokenStream:
        x = torch.as_tensor(self._padded(m, strict)).unsqueeze(0)
        idx, _, _ = quantize(self.encode_frames(x)[0], self.codebooks)
        return TokenStream(idx.reshape(-1).numpy(), self.n_codebooks, self.codebook_size,
                           self.down_rate, fps=m.fps, n_frames=m.T)

    @torch.no_grad()
    def decode(self, ts: "TokenStream | np.ndarray | torch.Tensor", fps: float = 60.0,
               initial_root_position=None) -> MotionSequence:
        """Decode a token stream, or quantized latents ``(T/r, c)``, to motion."""
        if isinstance(ts, TokenStream):
            if ts.n_codebooks != self.n_codebooks or ts.codebook_size != self.codebook_size:
                raise BadToken("token stream layout does not match this tokenizer")
            grid = torch.as_tensor(ts.grid())
            f_hat = self.codebooks.lookup(grid)
            n_frames, fps = ts.n_frames, ts.fps
        else:
            f_hat = torch.as_tensor(np.asarray(ts), dtype=torch.float32)
            n_frames = f_hat.shape[0] * self.down_rate
        frames = self.decode_latents(f_hat.unsqueeze(0))[0, :n_frames].numpy()
        rot0 = rot6d_to_matrix(frames[0, ROOT_ROT].astype(np.float64), check=False)
        p0 = np.zeros(3) if initial_root_position is None else initial_root_position
        return MotionSequence(frames, fps=fps, skeleton=self.skeleton,
                              initial_root_position=p0, initial_root_rotation=rot0)

    def reconstruct(self, m: MotionSequence) -> MotionSequence:
        return self.decode(self.tokenize(m), initial_root_position=m.initial_root_position)


def vq_loss(m, m_hat, f, f_hat, weights: dict | None = None, skeleton: Skeleton | None = None,
            beta: float = 1.0) -> VqLossReport:
    """Commitment plus reconstruction losses.

    ``m``/``m_hat`` are frame tensors ``(..., T, 279)`` or MotionSequences.
    The commitment term only trains the encoder (``f_hat`` is detached).
    """
    w = dict(DEFAULT_WEIGHTS)
    w.update(weights or {})
    if isinstance(m, MotionSequence):
        skeleton = skeleton or m.skeleton
        m = torch.as_tensor(m.frames)
    if isinstance(m_hat, MotionSequence):
        m_hat = torch.as_tensor(m_hat.frames)
    skeleton = skeleton or default_skeleton()
    f, f_hat = torch.as_tensor(f), torch.as_tensor(f_hat)
    if m.shape != m_hat.shape:
        raise LengthMismatch(f"motion shapes differ: {tuple(m.shape)} vs {tuple(m_hat.shape)}")
    L_m = smooth_l1(m_hat, m, beta)
    L_j = smooth_l1(forward_kinematics_torch(m_hat, skeleton), forward_kinematics_torch(m, skeleton), beta)
    stored, implied = rotation_velocity_residual(m_hat)
    if stored.shape[-3] > 0:
        L_v = smooth_l1(stored[..., 0, :], implied[..., 0, :], beta) + \
            smooth_l1(stored[..., 1:, :], implied[..., 1:, :], beta)
    else:
        L_v = torch.zeros((), dtype=torch.float64)
    L_c = ((f - f_hat.detach()) ** 2).double().mean()
    L_r = w["raw"] * L_m + w["joints"] * L_j + w["vel"] * L_v
    total = w["commit"] * L_c + w["recon"] * L_r
    return VqLossReport(total, L_c, L_r, L_m, L_j, L_v, w)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def yaw_augment_batch(x: torch.Tensor, angles: np.ndarray) -> torch.Tensor:
    """Apply one yaw per batch element to root velocity and root rotation channels."""
    Y = torch.as_tensor(np.stack([yaw_matrix(a) for a in angles]), dtype=x.dtype)  # B,3,3
    out = x.clone()
    out[..., ROOT_VEL] = x[..., ROOT_VEL] @ Y.transpose(1, 2)
    rr = x[..., ROOT_ROT].reshape(x.shape[0], x.shape[1], 2, 3)
    out[..., ROOT_ROT] = (rr @ Y.transpose(1, 2).unsqueeze(1)).reshape(x.shape[0], x.shape[1], 6)
    return out


def normalization_stats(clips: list[MotionSequence], rng: np.random.Generator, passes: int = 4):
    """Per-channel mean/std over yaw-augmented copies of the corpus."""
    stack = np.concatenate([c.frames for c in clips]).astype(np.float64)
    xs = []
    for _ in range(passes):
        angles = rng.uniform(0, 2 * math.pi, size=len(stack))
        xs.append(yaw_augment_batch(torch.as_tensor(stack).unsqueeze(1), angles)[:, 0].numpy())
    allx = np.concatenate(xs)
    mean = allx.mean(0)
    std = allx.std(0)
    floor = np.full(FRAME_DIM, 1e-2)
    floor[ROOT_VEL] = 1e-3
    return mean, np.maximum(std, floor)


@dataclass
class VqTrainConfig:
    steps: int = 2000
    batch: int = 32
    window: int = 60
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    reset_every: int = 100
    augment: bool = True
    seed: int = 0
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    smooth_l1_beta: float = 1.0
    max_grad_norm: float | None = 1.0


class VqTrainer:
    """Stateful stage-1 trainer; every piece of state round-trips through a checkpoint."""

    def __init__(self, model: MotionTokenizer, clips: list[MotionSequence], cfg: VqTrainConfig):
        if not clips:
            raise EmptyBatch("tokenizer training needs a non-empty corpus")
        self.model, self.cfg = model, cfg
        self.data = [torch.as_tensor(c.frames) for c in clips]
        for c in clips:
            if c.T < cfg.window:
                raise LengthMismatch(f"clip of {c.T} frames shorter than window {cfg.window}")
        self.rng = np.random.default_rng(cfg.seed)
        self.store = ParameterStore.from_module(model)
        self.step = 0
        self.trace: list[dict] = []
        if not bool(model.codebooks.initialized):
            mean, std = normalization_stats(clips, self.rng)
            model.set_normalization(mean, std)

    def sample_batch(self) -> torch.Tensor:
        cfg = self.cfg
        ids = self.rng.integers(0, len(self.data), size=cfg.batch)
        rows = []
        for i in ids:
            clip = self.data[i]
            start = int(self.rng.integers(0, clip.shape[0] - cfg.window + 1))
            rows.append(clip[start:start + cfg.window])
        x = torch.stack(rows)
        if cfg.augment:
            x = yaw_augment_batch(x, self.rng.uniform(0, 2 * math.pi, size=cfg.batch))
        return x

    def train_step(self) -> dict:
        cfg, model = self.cfg, self.model
        model.train()
        x = self.sample_batch()
        cb = model.codebooks
        if not bool(cb.initialized):
            with torch.no_grad():
                cb.init_from(model.encode_frames(x), self.rng)
        out = model(x)
        rep = vq_loss(x, out["frames"], out["f"], out["f_hat"], cfg.weights, model.skeleton,
                      cfg.smooth_l1_beta)
        rep.total.backward()
        adam_step(self.store, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, strict=True,
                  max_grad_norm=cfg.max_grad_norm)
        ema_update(cb, out["indices"], out["f"])
        self.step += 1
        n_reset = 0
        if cfg.reset_every and self.step % cfg.reset_every == 0:
            n_reset = codebook_reset(cb, out["f"], self.rng)
        row = {"step": self.step, **rep.as_dict(),
               "perplexity": perplexity(out["indices"][..., 0], cb.codebook_size), "reset": n_reset}
        self.trace.append(row)
        return row

    def run(self, steps: int | None = None, log_every: int = 0) -> list[dict]:
        target = self.cfg.steps if steps is None else self.step + steps
        while self.step < target:
            row = self.train_step()
            if log_every and self.step % log_every == 0:
                log.info("tokenizer step %d total %.5f joints %.5f ppl %.1f", row["step"],
                         row["total"], row["joints"], row["perplexity"])
        return self.trace

    # -- persistence ------------------------------------------------------

    def state_tensors(self) -> dict[str, torch.Tensor]:
        t = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        t.update(self.store.state_tensors())
        return t

    def state_meta(self) -> dict:
        return {"step": self.step, "rng": self.rng.bit_generator.state, "trace": self.trace}

    def load_state(self, tensors: dict, meta: dict):
        self.model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
        self.store = ParameterStore.from_module(self.model)
        self.store.load_state_tensors(tensors, meta["step"])
        self.step = int(meta["step"])
        self.rng.bit_generator.state = meta["rng"]
        self.trace = list(meta.get("trace", []))


def train_vqvae(clips: list[MotionSequence], model: MotionTokenizer | None = None,
                cfg: VqTrainConfig | None = None, log_every: int = 0) -> VqTrainer:
    cfg = cfg or VqTrainConfig()
    torch.manual_seed(cfg.seed)
    model = model or MotionTokenizer()
    trainer = VqTrainer(model, clips, cfg)
    trainer.run(log_every=log_every)
    return trainer
