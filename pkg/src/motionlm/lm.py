"""Text + motion vocabulary, decoder-only transformer, pre-training and sampling."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autodiff import CausalSelfAttention, ParameterStore, adam_step, token_nll
from .errors import (
    AlreadyExpanded,
    BadToken,
    ContextOverflow,
    EmptyBatch,
    NonFiniteLoss,
    SequenceTooLong,
)
from .vqvae import TokenStream

SPECIALS = ("<bos>", "<eos>", "<mot>", "</mot>", "<pad>")


class Vocabulary:
    """Byte-level text ids, then specials, then ``N*K`` motion ids.

    Motion token ``(n, i)`` maps to ``text_size + len(SPECIALS) + n*K + i``.
    """

    def __init__(self, text_size: int = 256, n_codebooks: int = 2, codebook_size: int = 256):
        if text_size < 256:
            raise ValueError("byte-level text needs at least 256 text ids")
        self.text_size = text_size
        self.n_codebooks = n_codebooks
        self.codebook_size = codebook_size
        for k, name in enumerate(("bos", "eos", "mot", "mot_end", "pad")):
            setattr(self, name, text_size + k)

    @property
    def n_special(self) -> int:
        return len(SPECIALS)

    @property
    def motion_offset(self) -> int:
        return self.text_size + self.n_special

    @property
    def motion_size(self) -> int:
        return self.n_codebooks * self.codebook_size

    @property
    def total_size(self) -> int:
        return self.motion_offset + self.motion_size

    def motion_id(self, n: int, i: int) -> int:
        if not (0 <= n < self.n_codebooks and 0 <= i < self.codebook_size):
            raise BadToken(f"motion token ({n}, {i}) out of range")
        return self.motion_offset + n * self.codebook_size + i

    def motion_pair(self, gid: int) -> tuple[int, int]:
        local = gid - self.motion_offset
        if not 0 <= local < self.motion_size:
            raise BadToken(f"id {gid} is not a motion token")
        return divmod(local, self.codebook_size)

    def is_motion(self, gid: int) -> bool:
        return self.motion_offset <= gid < self.total_size

    def trunk_range(self, n: int) -> tuple[int, int]:
        lo = self.motion_offset + n * self.codebook_size
        return lo, lo + self.codebook_size

    def encode_text(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode_text(self, ids) -> str:
        out = bytearray()
        for t in ids:
            if t == self.eos:
                break
            if 0 <= t < 256:
                out.append(t)
        return out.decode("utf-8", errors="replace")

    def stream_to_ids(self, ts: TokenStream) -> list[int]:
        if ts.n_codebooks != self.n_codebooks or ts.codebook_size != self.codebook_size:
            raise BadToken("token stream layout does not match the vocabulary")
        N = self.n_codebooks
        return [self.motion_id(p % N, int(t)) for p, t in enumerate(ts.tokens)]

    def ids_to_stream(self, ids, down_rate: int = 4, fps: float = 60.0) -> TokenStream:
        N = self.n_codebooks
        if len(ids) % N:
            raise BadToken(f"{len(ids)} motion ids is not a multiple of {N}")
        toks = []
        for p, gid in enumerate(ids):
            n, i = self.motion_pair(int(gid))
            if n != p % N:
                raise BadToken(f"id {gid} belongs to codebook {n}, position expects {p % N}")
            toks.append(i)
        return TokenStream(np.asarray(toks, dtype=np.int64), N, self.codebook_size, down_rate, fps)

    def wrap_motion(self, ts: TokenStream) -> list[int]:
        return [self.mot] + self.stream_to_ids(ts) + [self.mot_end]

    def to_dict(self) -> dict:
        return {"text_size": self.text_size, "n_codebooks": self.n_codebooks,
                "codebook_size": self.codebook_size}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(int(d["text_size"]), int(d["n_codebooks"]), int(d["codebook_size"]))

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.to_dict() == other.to_dict()


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class Block(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = CausalSelfAttention(d_model, heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.fc = nn.Linear(d_model, 4 * d_model)
        self.out = nn.Linear(4 * d_model, d_model)

    def forward(self, x, past=None):
        a, present = self.attn(self.ln1(x), past)
        x = x + a
        x = x + self.out(F.gelu(self.fc(self.ln2(x))))
        return x, present


class MotionLM(nn.Module):
    """Pre-LN GPT with learned positions.

    The output head is kept as a base block plus an optional expansion block
    so logits over the original ids do not change when motion ids are added.
    """

    def __init__(self, vocab_size: int, d_model: int = 256, layers: int = 4, heads: int = 4,
                 max_len: int = 512, seed: int | None = None):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        self.d_model, self.n_layers, self.heads, self.max_len = d_model, layers, heads, max_len
        self.base_vocab = vocab_size
        self.tok_emb = nn.Embedding(vocab_size, d_model)
        self.pos_emb = nn.Parameter(torch.zeros(max_len, d_model))
        self.blocks = nn.ModuleList(Block(d_model, heads) for _ in range(layers))
        self.ln_f = nn.LayerNorm(d_model)
        self.head = nn.Linear(d_model, vocab_size, bias=False)
        self.head_ext: nn.Linear | None = None
        self.expanded = False
        for name, p in self.named_parameters():
            if name.endswith("weight") and p.dim() == 2:
                nn.init.normal_(p, 0.0, 0.02)
            elif name.endswith("bias"):
                nn.init.zeros_(p)
        nn.init.normal_(self.pos_emb, 0.0, 0.01)

    @property
    def vocab_size(self) -> int:
        return self.tok_emb.num_embeddings

    def arch(self) -> dict:
        return {"vocab_size": self.base_vocab, "d_model": self.d_model, "layers": self.n_layers,
                "heads": self.heads, "max_len": self.max_len,
                "expanded_by": self.vocab_size - self.base_vocab if self.expanded else 0}

    @classmethod
    def from_arch(cls, a: dict) -> "MotionLM":
        m = cls(a["vocab_size"], a["d_model"], a["layers"], a["heads"], a["max_len"])
        if a.get("expanded_by"):
            expand_vocab(m, a["expanded_by"])
        return m

    def embed_ids(self, ids: torch.Tensor) -> torch.Tensor:
        if int(ids.max()) >= self.vocab_size or int(ids.min()) < 0:
            raise BadToken("token id outside the model vocabulary")
        return self.tok_emb(ids)

    def logits(self, h: torch.Tensor) -> torch.Tensor:
        out = self.head(h)
        if self.head_ext is not None:
            out = torch.cat([out, self.head_ext(h)], dim=-1)
        return out

    def forward(self, ids: torch.Tensor | None = None, embeds: torch.Tensor | None = None,
                past: list | None = None, start: int = 0):
        """Return ``(logits [B, T, V], presents)``; give exactly one of ids / embeds."""
        x = self.embed_ids(ids) if embeds is None else embeds
        T = x.shape[1]
        if start + T > self.max_len:
            raise ContextOverflow(f"sequence of {start + T} exceeds max_len {self.max_len}")
        x = x + self.pos_emb[start:start + T]
        presents = []
        for k, blk in enumerate(self.blocks):
            x, pr = blk(x, None if past is None else past[k])
            presents.append(pr)
        return self.logits(self.ln_f(x)), presents


def expand_vocab(model: MotionLM, n_new: int, seed: int = 0) -> MotionLM:
    """Append ``n_new`` embedding rows and head outputs, drawn from N(0, 0.02^2)."""
    if n_new == 0:
        return model
    if model.expanded:
        raise AlreadyExpanded("vocabulary has already been expanded")
    g = torch.Generator().manual_seed(seed)
    D = model.d_model
    old = model.tok_emb.weight.data
    emb = nn.Embedding(old.shape[0] + n_new, D)
    emb.weight.data = torch.cat([old, torch.randn(n_new, D, generator=g) * 0.02])
    model.tok_emb = emb
    model.head_ext = nn.Linear(D, n_new, bias=False)
    model.head_ext.weight.data = torch.randn(n_new, D, generator=g) * 0.02
    model.expanded = True
    return model


def text_param_mask(model: MotionLM) -> dict[str, torch.Tensor]:
    """Per-parameter multiplicative gradient masks that freeze the text rows."""
    m = torch.ones_like(model.tok_emb.weight)
    m[:model.base_vocab] = 0.0
    return {"tok_emb.weight": m, "head.weight": torch.zeros_like(model.head.weight)}


# ---------------------------------------------------------------------------
# Incremental decoding
# ---------------------------------------------------------------------------

class DecodeSession:
    """KV-cached decoding state for one sequence."""

    def __init__(self, model: MotionLM):
        self.model = model
        self.past: list | None = None
        self.length = 0

    @torch.no_grad()
    def append(self, ids=None, embeds: torch.Tensor | None = None) -> torch.Tensor:
        """Feed tokens (or soft embeddings [T, D]); return logits [T, V] of the new positions."""
        if embeds is None:
            ids = torch.as_tensor(ids, dtype=torch.long).view(1, -1)
            n = ids.shape[1]
        else:
            embeds = embeds.view(1, -1, self.model.d_model)
            n = embeds.shape[1]
        if n == 0:
            raise ValueError("nothing to append")
        if self.length + n > self.model.max_len:
            raise ContextOverflow(f"session would reach {self.length + n} > max_len {self.model.max_len}")
        logits, self.past = self.model(ids, embeds, past=self.past, start=self.length)
        self.length += n
        return logits[0]


def _pick(logits: torch.Tensor, temperature: float, top_k: int | None, greedy: bool,
          generator: torch.Generator | None) -> int:
    if greedy or temperature <= 0:
        return int(torch.argmax(logits))
    l = logits.double() / temperature
    if top_k is not None and top_k < l.shape[0]:
        kth = torch.topk(l, top_k).values[-1]
        l = l.masked_fill(l < kth, float("-inf"))
    probs = torch.softmax(l, dim=-1)
    return int(torch.multinomial(probs, 1, generator=generator))


def decode_loop(session: DecodeSession, logits: torch.Tensor, max_new: int, temperature: float = 1.0,
                top_k: int | None = None, seed: int | None = None, greedy: bool = False,
                allowed=None, stop_ids=()) -> list[int]:
    """Sample up to ``max_new`` tokens given the logits of the last prefix position.

    ``allowed(step, generated)`` may return a boolean mask over the vocabulary.
    """
    g = torch.Generator().manual_seed(int(seed)) if seed is not None else None
    out: list[int] = []
    for step in range(max_new):
        l = logits.clone()
        if allowed is not None:
            l = l.masked_fill(~allowed(step, out), float("-inf"))
        tok = _pick(l, temperature, top_k, greedy, g)
        out.append(tok)
        if tok in stop_ids or step == max_new - 1:
            break
        logits = session.append([tok])[-1]
    return out


def sample(model: MotionLM, prefix, max_new: int, temperature: float = 1.0, top_k: int | None = None,
           seed: int | None = None, greedy: bool = False, allowed=None, stop_ids=None) -> list[int]:
    """Continue ``prefix`` ids; stops after emitting a stop id (kept in the output)."""
    prefix = list(prefix)
    if not prefix:
        raise ValueError("empty prefix")
    if len(prefix) + max_new > model.max_len + 1:
        raise ContextOverflow(f"prefix {len(prefix)} + {max_new} new tokens exceeds max_len {model.max_len}")
    if not greedy and temperature <= 0:
        raise ValueError("temperature must be positive unless greedy")
    if stop_ids is None:
        stop_ids = ()
    sess = DecodeSession(model)
    logits = sess.append(prefix)[-1]
    return decode_loop(sess, logits, max_new, temperature, top_k, seed, greedy, allowed, stop_ids)


# ---------------------------------------------------------------------------
# Pre-training
# ---------------------------------------------------------------------------

def pad_batch(seqs: list[list[int]], pad: int) -> torch.Tensor:
    L = max(len(s) for s in seqs)
    return torch.tensor([s + [pad] * (L - len(s)) for s in seqs], dtype=torch.long)


def sequence_nll(model: MotionLM, ids: torch.Tensor, loss_mask: torch.Tensor | None = None,
                 pad: int | None = None) -> torch.Tensor:
    """Per-position NLL ``[B, L-1]`` of tokens 2..L, zeroed where not supervised."""
    logits, _ = model(ids[:, :-1])
    nll = token_nll(logits, ids[:, 1:])
    keep = torch.ones_like(nll, dtype=torch.bool)
    if pad is not None:
        keep &= ids[:, 1:] != pad
    if loss_mask is not None:
        keep &= loss_mask[:, 1:]
    return nll * keep, keep


def lm_loss(model: MotionLM, ids: torch.Tensor, pad: int | None = None) -> torch.Tensor:
    nll, keep = sequence_nll(model, ids, pad=pad)
    return nll.sum() / keep.sum()


@dataclass
class PretrainConfig:
    steps: int = 3000
    batch: int = 16
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.95)
    max_grad_norm: float | None = 1.0
    seed: int = 0
    freeze_text: bool = False
    crop_groups: int | None = None  # random crop length in token groups (None = whole stream)


class PretrainTrainer:
    """Next-token training on ``<mot> ids </mot>`` sequences."""

    def __init__(self, model: MotionLM, vocab: Vocabulary, streams: list[TokenStream],
                 cfg: PretrainConfig | None = None):
        if not streams:
            raise EmptyBatch("no token streams to pre-train on")
        self.model, self.vocab, self.cfg = model, vocab, cfg or PretrainConfig()
        self.seqs = [vocab.stream_to_ids(s) for s in streams]
        longest = max(len(s) for s in self.seqs) + 2
        if longest > model.max_len:
            raise SequenceTooLong(f"sequence of {longest} tokens exceeds max_len {model.max_len}")
        self.store = ParameterStore.from_module(model)
        self.rng = np.random.default_rng(self.cfg.seed)
        self.masks = text_param_mask(model) if self.cfg.freeze_text else {}
        self.step = 0
        self.trace: list[dict] = []

    def batch(self) -> torch.Tensor:
        N = self.vocab.n_codebooks
        out = []
        for k in self.rng.integers(0, len(self.seqs), self.cfg.batch):
            s = self.seqs[k]
            if self.cfg.crop_groups:
                groups = len(s) // N
                L = min(self.cfg.crop_groups, groups)
                g0 = int(self.rng.integers(0, groups - L + 1))
                s = s[g0 * N:(g0 + L) * N]
            out.append([self.vocab.mot] + s + [self.vocab.mot_end])
        return pad_batch(out, self.vocab.pad)

    def train_step(self) -> float:
        self.model.train()
        ids = self.batch()
        loss = lm_loss(self.model, ids, pad=self.vocab.pad)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(f"loss became {float(loss)} at step {self.step}")
        loss.backward()
        for name, mask in self.masks.items():
            p = self.store.params[name]
            if p.grad is not None:
                p.grad.mul_(mask)
        adam_step(self.store, self.cfg.lr, *self.cfg.betas, strict=False,
                  max_grad_norm=self.cfg.max_grad_norm)
        self.step += 1
        rec = {"step": self.step, "loss": float(loss.detach())}
        self.trace.append(rec)
        return rec["loss"]

    def run(self, steps: int | None = None, until: float | None = None) -> list[dict]:
        """Train ``steps`` more steps, stopping early once the loss drops below ``until``."""
        for _ in range(self.cfg.steps - self.step if steps is None else steps):
            if self.train_step() < (until if until is not None else -1.0):
                break
        return self.trace

    def state_tensors(self) -> dict[str, torch.Tensor]:
        return self.store.state_tensors()

    def state_meta(self) -> dict:
        return {"step": self.step, "rng": self.rng.bit_generator.state, "trace": self.trace,
                "adam_step": self.store.step, "config": _jsonable(asdict(self.cfg))}

    def load_state(self, tensors: dict, meta: dict):
        self.store.load_state_tensors(tensors, meta["adam_step"])
        self.rng.bit_generator.state = meta["rng"]
        self.step = int(meta["step"])
        self.trace = list(meta["trace"])


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def pretrain_step(model: MotionLM, store: ParameterStore, vocab: Vocabulary, streams: list[TokenStream],
                  lr: float = 3e-4) -> float:
    """One optimizer step on a batch of token streams; returns the loss before the update."""
    if not streams:
        raise EmptyBatch("empty batch")
    seqs = [vocab.wrap_motion(s) for s in streams]
    if max(len(s) for s in seqs) > model.max_len:
        raise SequenceTooLong("token stream longer than the model context")
    loss = lm_loss(model, pad_batch(seqs, vocab.pad), pad=vocab.pad)
    loss.backward()
    adam_step(store, lr, 0.9, 0.95, strict=False)
    return float(loss.detach())
