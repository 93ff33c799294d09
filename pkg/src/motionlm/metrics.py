"""Tracking, tokenizer and captioning metrics plus report writers."""
from __future__ import annotations

import csv
import io
import math
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateConfiguration, EmptyReference, ShapeMismatch, TooShort
from .kinematics import (
    LOWER_BODY,
    UPPER_BODY,
    MotionSequence,
    Skeleton,
    absolute_rotations,
    default_skeleton,
    forward_kinematics,
    geodesic_angle,
)


def _check_pair(gt, pred):
    gt, pred = np.asarray(gt, dtype=np.float64), np.asarray(pred, dtype=np.float64)
    if gt.shape != pred.shape:
        raise ShapeMismatch(f"shape mismatch {gt.shape} vs {pred.shape}")
    return gt, pred


def joint_subset(subset: str, skeleton: Skeleton | None = None) -> list[int]:
    skeleton = skeleton or default_skeleton()
    if subset == "full":
        return list(range(len(skeleton.joint_names)))
    names = {"upper": UPPER_BODY, "lower": LOWER_BODY}[subset]
    return [skeleton.index(n) for n in names]


def mpjpe(gt, pred) -> float:
    """Mean per-joint position error, no alignment, in mm."""
    gt, pred = _check_pair(gt, pred)
    return float(np.linalg.norm(gt - pred, axis=-1).mean() * 1000.0)


def mpjpe_head_aligned(gt, pred, subset: str = "full", skeleton: Skeleton | None = None) -> float:
    """Per-frame translate the prediction so its head meets the ground-truth head."""
    gt, pred = _check_pair(gt, pred)
    skeleton = skeleton or default_skeleton()
    head = skeleton.index("head")
    g = gt - gt[..., head:head + 1, :]
    p = pred - pred[..., head:head + 1, :]
    idx = joint_subset(subset, skeleton)
    return float(np.linalg.norm(g[..., idx, :] - p[..., idx, :], axis=-1).mean() * 1000.0)


def procrustes_align(gt: np.ndarray, pred: np.ndarray, scale: bool = True) -> np.ndarray:
    """Least-squares similarity (or rigid) alignment of ``pred`` (J, 3) onto ``gt``."""
    if gt.shape[0] < 3:
        raise DegenerateConfiguration("Procrustes needs at least 3 joints")
    mu_g, mu_p = gt.mean(0), pred.mean(0)
    G, P = gt - mu_g, pred - mu_p
    if np.linalg.svd(P, compute_uv=False)[1] < 1e-9 or np.linalg.svd(G, compute_uv=False)[1] < 1e-9:
        raise DegenerateConfiguration("joints are collinear")
    U, S, Vt = np.linalg.svd(P.T @ G)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    s = float(np.trace(np.diag(S) @ D) / (P * P).sum()) if scale else 1.0
    return s * P @ R.T + mu_g


def pa_mpjpe(gt, pred, scale: bool = True) -> float:
    """MPJPE after per-frame Procrustes alignment, in mm."""
    gt, pred = _check_pair(gt, pred)
    g = gt.reshape(-1, *gt.shape[-2:])
    p = pred.reshape(-1, *pred.shape[-2:])
    aligned = np.stack([procrustes_align(a, b, scale) for a, b in zip(g, p)])
    return float(np.linalg.norm(g - aligned, axis=-1).mean() * 1000.0)


def accel_error(gt, pred) -> float:
    """Mean norm of the difference of second finite differences, mm/frame^2."""
    gt, pred = _check_pair(gt, pred)
    if gt.shape[0] < 3:
        raise TooShort("acceleration error needs at least 3 frames")
    acc = lambda x: x[2:] - 2 * x[1:-1] + x[:-2]
    return float(np.linalg.norm(acc(gt) - acc(pred), axis=-1).mean() * 1000.0)


def joint_angle_error(gt: MotionSequence, pred: MotionSequence, scope: str = "full") -> float:
    """Mean geodesic angle between rotations, degrees. ``full``: 22 local joints; ``root``."""
    if gt.frames.shape != pred.frames.shape:
        raise ShapeMismatch("motions differ in length")
    gr, gj = absolute_rotations(gt)
    pr, pj = absolute_rotations(pred)
    if scope == "root":
        ang = geodesic_angle(gr, pr)
    elif scope == "full":
        ang = geodesic_angle(gj, pj)
    else:
        raise ValueError(f"unknown scope {scope!r}")
    return float(np.degrees(ang).mean())


# ---------------------------------------------------------------------------
# Text metrics
# ---------------------------------------------------------------------------

_PUNCT = re.compile(r"[^\w\s]")


def tokenize(text: str) -> list[str]:
    return _PUNCT.sub(" ", text.lower()).split()


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(candidates: list[str], references: list[list[str]], n: int = 4) -> float:
    """Corpus BLEU-n in [0, 100]; higher orders use add-one smoothing."""
    if len(candidates) != len(references):
        raise ShapeMismatch("one reference list per candidate required")
    matches = np.zeros(n)
    totals = np.zeros(n)
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        refs_tok = [tokenize(r) for r in refs]
        if not refs_tok or not any(refs_tok):
            raise EmptyReference("every candidate needs a non-empty reference")
        ct = tokenize(cand)
        c_len += len(ct)
        r_len += min((abs(len(r) - len(ct)), len(r)) for r in refs_tok)[1]
        for k in range(1, n + 1):
            cn = _ngrams(ct, k)
            best = Counter()
            for r in refs_tok:
                best |= _ngrams(r, k)
            matches[k - 1] += sum(min(c, best[g]) for g, c in cn.items())
            totals[k - 1] += max(len(ct) - k + 1, 1)
    if c_len == 0 or matches[0] == 0:
        return 0.0
    logs = [math.log(matches[0] / totals[0])]
    logs += [math.log((matches[k] + 1) / (totals[k] + 1)) for k in range(1, n)]
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return 100.0 * bp * math.exp(sum(logs) / n)


def bleu(candidate: str, references: list[str] | str, n: int = 4) -> float:
    if isinstance(references, str):
        references = [references]
    return corpus_bleu([candidate], [references], n)


def _lcs(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """LCS-based F1 in [0, 100]."""
    ref = tokenize(reference)
    if not ref:
        raise EmptyReference("empty reference")
    cand = tokenize(candidate)
    if not cand:
        return 0.0
    lcs = _lcs(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return 100.0 * 2 * p * r / (p + r)


def bertscore(*_args, **_kwargs):
    raise NotImplementedError("BERTScore needs external pretrained weights and is unavailable")


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class TrackingReport:
    full: float = 0.0
    upper: float = 0.0
    lower: float = 0.0
    joint_angle: float = 0.0
    root_angle: float = 0.0
    per_sequence: list[dict] = field(default_factory=list)

    KEYS = ("full", "upper", "lower", "joint_angle", "root_angle")


def tracking_metrics(gt: MotionSequence, pred: MotionSequence) -> dict:
    jg, jp = forward_kinematics(gt), forward_kinematics(pred)
    return {
        "full": mpjpe_head_aligned(jg, jp, "full", gt.skeleton),
        "upper": mpjpe_head_aligned(jg, jp, "upper", gt.skeleton),
        "lower": mpjpe_head_aligned(jg, jp, "lower", gt.skeleton),
        "joint_angle": joint_angle_error(gt, pred, "full"),
        "root_angle": joint_angle_error(gt, pred, "root"),
    }


def evaluate_tracking(pairs: list[tuple[str, MotionSequence, MotionSequence]]) -> TrackingReport:
    """``pairs`` of ``(name, gt, pred)``; aggregate is the mean of per-sequence values."""
    rows = [{"name": name, **tracking_metrics(gt, pred)} for name, gt, pred in pairs]
    agg = {k: float(np.mean([r[k] for r in rows])) if rows else 0.0 for k in TrackingReport.KEYS}
    return TrackingReport(**agg, per_sequence=rows)


@dataclass
class NlpReport:
    bleu1: float = 0.0
    bleu4: float = 0.0
    rougeL: float = 0.0
    per_pair: list[dict] = field(default_factory=list)

    KEYS = ("bleu1", "bleu4", "rougeL")


def evaluate_nlp(candidates: list[str], references: list[str]) -> NlpReport:
    rows = [{"candidate": c, "reference": r, "bleu1": bleu(c, r, 1), "bleu4": bleu(c, r, 4),
             "rougeL": rouge_l(c, r)} for c, r in zip(candidates, references)]
    refs = [[r] for r in references]
    return NlpReport(corpus_bleu(candidates, refs, 1), corpus_bleu(candidates, refs, 4),
                     float(np.mean([r["rougeL"] for r in rows])) if rows else 0.0, rows)


def tokenizer_metrics(pairs: list[tuple[MotionSequence, MotionSequence]]) -> dict:
    """MPJPE / PA-MPJPE / ACCEL of reconstructions, averaged over clips."""
    out = {"mpjpe": [], "pa_mpjpe": [], "accel": []}
    for gt, rec in pairs:
        jg, jr = forward_kinematics(gt), forward_kinematics(rec)
        out["mpjpe"].append(mpjpe(jg, jr))
        out["pa_mpjpe"].append(pa_mpjpe(jg, jr))
        out["accel"].append(accel_error(jg, jr))
    return {k: float(np.mean(v)) for k, v in out.items()}


def report_text(values: dict) -> str:
    return "".join(f"{k}={v:.6f}\n" if isinstance(v, float) else f"{k}={v}\n" for k, v in values.items())


def report_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def summary(report) -> dict:
    return {k: getattr(report, k) for k in report.KEYS}
