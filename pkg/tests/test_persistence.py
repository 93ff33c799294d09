import io
import struct

import numpy as np
import pytest
import torch

from conftest import random_motion
from motionlm import pipeline
from motionlm.checkpoint import Checkpoint, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from motionlm.config import load_config
from motionlm.errors import (
    ConfigInvalid,
    CorruptFile,
    FingerprintMismatch,
    FormatError,
    MissingCheckpoint,
    MissingDependencyCheckpoint,
    VersionUnsupported,
)
from motionlm.formats import (
    iter_stream_frames,
    mseq_bytes,
    parse_mseq,
    read_manifest,
    read_mtok,
    read_vemb,
    write_manifest,
    write_mseq,
    write_mtok,
    write_stream_frame,
    write_vemb,
)
from motionlm.kinematics import forward_kinematics
from motionlm.vqvae import TokenStream

TINY = {"tokenizer": {"width": 32, "codebook_size": 32, "code_dim": 8, "reset_every": 5},
        "train": {"vq_batch": 4, "vq_lr": 1e-3}}


# -- formats -----------------------------------------------------------------

def test_mseq_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    m = random_motion(rng, T=30)
    write_mseq(tmp_path / "a.mseq", m)
    m2 = parse_mseq((tmp_path / "a.mseq").read_bytes())
    assert m2.T == 30 and m2.fps == m.fps
    np.testing.assert_array_equal(m2.frames, m.frames.astype(np.float32))
    # positions agree to f32 storage precision
    np.testing.assert_allclose(forward_kinematics(m2), forward_kinematics(m), atol=1e-4)
    np.testing.assert_allclose(m2.initial_root_rotation, m.initial_root_rotation, atol=1e-6)
    np.testing.assert_allclose(m2.initial_root_rotation @ m2.initial_root_rotation.T, np.eye(3), atol=1e-12)


def test_mseq_rejects_bad_input():
    m = random_motion(np.random.default_rng(1), T=8)
    buf = mseq_bytes(m)
    with pytest.raises(FormatError):
        parse_mseq(b"XSEQ1" + buf[5:])
    with pytest.raises(FormatError):
        parse_mseq(buf[:-4])
    with pytest.raises(FormatError):
        parse_mseq(buf + b"\0")
    with pytest.raises(FormatError):
        parse_mseq(buf[:5] + struct.pack("<I", 22) + buf[9:])


def test_mtok_and_vemb_round_trip(tmp_path):
    ts = TokenStream(np.arange(12) % 7, 2, 7, 4, fps=30.0)
    write_mtok(tmp_path / "a.mtok", ts)
    ts2 = read_mtok(tmp_path / "a.mtok")
    np.testing.assert_array_equal(ts2.tokens, ts.tokens)
    assert (ts2.n_codebooks, ts2.codebook_size, ts2.down_rate, ts2.fps) == (2, 7, 4, 30.0)

    v = np.random.default_rng(2).normal(size=(9, 5)).astype(np.float32)
    write_vemb(tmp_path / "a.vemb", v)
    np.testing.assert_array_equal(read_vemb(tmp_path / "a.vemb"), v)
    (tmp_path / "b.vemb").write_bytes((tmp_path / "a.vemb").read_bytes()[:-1])
    with pytest.raises(FormatError):
        read_vemb(tmp_path / "b.vemb")


def test_manifest(tmp_path):
    rows = [{"clip": "a", "n": 1}, {"clip": "b", "n": 2}]
    write_manifest(tmp_path / "m.jsonl", rows)
    assert read_manifest(tmp_path / "m.jsonl") == rows
    (tmp_path / "bad.jsonl").write_text('{"a": 1}\n{oops\n')
    with pytest.raises(FormatError, match=":2:"):
        read_manifest(tmp_path / "bad.jsonl")


def test_stream_frames_with_and_without_video():
    buf = io.BytesIO()
    s = np.arange(6, dtype=np.float32)
    write_stream_frame(buf, s)
    write_stream_frame(buf, s + 1, np.ones(3))
    buf.seek(0)
    frames = list(iter_stream_frames(buf, 6, 3))
    assert frames[0][1] is None and np.array_equal(frames[0][0], s)
    assert np.array_equal(frames[1][1], np.ones(3, np.float32))

    buf = io.BytesIO()
    write_stream_frame(buf, np.zeros(4))
    buf.seek(0)
    with pytest.raises(FormatError):
        list(iter_stream_frames(buf, 6, 3))
    with pytest.raises(FormatError):
        list(iter_stream_frames(io.BytesIO(struct.pack("<I", 24) + b"\0" * 8), 6, 3))


# -- checkpoints -------------------------------------------------------------

def _ck():
    g = torch.Generator().manual_seed(0)
    return Checkpoint("tokenizer", {"w": torch.randn(3, 4, generator=g), "b": torch.randn(4, dtype=torch.float64,
                                                                                          generator=g),
                                    "n": torch.tensor([1, 2, 3]), "flag": torch.tensor([True, False])},
                      {"note": "x", "nested": {"k": [1, 2]}}, "abc")


def test_checkpoint_bit_exact(tmp_path):
    ck = _ck()
    save_checkpoint(ck, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt", "tokenizer", "abc")
    assert back.meta == ck.meta and back.stage == "tokenizer"
    for k, v in ck.tensors.items():
        assert back.tensors[k].dtype == v.dtype
        assert torch.equal(back.tensors[k], v)
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert not [p for p in tmp_path.iterdir() if p.suffix == ".tmp"]


def test_checkpoint_errors(tmp_path):
    buf = to_bytes(_ck())
    for bad in (buf[:-1], buf[:len(buf) // 2], buf[:-40] + bytes([buf[-40] ^ 1]) + buf[-39:]):
        with pytest.raises(CorruptFile):
            from_bytes(bad)
    with pytest.raises(CorruptFile):
        from_bytes(b"garbage" * 10)
    v2 = _ck()
    v2.version = 2
    with pytest.raises(VersionUnsupported):
        from_bytes(to_bytes(v2))

    save_checkpoint(_ck(), tmp_path / "a.ckpt")
    with pytest.raises(MissingCheckpoint):
        load_checkpoint(tmp_path / "nope.ckpt", "tokenizer")
    with pytest.raises(MissingDependencyCheckpoint):
        load_checkpoint(tmp_path / "a.ckpt", "pretrain")
    with pytest.raises(FingerprintMismatch):
        load_checkpoint(tmp_path / "a.ckpt", "tokenizer", "other")
    assert MissingCheckpoint("x").exit_code == 3 and FingerprintMismatch("x").exit_code == 2


def test_tokenizer_resume_matches_uninterrupted(clips, tmp_path):
    cfg = load_config(preset="desk", env={}, overrides=TINY)
    full = pipeline.train_tokenizer(cfg, clips, tmp_path / "full.ckpt", steps=12)
    pipeline.train_tokenizer(cfg, clips, tmp_path / "half.ckpt", steps=6)
    resumed = pipeline.train_tokenizer(cfg, clips, tmp_path / "resumed.ckpt", steps=12,
                                       resume=tmp_path / "half.ckpt")
    assert resumed.step == 12
    a = full.model.state_dict()
    b = resumed.model.state_dict()
    for k in a:
        assert torch.allclose(a[k].double(), b[k].double(), atol=1e-6, rtol=0), k
    assert [r["total"] for r in full.trace] == pytest.approx([r["total"] for r in resumed.trace], abs=1e-6)


def test_resume_under_other_config_refused(clips, tmp_path):
    cfg = load_config(preset="desk", env={}, overrides=TINY)
    pipeline.train_tokenizer(cfg, clips, tmp_path / "a.ckpt", steps=1)
    other = load_config(preset="desk", env={}, overrides={**TINY, "tokenizer": {**TINY["tokenizer"], "code_dim": 4}})
    with pytest.raises(FingerprintMismatch):
        pipeline.train_tokenizer(other, clips, None, steps=2, resume=tmp_path / "a.ckpt")


# -- config ------------------------------------------------------------------

def test_config_layers(tmp_path):
    base = load_config(env={})
    assert base.tokenizer.codebook_size == 8192 and base.train.tasks == ("tracking", "understanding", "m2t", "t2m")
    desk = load_config(preset="desk", env={})
    assert desk.tokenizer.codebook_size == 256 and desk.tokenizer.down_rate == 4
    f = tmp_path / "c.ini"
    f.write_text("[tokenizer]\ncodebook_size = 128\n[inference]\ntop_k = 5\n")
    c = load_config(f, preset="desk", env={"MOTIONLM_TOKENIZER_CODEBOOK_SIZE": "64", "OTHER": "1"})
    assert c.tokenizer.codebook_size == 64 and c.inference.top_k == 5
    c = load_config(f, preset="desk", env={"MOTIONLM_TOKENIZER_CODEBOOK_SIZE": "64"},
                    overrides={"tokenizer": {"codebook_size": 32}})
    assert c.tokenizer.codebook_size == 32


def test_config_fingerprint():
    a = load_config(preset="desk", env={})
    assert a.fingerprint() == load_config(preset="desk", env={}).fingerprint()
    # training knobs do not change the fingerprint, shapes do
    assert a.fingerprint() == load_config(preset="desk", env={}, overrides={"train": {"vq_lr": 0.5}}).fingerprint()
    assert a.fingerprint() != load_config(preset="desk", env={}, overrides={"lm": {"layers": 3}}).fingerprint()


@pytest.mark.parametrize("section,key,value", [
    ("tokenizer", "down_rate", "3"),
    ("tokenizer", "decay", "1.5"),
    ("tokenizer", "codebook_size", "0"),
    ("lm", "heads", "3"),
    ("lm", "freeze_text", "maybe"),
    ("train", "tasks", "tracking,dancing"),
    ("inference", "window", "62"),
    ("inference", "top_k", "0"),
    ("corpus", "sensor_kind", "ten_points"),
])
def test_config_rejects(section, key, value):
    with pytest.raises(ConfigInvalid):
        load_config(env={}, overrides={section: {key: value}})


def test_config_rejects_unknown_and_malformed(tmp_path):
    with pytest.raises(ConfigInvalid):
        load_config(env={}, overrides={"tokenizer": {"colour": "1"}})
    with pytest.raises(ConfigInvalid):
        load_config(env={"MOTIONLM_NOSECTION_X": "1"})
    with pytest.raises(ConfigInvalid):
        load_config(preset="huge", env={})
    f = tmp_path / "bad.ini"
    f.write_text("key without section\n")
    with pytest.raises(ConfigInvalid):
        load_config(f, env={})
    with pytest.raises(ConfigInvalid):
        load_config(tmp_path / "missing.ini", env={})
