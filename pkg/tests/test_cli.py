import io
import subprocess
import sys

import numpy as np
import pytest

from motionlm.cli import main
from motionlm.formats import read_mseq, read_mtok, read_manifest, write_stream_frame
from motionlm.synth import derive_sensors

TINY = ["--set", "tokenizer.width=32", "--set", "tokenizer.codebook_size=32", "--set", "tokenizer.code_dim=8",
        "--set", "lm.d_model=32", "--set", "lm.layers=1", "--set", "lm.heads=2", "--set", "lm.sensor_width=16",
        "--set", "corpus.video_dim=16", "--set", "train.vq_batch=4", "--set", "train.pre_batch=4",
        "--set", "train.ins_batch=4"]


def run(*argv):
    return main([*TINY, *map(str, argv)])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    w = tmp_path_factory.mktemp("cli")
    assert run("gen-corpus", "--out", w / "corpus", "--n-train", 6, "--n-test", 3) == 0
    assert run("train-tokenizer", "--corpus", w / "corpus", "--out", w / "tok.ckpt", "--steps", 3) == 0
    assert run("pretrain", "--corpus", w / "corpus", "--tokenizer", w / "tok.ckpt", "--out", w / "pre.ckpt",
               "--steps", 3) == 0
    assert run("instruct", "--corpus", w / "corpus", "--pretrain", w / "pre.ckpt", "--out", w / "ins.ckpt",
               "--steps", 3) == 0
    return w


def test_corpus_layout(work):
    rows = read_manifest(work / "corpus" / "test.jsonl")
    assert len({r["clip"] for r in rows}) == 3
    m = read_mseq(work / "corpus" / rows[0]["motion"])
    assert m.T == 60


def test_zero_step_tokenizer_is_loadable(work, capsys):
    assert run("train-tokenizer", "--corpus", work / "corpus", "--out", work / "zero.ckpt", "--steps", 0) == 0
    assert run("eval-tokenizer", "--checkpoint", work / "zero.ckpt", "--corpus", work / "corpus") == 0
    assert "mpjpe" in capsys.readouterr().out


def test_track_and_eval(work, capsys):
    assert run("track", "--checkpoint", work / "ins.ckpt", "--corpus", work / "corpus", "--out", work / "trk") == 0
    preds = sorted((work / "trk" / "motions").glob("*.mseq"))
    assert len(preds) == 3
    assert run("eval-tracking", "--gt", work / "corpus" / "motions", "--pred", work / "trk" / "motions",
               "--format", "csv", "--report", work / "trk.csv") == 0
    lines = (work / "trk.csv").read_text().strip().splitlines()
    assert len(lines) == 4

    # a prediction identical to the ground truth scores zero everywhere
    capsys.readouterr()
    gt = work / "corpus" / "motions" / preds[0].name
    assert run("eval-tracking", "--gt", gt, "--pred", gt) == 0
    out = capsys.readouterr().out
    vals = [float(l.rsplit("=", 1)[1]) for l in out.strip().splitlines()]
    assert vals and all(v == 0.0 for v in vals)


def test_generation_commands(work, capsys):
    gt = sorted((work / "corpus" / "motions").glob("*.mseq"))[0]
    video = sorted((work / "corpus" / "video").glob("*.vemb"))[0]
    assert run("narrate", "--checkpoint", work / "ins.ckpt", "--motion", gt, "--video", video, "--seed", 1) == 0
    assert isinstance(capsys.readouterr().out, str)
    assert run("predict", "--checkpoint", work / "pre.ckpt", "--motion", gt, "--horizon", 8,
               "--out", work / "pred.mseq", "--greedy") == 0
    assert read_mseq(work / "pred.mseq").T == 68


def test_track_stream(work):
    gt = read_mseq(sorted((work / "corpus" / "motions").glob("*.mseq"))[0])
    s = derive_sensors(gt).features
    buf = io.BytesIO()
    for t in range(len(s)):
        write_stream_frame(buf, s[t], np.zeros(16) if t % 4 == 0 else None)
    (work / "stream.bin").write_bytes(buf.getvalue())
    assert run("track-stream", "--checkpoint", work / "ins.ckpt", "--input", work / "stream.bin",
               "--out", work / "stream.mseq", "--tokens", work / "stream.mtok", "--init-frames", 20) == 0
    assert read_mseq(work / "stream.mseq").T == 60
    assert len(read_mtok(work / "stream.mtok").tokens) == 30


def test_exit_codes(work, tmp_path, capsys):
    assert run("pretrain", "--corpus", work / "corpus", "--tokenizer", tmp_path / "missing.ckpt",
               "--out", tmp_path / "x.ckpt") == 3
    assert run("track", "--checkpoint", work / "pre.ckpt", "--corpus", work / "corpus", "--out", tmp_path) == 3
    bad = tmp_path / "bad.ini"
    bad.write_text("[tokenizer]\ndown_rate = 3\n")
    assert main(["--config", str(bad), "gen-corpus", "--out", str(tmp_path / "c")]) == 2
    assert main(["--set", "nodot=1", "gen-corpus", "--out", str(tmp_path / "c")]) == 2
    # resuming under a different shape configuration
    assert main([*TINY, "--set", "tokenizer.code_dim=4",
                 "train-tokenizer", "--corpus", str(work / "corpus"), "--out", str(tmp_path / "t.ckpt"),
                 "--resume", str(work / "tok.ckpt")]) == 2
    (tmp_path / "trunc.ckpt").write_bytes((work / "tok.ckpt").read_bytes()[:-10])
    assert run("eval-tokenizer", "--checkpoint", tmp_path / "trunc.ckpt", "--corpus", work / "corpus") != 0
    assert "error:" in capsys.readouterr().err


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "motionlm", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen-corpus", "train-tokenizer", "pretrain", "instruct", "track", "track-stream", "narrate",
                "t2m", "predict", "eval-tracking", "eval-nlp", "eval-tokenizer"):
        assert cmd in out.stdout
