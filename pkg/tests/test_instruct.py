import json
import math

import numpy as np
import pytest
import torch

from motionlm.errors import ContextOverflow, DimMismatch, EmptyOutputSegment, LengthNotDivisible
from motionlm.instruct import (
    INSTRUCTIONS,
    InstructConfig,
    InstructionSample,
    InstructModel,
    InstructTrainer,
    Segment,
    SensorEncoder,
    VideoProjector,
    assemble,
    instruct_loss,
    m2t_sample,
    per_position_loss,
    samples_for_clip,
    t2m_sample,
    tracking_sample,
    understanding_sample,
)
from motionlm.inference import GREEDY, text_to_motion
from motionlm.lm import MotionLM, Vocabulary, expand_vocab
from motionlm.sensors import SensorStream, VideoEmbeddingTrack
from motionlm.synth import derive_sensors, generate_split
from motionlm.vqvae import TokenStream

VOCAB = Vocabulary(256, 2, 16)


def make_model(d=32, max_len=160, video_dim=24, seed=0):
    lm = expand_vocab(MotionLM(VOCAB.motion_offset, d, 1, 2, max_len, seed=seed), VOCAB.motion_size)
    torch.manual_seed(seed)
    return InstructModel(lm, "three_points", video_dim, 16, 4)


def tokens(rng, groups=15):
    return TokenStream(rng.integers(0, 16, size=2 * groups), 2, 16)


@pytest.fixture(scope="module")
def clip():
    return generate_split("train", 1, seed=2, video_dim=24)[0]


def test_sensor_encoder_shapes_and_constant_path():
    enc = SensorEncoder("three_points", d_model=32, width=16)
    s = SensorStream("three_points", np.random.default_rng(0).normal(size=(60, 54)))
    assert enc.encode(s).shape == (15, 32)
    zero = enc(torch.zeros(1, 60, 54))[0]
    assert torch.allclose(zero, zero[:1].expand(15, -1), atol=1e-6)
    with pytest.raises(LengthNotDivisible):
        enc.encode(s.slice(0, 58))
    assert enc.encode(s.slice(0, 58), strict=False).shape[0] == 15
    with pytest.raises(DimMismatch):
        enc.encode(s.to_one_point())
    assert SensorEncoder("one_point", 8, 4).net[0].in_channels == 18


def test_video_projector():
    ident = VideoProjector(8, 8, identity=True)
    x = torch.randn(5, 8)
    assert torch.equal(ident(x), x)
    p = VideoProjector(512, 256)
    v = VideoEmbeddingTrack(np.tile(np.random.default_rng(1).normal(size=(1, 512)), (15, 1)))
    out = p.encode(v)
    assert out.shape == (15, 256) and torch.equal(out[0], out[7])
    with pytest.raises(DimMismatch):
        p(torch.zeros(2, 100))
    with pytest.raises(DimMismatch):
        VideoProjector(4, 8, identity=True)


def test_sample_validation():
    with pytest.raises(EmptyOutputSegment):
        InstructionSample("t2m", [Segment("text", "x")])
    with pytest.raises(ValueError):
        InstructionSample("t2m", [Segment("text", "x", output=True), Segment("text", "y")])
    with pytest.raises(ValueError):
        InstructionSample("dance", [Segment("text", "x", output=True)])


def test_t2m_positions_and_mask():
    model = make_model()
    ts = tokens(np.random.default_rng(0))
    a = assemble(t2m_sample("walk forward", ts), VOCAB, model)
    n_instr = len(INSTRUCTIONS["t2m"].encode())
    assert len(a) == 1 + n_instr + len("walk forward") + 32
    assert a.mask.sum() == 32 and a.mask[-32:].all()
    assert a.targets[-32] == VOCAB.mot and a.targets[-1] == VOCAB.mot_end


def test_tracking_positions(clip):
    model = make_model()
    s = tracking_sample(clip.sensors("three_points"), tokens(np.random.default_rng(1)), clip.video)
    a = assemble(s, VOCAB, model)
    n_instr = len(INSTRUCTIONS["tracking"].encode())
    assert len(a) == 1 + n_instr + 15 + 15 + 32
    assert a.kinds[1 + n_instr:1 + n_instr + 15] == ["video"] * 15
    assert a.kinds[1 + n_instr + 15:1 + n_instr + 30] == ["sensor"] * 15
    assert not a.mask[:-32].any() and a.mask[-32:].all()
    no_video = assemble(tracking_sample(clip.sensors("three_points"), tokens(np.random.default_rng(1))), VOCAB, model)
    assert len(no_video) == len(a) - 15


def test_mask_only_on_output_for_every_task(clip):
    model = make_model()
    ts = tokens(np.random.default_rng(2))
    for task, s in samples_for_clip(clip, ts, sensor_kind="three_points").items():
        a = assemble(s, VOCAB, model)
        out_len = 32 if task in ("tracking", "t2m") else len(clip.narration.encode()) + 1
        assert a.mask.sum() == out_len, task
        assert a.mask[-out_len:].all() and not a.mask[:-out_len].any(), task
        prompt = assemble(s, VOCAB, model, include_output=False)
        assert len(prompt) == len(a) - out_len and not prompt.mask.any()


def test_loss_support_is_output_span_but_inputs_get_gradient(clip):
    model = make_model()
    s = tracking_sample(clip.sensors("three_points"), tokens(np.random.default_rng(3)), clip.video)
    a = assemble(s, VOCAB, model)
    nll, keep = per_position_loss(model, [a], VOCAB)
    assert torch.equal(keep[0], a.mask[1:])
    assert (nll[0][~keep[0]] == 0).all()
    instruct_loss(model, [a], VOCAB).backward()
    assert model.sensor.net[0].weight.grad.abs().sum() > 0
    assert model.video.proj.weight.grad.abs().sum() > 0


def test_empty_output_and_overflow(clip):
    model = make_model(max_len=40)
    with pytest.raises(EmptyOutputSegment):
        assemble(m2t_sample(tokens(np.random.default_rng(0)), ""), VOCAB, model)
    with pytest.raises(ContextOverflow):
        assemble(t2m_sample("x", tokens(np.random.default_rng(0))), VOCAB, model)


def test_serialization_round_trip(clip):
    model = make_model()
    ts = tokens(np.random.default_rng(4))
    for s in samples_for_clip(clip, ts).values():
        back = InstructionSample.from_dict(json.loads(json.dumps(s.to_dict())))
        a, b = assemble(s, VOCAB, model), assemble(back, VOCAB, model)
        assert torch.equal(a.targets, b.targets) and torch.allclose(a.embeds, b.embeds)


def test_task_mixing_is_uniform(clip):
    ts = tokens(np.random.default_rng(5))
    samples = {t: [s] for t, s in samples_for_clip(clip, ts, tasks=("tracking", "understanding")).items()}
    tr = InstructTrainer(make_model(), VOCAB, samples, InstructConfig(tasks=("tracking", "understanding"), batch=2))
    picks = [tr.batch()[0] for _ in range(1000)]
    frac = picks.count("tracking") / 1000
    assert 0.45 < frac < 0.55


def test_step_zero_loss_near_log_vocab(clip):
    model = make_model()
    ts = tokens(np.random.default_rng(6))
    items = [assemble(s, VOCAB, model) for s in samples_for_clip(clip, ts).values()]
    loss = instruct_loss(model, items, VOCAB).detach().item()
    assert abs(loss - math.log(VOCAB.total_size)) / math.log(VOCAB.total_size) < 0.02


def test_single_pair_overfit_reproduces_target():
    model = make_model(d=64)
    ts = tokens(np.random.default_rng(7), groups=6)
    tr = InstructTrainer(model, VOCAB, {"t2m": [t2m_sample("a person jumps", ts)]},
                         InstructConfig(steps=150, batch=2, lr=3e-3, tasks=("t2m",)))
    tr.run()
    model.eval()
    g = text_to_motion("a person jumps", model, None, VOCAB, GREEDY, max_groups=6)
    assert g.ids == VOCAB.wrap_motion(ts) and g.motion is None
