import numpy as np
import pytest
import torch

from diffv2s.encoders import (
    EncoderHyper,
    EncoderLayer,
    EncoderStack,
    Frontend,
    audio_frontend,
    build_stacks,
    encode,
    freeze,
    pretrain_encoders,
    pretrain_speaker_oracle,
    stack_mel,
    unstack_mel,
    visual_frontend,
)
from diffv2s.errors import ValidationError
from diffv2s.netio import params_hash

HYPER = EncoderHyper()


def test_visual_frontend_shapes_and_bias_rows():
    torch.manual_seed(0)
    fe = Frontend("visual", 16, 64)
    out = visual_frontend(fe, torch.zeros(32, 16))
    assert out.shape == (32, 64)
    assert torch.equal(out[0], out[17])  # zero input -> bias-only rows
    with pytest.raises(ValidationError):
        visual_frontend(fe, torch.zeros(32, 15))


def test_frontend_locality():
    torch.manual_seed(1)
    fe = Frontend("visual", 16, 64)
    x = torch.randn(32, 16)
    y = x.clone()
    y[7] += 1.0
    diff = (visual_frontend(fe, x) != visual_frontend(fe, y)).any(dim=1)
    assert diff[7] and diff.sum() == 1


def test_audio_frontend_stacks_and_locality():
    torch.manual_seed(2)
    fe = Frontend("audio", 320, 64)
    mel = torch.randn(80, 128)
    out = audio_frontend(fe, mel)
    assert out.shape == (32, 64)
    bumped = mel.clone()
    bumped[3, 21] += 1.0  # frame 21 lives in stacked row 5
    diff = (audio_frontend(fe, bumped) != out).any(dim=1)
    assert diff[5] and diff.sum() == 1
    with pytest.raises(ValidationError):
        audio_frontend(fe, torch.randn(80, 126))


def test_stack_mel_roundtrip_matches_numpy():
    from diffv2s.mel import MelConfig, stack_frames

    mel = torch.randn(80, 24)
    stacked = stack_mel(mel)
    assert np.array_equal(stacked.numpy(), stack_frames(mel.numpy(), MelConfig()))
    assert torch.equal(unstack_mel(stacked), mel)


def test_single_frame_attention_is_value_path():
    torch.manual_seed(3)
    layer = EncoderLayer(64, 4, 128)
    x = torch.randn(1, 1, 64)
    with torch.no_grad():
        n = layer.ln1(x)
        manual = x + layer.out(layer.v(n))
        manual = manual + layer.ff(layer.ln2(manual))
        assert torch.equal(layer(x), manual)


def test_encode_permutation_equivariance_without_positions():
    torch.manual_seed(4)
    stack = EncoderStack(64, 3, 4, 128, use_positions=False)
    stack.eval()
    e = torch.randn(8, 64)
    perm = torch.randperm(8)
    with torch.no_grad():
        out = encode(stack, e)
        out_perm = encode(stack, e[perm])
    torch.testing.assert_close(out[perm], out_perm, atol=1e-5, rtol=1e-5)


def test_encode_shape_and_determinism():
    torch.manual_seed(5)
    stack = build_stacks(HYPER)["visual"]
    e = torch.randn(32, 64)
    with torch.no_grad():
        a = encode(stack, e)
        b = encode(stack, e)
    assert a.shape == (32, 64)
    assert torch.isfinite(a).all()
    assert torch.equal(a, b)


@pytest.fixture(scope="module")
def pretrained(tiny_bundles):
    return pretrain_encoders(tiny_bundles, epochs=60, seed=99, lr=2e-3)


def test_pretrain_accuracy_and_freeze(pretrained, tiny_bundles):
    frontends, stacks, metrics = pretrained
    assert metrics["visual_frame_accuracy"] >= 0.8
    assert metrics["audio_frame_accuracy"] >= 0.8
    for module in (*frontends.values(), *stacks.values()):
        assert getattr(module, "frozen", True)
        assert all(not p.requires_grad for p in module.parameters())


def test_pretrain_deterministic(tiny_bundles, pretrained):
    frontends, stacks, _ = pretrained
    frontends2, stacks2, _ = pretrain_encoders(tiny_bundles, epochs=60, seed=99, lr=2e-3)
    assert params_hash({"fv": frontends["visual"], "sv": stacks["visual"]}) == params_hash(
        {"fv": frontends2["visual"], "sv": stacks2["visual"]}
    )


@pytest.fixture(scope="module")
def oracle(tiny_bundles):
    enc, metrics = pretrain_speaker_oracle(tiny_bundles, epochs=40, seed=7, lr=2e-3)
    return enc, metrics


def test_oracle_accuracy_norm_and_freeze(oracle, tiny_bundles):
    enc, metrics = oracle
    assert metrics["speaker_accuracy"] >= 0.95
    assert enc.frozen
    emb = enc(tiny_bundles["test"].mel[0])
    assert abs(float(emb.norm()) - 1.0) < 1e-6


def test_oracle_margin(oracle, tiny_bundles):
    enc, _ = oracle
    bundle = tiny_bundles["test"]
    with torch.no_grad():
        embs = enc(bundle.mel)
    sims = embs @ embs.T
    same = bundle.speaker[:, None] == bundle.speaker[None, :]
    off_diag = ~torch.eye(len(embs), dtype=torch.bool)
    intra = sims[same & off_diag].mean()
    inter = sims[~same].mean()
    assert intra - inter >= 0.2


def test_oracle_deterministic(tiny_bundles, oracle):
    enc, _ = oracle
    enc2, _ = pretrain_speaker_oracle(tiny_bundles, epochs=40, seed=7, lr=2e-3)
    assert params_hash({"o": enc}) == params_hash({"o": enc2})


def test_freeze_is_bit_stable():
    torch.manual_seed(8)
    stack = EncoderStack(32, 2, 4, 64)
    freeze(stack)
    before = params_hash({"s": stack})
    with torch.no_grad():
        encode(stack, torch.randn(4, 32))
    assert params_hash({"s": stack}) == before
