import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from diffv2s.encoders import (
    EncoderHyper,
    EncoderStack,
    build_frontends,
    build_stacks,
    encode,
    freeze,
)
from diffv2s.errors import ValidationError
from diffv2s.netio import params_hash
from diffv2s.prompts import (
    SpeakerExtractor,
    build_prompt_mask,
    forward_with_prompt,
    infonce,
    speaker_loss,
    train_prompts,
)

HYPER = EncoderHyper()


def _frozen_stack(seed=0, layers=4, d=64):
    torch.manual_seed(seed)
    stack = EncoderStack(d, layers, 4, 2 * d)
    freeze(stack)
    return stack


def test_prompt_mask_invariants():
    mask = build_prompt_mask(5)
    assert mask.shape == (6, 6)
    assert mask[0].all()
    assert not mask[1:, 0].any()
    assert mask[1:, 1:].all()


def test_features_bit_exact_with_and_without_prompt():
    stack = _frozen_stack(1)
    torch.manual_seed(2)
    for _ in range(100):
        e = torch.randn(12, 64)
        p = torch.randn(64)
        _, f = forward_with_prompt(stack, p, e)
        assert torch.equal(f, encode(stack, e))


def test_prompt_output_matches_joint_masked_forward():
    # Literal joint computation: prompt prepended at index 0, masked
    # attention per build_prompt_mask, recomputed from the layer weights.
    stack = _frozen_stack(3, layers=3)
    torch.manual_seed(4)
    e = torch.randn(6, 64)
    p = torch.randn(64)
    mask = build_prompt_mask(6)

    x = torch.cat([p[None, :], stack.embed(e)], dim=0)
    neg = torch.finfo(torch.float32).min
    for layer in stack.layers:
        n = layer.ln1(x)
        h, dh = layer.heads, 64 // layer.heads
        q = layer.q(n).view(-1, h, dh).transpose(0, 1)
        k = layer.k(n).view(-1, h, dh).transpose(0, 1)
        v = layer.v(n).view(-1, h, dh).transpose(0, 1)
        logits = q @ k.transpose(1, 2) / math.sqrt(dh)
        logits = logits.masked_fill(~mask[None], neg)
        att = torch.softmax(logits, dim=-1)
        x = x + layer.out((att @ v).transpose(0, 1).reshape(-1, 64))
        x = x + layer.ff(layer.ln2(x))
    x = stack.final_ln(x)

    k_n, f = forward_with_prompt(stack, p, e)
    torch.testing.assert_close(k_n, x[0], atol=1e-5, rtol=1e-5)
    torch.testing.assert_close(f, x[1:], atol=1e-5, rtol=1e-5)


def test_zero_prompt_still_feature_dependent():
    stack = _frozen_stack(5)
    torch.manual_seed(6)
    p = torch.zeros(64)
    k1, _ = forward_with_prompt(stack, p, torch.randn(8, 64))
    k2, _ = forward_with_prompt(stack, p, torch.randn(8, 64))
    assert not torch.allclose(k1, k2)


def test_single_layer_uniform_attention_oracle():
    # L=1, one key for the features and two for the prompt; hand-rolled.
    torch.manual_seed(7)
    stack = EncoderStack(8, 2, 2, 16)
    freeze(stack)
    layer = stack.layers[0]
    e = torch.randn(1, 8)
    p = torch.randn(8)

    x0 = stack.embed(e)
    pn = layer.ln1(p[None, :])
    kv = torch.cat([pn, layer.ln1(x0)], dim=0)
    h, dh = layer.heads, 8 // layer.heads
    q = layer.q(pn).view(1, h, dh).transpose(0, 1)
    k = layer.k(kv).view(2, h, dh).transpose(0, 1)
    v = layer.v(kv).view(2, h, dh).transpose(0, 1)
    att = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(dh), dim=-1)
    expected = p[None, :] + layer.out((att @ v).transpose(0, 1).reshape(1, 8))
    expected = expected + layer.ff(layer.ln2(expected))

    got = layer.prompt_step(p[None, None, :], x0[None])[0]
    torch.testing.assert_close(got, expected, atol=1e-6, rtol=1e-6)


def test_infonce_single_pair_is_zero():
    a = F.normalize(torch.randn(1, 32), dim=1)
    b = F.normalize(torch.randn(1, 32), dim=1)
    assert float(infonce(a, b)) == 0.0


def test_infonce_uniform_gallery_is_log_n():
    torch.manual_seed(8)
    for n in (2, 5, 16):
        a = F.normalize(torch.randn(n, 32), dim=1)
        b = F.normalize(torch.randn(1, 32), dim=1).repeat(n, 1)
        assert abs(float(infonce(a, b)) - math.log(n)) < 1e-6


def test_infonce_two_point_arithmetic_oracle():
    # cos(a1,b1)=1, cos(a1,b2)=0, tau=1: first term = -log(e / (e + 1)).
    a = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    b = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    term1 = -math.log(math.e / (math.e + 1.0))
    # Symmetric setup: both rows contribute the same term.
    assert abs(float(infonce(a, b, tau=1.0)) - term1) < 1e-6
    assert abs(term1 - 0.3132616875182228) < 1e-12


def test_infonce_validation():
    a = torch.randn(3, 8)
    with pytest.raises(ValidationError):
        infonce(a, a, tau=0.0)
    with pytest.raises(ValidationError):
        infonce(a, torch.randn(4, 8))


def test_speaker_loss_definitional_sum_and_zero_case():
    torch.manual_seed(9)
    s_v = F.normalize(torch.randn(5, 16), dim=1)
    s_a = F.normalize(torch.randn(5, 16), dim=1)
    s_g = F.normalize(torch.randn(5, 16), dim=1)
    total = speaker_loss(s_v, s_a, s_g, tau=0.07)
    parts = (
        infonce(s_v, s_g, 0.07)
        + infonce(s_a, s_g, 0.07)
        + infonce(s_v, s_a, 0.07)
        + infonce(s_a, s_v, 0.07)
    )
    torch.testing.assert_close(total, parts)
    one = F.normalize(torch.randn(1, 16), dim=1)
    assert float(speaker_loss(one, one, one)) == 0.0
    with pytest.raises(ValidationError):
        speaker_loss(s_v, s_a, s_g[:3])


def test_speaker_loss_blocks_gradient_to_oracle_side():
    torch.manual_seed(10)
    s_v = F.normalize(torch.randn(4, 16), dim=1).requires_grad_()
    s_a = F.normalize(torch.randn(4, 16), dim=1).requires_grad_()
    s_g = F.normalize(torch.randn(4, 16), dim=1).requires_grad_()
    speaker_loss(s_v, s_a, s_g).backward()
    assert s_g.grad is None
    assert s_v.grad is not None and s_a.grad is not None


def test_normalization_scale_invariance():
    torch.manual_seed(11)
    stack = _frozen_stack(11)
    frontends = build_frontends(HYPER)
    stacks = {"visual": stack, "audio": _frozen_stack(12)}
    freeze(frontends["visual"])
    freeze(frontends["audio"])
    ext = SpeakerExtractor(frontends, stacks, HYPER)
    x = torch.randn(8, 16)
    s1, _ = ext.extract_sv(x)
    with torch.no_grad():
        ext.head_visual.weight.mul_(3.0)
        ext.head_visual.bias.mul_(3.0)
    s2, _ = ext.extract_sv(x)
    torch.testing.assert_close(s1, s2, atol=1e-6, rtol=1e-6)


@pytest.fixture(scope="module")
def trained_stack(tiny_bundles):
    from diffv2s.encoders import pretrain_encoders, pretrain_speaker_oracle

    frontends, stacks, _ = pretrain_encoders(tiny_bundles, epochs=60, seed=99, lr=2e-3)
    oracle, _ = pretrain_speaker_oracle(tiny_bundles, epochs=40, seed=7, lr=2e-3)
    return frontends, stacks, oracle


def test_zero_epoch_keeps_initialization(trained_stack, tiny_bundles):
    frontends, stacks, oracle = trained_stack
    ext, _ = train_prompts(tiny_bundles, frontends, stacks, oracle, epochs=0, seed=5)
    torch.manual_seed(5)
    ref = SpeakerExtractor(frontends, stacks, HYPER)
    assert torch.equal(ext.prompt_visual, ref.prompt_visual)
    assert torch.equal(ext.head_visual.weight, ref.head_visual.weight)


def test_train_prompts_deterministic_and_frozen_safe(trained_stack, tiny_bundles):
    frontends, stacks, oracle = trained_stack
    before = params_hash({"sv": stacks["visual"], "o": oracle})
    ext1, m1 = train_prompts(tiny_bundles, frontends, stacks, oracle, epochs=3, seed=5)
    ext2, m2 = train_prompts(tiny_bundles, frontends, stacks, oracle, epochs=3, seed=5)
    assert params_hash({"e": ext1}) == params_hash({"e": ext2})
    assert m1["retrieval_accuracy"] == m2["retrieval_accuracy"]
    assert params_hash({"sv": stacks["visual"], "o": oracle}) == before


def test_embeddings_unit_norm_and_margin(trained_stack, tiny_bundles):
    frontends, stacks, oracle = trained_stack
    ext, metrics = train_prompts(
        tiny_bundles, frontends, stacks, oracle, epochs=150, seed=5
    )
    bundle = tiny_bundles["test"]
    with torch.no_grad():
        s_v, f_v = ext.extract_sv(bundle.visual)
        s_a, _ = ext.extract_sa(bundle.mel[0])
    assert torch.allclose(s_v.norm(dim=1), torch.ones(len(s_v)), atol=1e-6)
    assert abs(float(s_a.norm()) - 1.0) < 1e-6
    assert f_v.shape == (len(bundle), bundle.visual.shape[1], 64)

    sims = s_v @ s_v.T
    same = bundle.speaker[:, None] == bundle.speaker[None, :]
    off = ~torch.eye(len(s_v), dtype=torch.bool)
    assert float(sims[same & off].mean()) > float(sims[~same].mean())
