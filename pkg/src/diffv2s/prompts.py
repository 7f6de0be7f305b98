"""Vision-guided speaker embedding extraction via prompt tuning.

One learnable prompt vector per modality is prepended to the frozen
encoder stacks under an asymmetric attention rule: the prompt reads
every layer's features, the features never read the prompt. The final
prompt-slot output, projected to d_spk and L2-normalized, is the
speaker embedding (s_v from video, s_a from audio); the feature stream
passes through untouched.

Prompts and projection heads train against the frozen speaker oracle
with a four-term InfoNCE objective: both modalities toward the oracle
embedding, plus both cross-modal directions.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoders import EncoderHyper, EncoderStack, audio_frontend, visual_frontend
from .errors import FrozenDriftError, ValidationError
from .netio import params_hash


def build_prompt_mask(length: int) -> torch.Tensor:
    """Boolean attention mask for a prompt at index 0 over ``length`` features.

    Row 0 (prompt query) attends everywhere; rows 1..L never attend to
    column 0, so features are computed exactly as if the prompt were
    absent. The decomposed forward below realizes this pattern without
    materializing the joint sequence.
    """
    mask = torch.ones(length + 1, length + 1, dtype=torch.bool)
    mask[1:, 0] = False
    return mask


def feature_states(stack: EncoderStack, e: torch.Tensor):
    """Run the plain encoder, returning (per-layer inputs, final features).

    ``states[i]`` is the feature-stream input to layer i; the prompt
    stream attends over these. The returned features are the literal
    unprompted encoder output.
    """
    x = stack.embed(e)
    states = [x]
    for layer in stack.layers[:-1]:
        x = layer(x)
        states.append(x)
    f = stack.final_ln(stack.layers[-1](x))
    return states, f


def prompt_through(stack: EncoderStack, p: torch.Tensor, states) -> torch.Tensor:
    """Advance the prompt over cached layer states; returns (B x d)."""
    batch = states[0].shape[0]
    ph = p[None, None, :].expand(batch, 1, -1)
    for layer, x in zip(stack.layers, states):
        ph = layer.prompt_step(ph, x)
    return stack.final_ln(ph)[:, 0]


def forward_with_prompt(stack: EncoderStack, p: torch.Tensor, e: torch.Tensor):
    """Prompted forward pass: (k_n, f).

    k_n is the final-layer prompt slot (pre-projection); f equals the
    unprompted encoder output bit-exactly. Differentiable with respect
    to p and e.
    """
    if not stack.frozen:
        raise ValidationError("prompted forward requires a frozen stack")
    if p.shape != (stack.d,):
        raise ValidationError(f"prompt must have shape ({stack.d},), got {tuple(p.shape)}")
    x, squeeze = (e[None], True) if e.dim() == 2 else (e, False)
    states, f = feature_states(stack, x)
    k = prompt_through(stack, p, states)
    if squeeze:
        return k[0], f[0]
    return k, f


def infonce(a: torch.Tensor, b: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    """InfoNCE over matched rows: anchors ``a``, positives/gallery ``b``.

    loss = -(1/N) sum_i log softmax_k(cos(a_i, b_k)/tau)[i]; asymmetric
    in (a, b).
    """
    if tau <= 0:
        raise ValidationError("temperature must be positive")
    if a.shape != b.shape or a.dim() != 2 or len(a) < 1:
        raise ValidationError(f"need matching (N x d) batches, got {a.shape} vs {b.shape}")
    logits = (F.normalize(a, dim=1) @ F.normalize(b, dim=1).T) / tau
    return -F.log_softmax(logits, dim=1).diagonal().mean()


def speaker_loss(s_v, s_a, s_g, tau: float = 0.07) -> torch.Tensor:
    """Four-term contrastive objective; no gradient reaches the oracle side."""
    if not (s_v.shape == s_a.shape == s_g.shape):
        raise ValidationError("speaker embedding batches must share shape")
    s_g = s_g.detach()
    return (
        infonce(s_v, s_g, tau)
        + infonce(s_a, s_g, tau)
        + infonce(s_v, s_a, tau)
        + infonce(s_a, s_v, tau)
    )


class SpeakerExtractor(nn.Module):
    """Trained prompts + projection heads over frozen backbones.

    Only prompts and heads are parameters of this module; the frozen
    frontends and stacks are held by reference so checkpoints and
    optimizers see just the trainable surface.
    """

    def __init__(self, frontends, stacks, hyper: EncoderHyper, init_std: float = 0.02):
        super().__init__()
        self.hyper = hyper
        self.backbones = {
            "visual": (frontends["visual"], stacks["visual"]),
            "audio": (frontends["audio"], stacks["audio"]),
        }
        self.prompt_visual = nn.Parameter(torch.randn(hyper.d) * init_std)
        self.prompt_audio = nn.Parameter(torch.randn(hyper.d) * init_std)
        self.head_visual = nn.Linear(hyper.d, hyper.d_spk)
        self.head_audio = nn.Linear(hyper.d, hyper.d_spk)

    def _extract(self, modality, embedded):
        frontend, stack = self.backbones[modality]
        prompt = self.prompt_visual if modality == "visual" else self.prompt_audio
        head = self.head_visual if modality == "visual" else self.head_audio
        k, f = forward_with_prompt(stack, prompt, embedded)
        return F.normalize(head(k), dim=-1), f

    def extract_sv(self, x):
        """Visual sequence -> (s_v, f_v); accepts (L x d_vis) or batched."""
        return self._extract("visual", visual_frontend(self.backbones["visual"][0], x))

    def extract_sa(self, mel):
        """Mel -> (s_a, f_a); accepts (n_mels x S), differentiable in mel."""
        return self._extract("audio", audio_frontend(self.backbones["audio"][0], mel))


def _speaker_batches(speaker_ids: torch.Tensor, generator: torch.Generator):
    """Yield batches holding one utterance per distinct speaker."""
    by_speaker = {}
    for idx, spk in enumerate(speaker_ids.tolist()):
        by_speaker.setdefault(spk, []).append(idx)
    rounds = min(len(v) for v in by_speaker.values())
    picks = {
        spk: torch.tensor(idxs)[torch.randperm(len(idxs), generator=generator)]
        for spk, idxs in by_speaker.items()
    }
    for r in range(rounds):
        yield torch.tensor([int(picks[spk][r]) for spk in sorted(picks)])


def retrieval_accuracy(extractor, oracle, bundles) -> float:
    """Held-out cross-modal top-1: s_v queries against s_G speaker centroids.

    The gallery holds one centroid per corpus speaker, including the
    fully held-out ones, which act as distractors. Queries are the
    held-out utterances of speakers with training coverage: for
    speakers whose articulation offset was never paired with audio
    during training, no cross-modal alignment is learnable from this
    corpus, so they are gallery-only.
    """
    covered = set(bundles["train"].speaker.tolist())
    with torch.no_grad():
        gallery_embs, gallery_spk = [], []
        for split in ("train", "val", "test"):
            bundle = bundles[split]
            gallery_embs.append(oracle(bundle.mel))
            gallery_spk.append(bundle.speaker)
        embs, spks = torch.cat(gallery_embs), torch.cat(gallery_spk)
        speakers = sorted(set(spks.tolist()))
        centroids = F.normalize(
            torch.stack([embs[spks == s].mean(dim=0) for s in speakers]), dim=1
        )
        hits = total = 0
        for split in ("val", "test"):
            bundle = bundles[split]
            s_v, _ = extractor.extract_sv(bundle.visual)
            nearest = (s_v @ centroids.T).argmax(dim=1)
            for n, true_spk in zip(nearest.tolist(), bundle.speaker.tolist()):
                if true_spk in covered:
                    hits += speakers[n] == true_spk
                    total += 1
    return hits / max(total, 1)


def train_prompts(
    bundles,
    frontends,
    stacks,
    oracle,
    epochs: int,
    seed: int,
    hyper: EncoderHyper = EncoderHyper(),
    lr: float = 1e-4,
    tau: float = 0.07,
):
    """Optimize prompts and projection heads against the frozen oracle.

    Frozen parameters are hash-checked before and after; any drift is an
    internal error. Returns (extractor, metrics) with the held-out
    retrieval accuracy recorded.
    """
    frozen_modules = {
        "frontend_visual": frontends["visual"],
        "frontend_audio": frontends["audio"],
        "stack_visual": stacks["visual"],
        "stack_audio": stacks["audio"],
        "oracle": oracle,
    }
    for name, module in frozen_modules.items():
        if not getattr(module, "frozen", False) and hasattr(module, "frozen"):
            raise ValidationError(f"{name} must be frozen before prompt training")
    hash_before = params_hash(frozen_modules)

    torch.manual_seed(seed)
    extractor = SpeakerExtractor(frontends, stacks, hyper)
    opt = torch.optim.AdamW(extractor.parameters(), lr=lr)
    train = bundles["train"]

    # Frozen-side work is constant across epochs: cache oracle targets and
    # the per-layer feature states each prompt attends over.
    with torch.no_grad():
        s_g_all = oracle(train.mel)
        states_v, _ = feature_states(stacks["visual"], frontends["visual"](train.visual))
        states_a, _ = feature_states(stacks["audio"], frontends["audio"](train.stacked))

    generator = torch.Generator().manual_seed(seed)
    losses = []
    for _ in range(epochs):
        for idx in _speaker_batches(train.speaker, generator):
            s_v = F.normalize(
                extractor.head_visual(
                    prompt_through(stacks["visual"], extractor.prompt_visual,
                                   [s[idx] for s in states_v])
                ),
                dim=1,
            )
            s_a = F.normalize(
                extractor.head_audio(
                    prompt_through(stacks["audio"], extractor.prompt_audio,
                                   [s[idx] for s in states_a])
                ),
                dim=1,
            )
            loss = speaker_loss(s_v, s_a, s_g_all[idx], tau)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())

    if params_hash(frozen_modules) != hash_before:
        raise FrozenDriftError("frozen parameters changed during prompt training")
    extractor.eval()
    metrics = {
        "retrieval_accuracy": retrieval_accuracy(extractor, oracle, bundles),
        "final_loss": losses[-1] if losses else None,
    }
    return extractor, metrics
