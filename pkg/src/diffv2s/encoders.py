"""Frozen audio-visual representation encoders and the speaker oracle.

Per-frame affine frontends lift visual frames (d_vis) and stacked mel
frames (320) into the shared encoder width; small transformer stacks
contextualize them. Both are pretrained with frame-level content-token
classification (heads discarded afterwards) and then frozen. A separate
small network maps mels to unit-norm speaker embeddings and serves as
the fixed guidance target for prompt training; it is trained with a
speaker-classification objective and likewise frozen.

Encoder layers expose ``prompt_step`` so a prompt token can read each
layer's features without ever being attended to by them; the feature
stream of a prompted forward is therefore the literal unprompted
computation, bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import TrainingFailure, ValidationError


@dataclass(frozen=True)
class EncoderHyper:
    d: int = 64  # paper-scale backbone uses 1024 / 24 layers; toy default trains on CPU
    layers: int = 4
    heads: int = 4
    ff: int = 128
    d_spk: int = 32  # paper-scale speaker embedding is 256
    oracle_hidden: int = 128
    d_vis: int = 16
    vocab_size: int = 32
    n_mels: int = 80
    stack_factor: int = 4

    @property
    def stacked_dim(self) -> int:
        return self.n_mels * self.stack_factor


def stack_mel(mel: torch.Tensor) -> torch.Tensor:
    """Torch mirror of mel.stack_frames: (n_mels x S) -> (S/4 x 4*n_mels).

    Batched (B x n_mels x S) inputs stack per item.
    """
    if mel.dim() == 3:
        return torch.stack([stack_mel(m) for m in mel])
    n_mels, s = mel.shape
    if s % 4 != 0:
        raise ValidationError(f"frame count {s} not divisible by 4")
    return mel.T.reshape(s // 4, 4 * n_mels)


def unstack_mel(x: torch.Tensor) -> torch.Tensor:
    """Torch mirror of mel.unstack_frames: (L x 4*n_mels) -> (n_mels x 4L)."""
    length, width = x.shape
    return x.reshape(length * 4, width // 4).T


def sinusoidal_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos embedding of integer positions, (len(positions) x dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    angles = positions.double()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(len(positions), 1, dtype=torch.float64)], dim=1)
    return emb.float()


class Frontend(nn.Module):
    """Per-frame affine map + GELU from the modality's frame dim to d."""

    def __init__(self, modality: str, in_dim: int, d: int):
        super().__init__()
        self.modality = modality
        self.in_dim = in_dim
        self.proj = nn.Linear(in_dim, d)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.shape[-1] != self.in_dim:
            raise ValidationError(
                f"{self.modality} frontend expects frame dim {self.in_dim}, "
                f"got {frames.shape[-1]}"
            )
        return F.gelu(self.proj(frames))


class EncoderLayer(nn.Module):
    """Pre-LN transformer layer with explicit q/k/v so a prompt stream can
    attend over the feature stream without joining it."""

    def __init__(self, d: int, heads: int, ff: int):
        super().__init__()
        if d % heads != 0:
            raise ValidationError("width must divide evenly across heads")
        self.heads = heads
        self.ln1 = nn.LayerNorm(d)
        self.ln2 = nn.LayerNorm(d)
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.ff = nn.Sequential(nn.Linear(d, ff), nn.GELU(), nn.Linear(ff, d))

    def _attend(self, q_in: torch.Tensor, kv_in: torch.Tensor) -> torch.Tensor:
        b, lq, d = q_in.shape
        h, dh = self.heads, d // self.heads
        q = self.q(q_in).view(b, lq, h, dh).transpose(1, 2)
        k = self.k(kv_in).view(b, -1, h, dh).transpose(1, 2)
        v = self.v(kv_in).view(b, -1, h, dh).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(2, 3) / math.sqrt(dh), dim=-1)
        return self.out((att @ v).transpose(1, 2).reshape(b, lq, d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n = self.ln1(x)
        x = x + self._attend(n, n)
        return x + self.ff(self.ln2(x))

    def prompt_step(self, p: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        """Advance the prompt stream one layer; ``x`` is this layer's
        feature-stream input, which the prompt may read but never alters."""
        pn = self.ln1(p)
        kv = torch.cat([pn, self.ln1(x)], dim=1)
        p = p + self._attend(pn, kv)
        return p + self.ff(self.ln2(p))


class EncoderStack(nn.Module):
    """n-layer self-attention feature extractor over one modality."""

    def __init__(self, d: int, layers: int, heads: int, ff: int,
                 use_positions: bool = True, max_len: int = 1024):
        super().__init__()
        if layers < 2:
            raise ValidationError("encoder stacks need at least 2 layers")
        self.d = d
        self.use_positions = use_positions
        self.layers = nn.ModuleList(EncoderLayer(d, heads, ff) for _ in range(layers))
        self.final_ln = nn.LayerNorm(d)
        self.register_buffer(
            "pos", sinusoidal_embedding(torch.arange(max_len), d), persistent=False
        )
        self.frozen = False

    def embed(self, e: torch.Tensor) -> torch.Tensor:
        if e.shape[-1] != self.d:
            raise ValidationError(f"expected width {self.d}, got {e.shape[-1]}")
        if self.use_positions:
            return e + self.pos[: e.shape[-2]]
        return e

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        x = self.embed(e)
        for layer in self.layers:
            x = layer(x)
        return self.final_ln(x)


def _as_batched(t: torch.Tensor):
    if t.dim() == 2:
        return t[None], True
    return t, False


def encode(stack: EncoderStack, e: torch.Tensor) -> torch.Tensor:
    """Contextual features, same length as the input: (L x d) or (B x L x d)."""
    x, squeeze = _as_batched(e)
    out = stack(x)
    return out[0] if squeeze else out


def visual_frontend(frontend: Frontend, x) -> torch.Tensor:
    """Per-frame visual embedding e_v, (L x d)."""
    x = torch.as_tensor(np.asarray(x), dtype=torch.float32) if not torch.is_tensor(x) else x
    return frontend(x)


def audio_frontend(frontend: Frontend, mel) -> torch.Tensor:
    """Per-frame audio embedding e_a, (S/4 x d); stacks the mel internally."""
    mel = torch.as_tensor(np.asarray(mel), dtype=torch.float32) if not torch.is_tensor(mel) else mel
    return frontend(stack_mel(mel))


class SpeakerGuidanceEncoder(nn.Module):
    """Mel -> unit-norm speaker embedding; the frozen guidance target."""

    def __init__(self, hyper: EncoderHyper):
        super().__init__()
        self.hyper = hyper
        self.net = nn.Sequential(
            nn.Linear(hyper.stacked_dim, hyper.oracle_hidden),
            nn.GELU(),
            nn.Linear(hyper.oracle_hidden, hyper.oracle_hidden),
            nn.GELU(),
        )
        self.embed = nn.Linear(hyper.oracle_hidden, hyper.d_spk)
        self.frozen = False

    def embedding(self, mel) -> torch.Tensor:
        """Pre-normalization embedding; (d_spk,) for one mel, (B x d_spk) batched."""
        if not torch.is_tensor(mel):
            mel = torch.as_tensor(np.asarray(mel), dtype=torch.float32)
        if mel.dim() == 2:
            pooled = self.net(stack_mel(mel)).mean(dim=0)
        else:
            stacked = torch.stack([stack_mel(m) for m in mel])
            pooled = self.net(stacked).mean(dim=1)
        return self.embed(pooled)

    def forward(self, mel) -> torch.Tensor:
        return F.normalize(self.embedding(mel), dim=-1)


def freeze(module: nn.Module) -> None:
    module.eval()
    module.requires_grad_(False)
    if hasattr(module, "frozen"):
        module.frozen = True


def build_frontends(hyper: EncoderHyper):
    return {
        "visual": Frontend("visual", hyper.d_vis, hyper.d),
        "audio": Frontend("audio", hyper.stacked_dim, hyper.d),
    }


def build_stacks(hyper: EncoderHyper, use_positions: bool = True):
    return {
        "visual": EncoderStack(hyper.d, hyper.layers, hyper.heads, hyper.ff, use_positions),
        "audio": EncoderStack(hyper.d, hyper.layers, hyper.heads, hyper.ff, use_positions),
    }


class _Backbone(nn.Module):
    # Frontend + stack + frame classifier used only during pretraining.
    def __init__(self, frontend, stack, d, vocab):
        super().__init__()
        self.frontend = frontend
        self.stack = stack
        self.head = nn.Linear(d, vocab)

    def forward(self, frames):
        return self.head(self.stack(self.frontend(frames)))


def _frame_accuracy(model, frames, labels, batch: int = 64) -> float:
    hits = total = 0
    with torch.no_grad():
        for i in range(0, len(frames), batch):
            pred = model(frames[i : i + batch]).argmax(dim=-1)
            hits += (pred == labels[i : i + batch]).sum().item()
            total += labels[i : i + batch].numel()
    return hits / max(total, 1)


def pretrain_encoders(
    bundles: dict,
    epochs: int,
    seed: int,
    hyper: EncoderHyper = EncoderHyper(),
    lr: float = 1e-3,
    batch: int = 32,
):
    """Pretrain both modality backbones on frame-level token classification.

    ``bundles`` maps split name to data.TensorBundle. Heads are discarded;
    frontends and stacks come back frozen. Returns (frontends, stacks,
    metrics) where metrics records held-out frame accuracy per modality.

    Raises TrainingFailure when held-out accuracy lands below 50%, which
    indicates a broken corpus or config rather than bad luck.
    """
    torch.manual_seed(seed)
    frontends = build_frontends(hyper)
    stacks = build_stacks(hyper)
    train, val = bundles["train"], bundles["val"]
    metrics = {}
    for modality, inputs, val_inputs in (
        ("visual", train.visual, val.visual),
        ("audio", train.stacked, val.stacked),
    ):
        model = _Backbone(frontends[modality], stacks[modality], hyper.d, hyper.vocab_size)
        opt = torch.optim.AdamW(model.parameters(), lr=lr)
        for _ in range(epochs):
            order = torch.randperm(len(inputs))
            for i in range(0, len(order), batch):
                idx = order[i : i + batch]
                logits = model(inputs[idx])
                loss = F.cross_entropy(logits.reshape(-1, hyper.vocab_size),
                                       train.labels[idx].reshape(-1))
                opt.zero_grad()
                loss.backward()
                opt.step()
        model.eval()
        acc = _frame_accuracy(model, val_inputs, val.labels)
        if acc < 0.5:
            raise TrainingFailure(
                f"{modality} encoder pretraining reached only {acc:.1%} held-out accuracy"
            )
        metrics[f"{modality}_frame_accuracy"] = acc
        freeze(frontends[modality])
        freeze(stacks[modality])
    return frontends, stacks, metrics


def pretrain_speaker_oracle(
    bundles: dict,
    epochs: int,
    seed: int,
    hyper: EncoderHyper = EncoderHyper(),
    lr: float = 1e-3,
    batch: int = 32,
):
    """Train the speaker guidance encoder on mel speaker classification.

    The classifier head over train-split speakers is discarded; the
    penultimate d_spk layer, L2-normalized, is the embedding. Returns the
    frozen encoder plus metrics with held-out top-1 speaker accuracy.
    """
    torch.manual_seed(seed)
    train = bundles["train"]
    class_ids = sorted(set(train.speaker.tolist()))
    remap = {s: i for i, s in enumerate(class_ids)}
    oracle = SpeakerGuidanceEncoder(hyper)
    head = nn.Linear(hyper.d_spk, len(class_ids))
    opt = torch.optim.AdamW(list(oracle.parameters()) + list(head.parameters()), lr=lr)
    y_train = torch.tensor([remap[int(s)] for s in train.speaker])
    for _ in range(epochs):
        order = torch.randperm(len(train.mel))
        for i in range(0, len(order), batch):
            idx = order[i : i + batch]
            logits = head(oracle.embedding(train.mel[idx]))
            loss = F.cross_entropy(logits, y_train[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    oracle.eval()
    hits = total = 0
    with torch.no_grad():
        for split in ("val", "test"):
            bundle = bundles[split]
            mask = [int(s) in remap for s in bundle.speaker]
            if not any(mask):
                continue
            keep = torch.tensor(mask)
            logits = head(oracle.embedding(bundle.mel[keep]))
            target = torch.tensor([remap[int(s)] for s in bundle.speaker[keep]])
            hits += (logits.argmax(dim=1) == target).sum().item()
            total += len(target)
    acc = hits / max(total, 1)
    if acc < 0.8:
        raise TrainingFailure(f"speaker oracle reached only {acc:.1%} held-out accuracy")
    freeze(oracle)
    return oracle, {"speaker_accuracy": acc}
