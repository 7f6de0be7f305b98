"""Load corpus splits from disk into torch tensors for the training stages."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .corpus import CorpusManifest
from .fileio import read_f32m


@dataclass
class TensorBundle:
    ids: list
    speaker: torch.Tensor  # (N,) int64
    labels: torch.Tensor  # (N x L) int64 content tokens
    visual: torch.Tensor  # (N x L x d_vis)
    mel: torch.Tensor  # (N x n_mels x S)
    stacked: torch.Tensor  # (N x L x 4*n_mels)

    def __len__(self) -> int:
        return len(self.ids)


def load_split(man: CorpusManifest, split: str) -> TensorBundle:
    records = man.split_records(split)
    mels, visuals = [], []
    for rec in records:
        mels.append(read_f32m(man.root / rec.mel_path))
        visuals.append(read_f32m(man.root / rec.visual_path))
    mel = torch.from_numpy(np.stack(mels))
    stacked = torch.stack([m.T.reshape(m.shape[1] // 4, -1) for m in mel])
    return TensorBundle(
        ids=[rec.id for rec in records],
        speaker=torch.tensor([rec.speaker_id for rec in records], dtype=torch.int64),
        labels=torch.tensor([rec.content for rec in records], dtype=torch.int64),
        visual=torch.from_numpy(np.stack(visuals)),
        mel=mel,
        stacked=stacked,
    )


def load_all_splits(man: CorpusManifest) -> dict:
    return {split: load_split(man, split) for split in ("train", "val", "test")}
