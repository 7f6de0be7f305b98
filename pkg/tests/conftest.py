import numpy as np
import pytest
import torch

from diffv2s.corpus import CorpusConfig, generate_dataset
from diffv2s.data import load_all_splits

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small 6-speaker corpus shared by the training-stage unit tests."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    cfg = CorpusConfig(n_speakers=6, utts_per_speaker=12, content_len=16)
    return generate_dataset(6, 12, master_seed=1234, out_dir=root, cfg=cfg)


@pytest.fixture(scope="session")
def tiny_bundles(tiny_corpus):
    return load_all_splits(tiny_corpus)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
