import numpy as np
import pytest

from msalign.config import TrainConfig
from msalign.encoders import TextBatch
from msalign.synth import SynthSpec, synth_dataset


def tiny_config(**changes):
    base = TrainConfig(batch_size=4, epochs=2, channels=3, image_size=8, scale_dims=(4, 6, 8, 10),
                       embed_dim=8, text_len=6, vocab=40, heads=2, patience=100)
    return base.replace(**changes)


def random_text(rng, b, p, vocab, min_len=1):
    lengths = rng.integers(min_len, p + 1, size=b)
    mask = np.arange(p)[None, :] < lengths[:, None]
    ids = np.where(mask, rng.integers(1, vocab, size=(b, p)), 0)
    return TextBatch(ids, mask)


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_dataset():
    spec = SynthSpec(pairs=40, channels=3, height=8, width=8, text_len=6, vocab=40, scale_vocab=4,
                     split_sizes=(24, 8, 8), seed=3)
    return synth_dataset(spec)


@pytest.fixture(scope="session")
def acceptance_dataset():
    return synth_dataset(SynthSpec(pairs=704, split_sizes=(512, 64, 128), seed=0))
