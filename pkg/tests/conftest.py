import numpy as np
import pytest

from raclap.dataio import SyntheticSpec, generate_synthetic, load_features
from raclap.model import ClapModel


def random_batch(seed: int, n: int = 4, layers: int = 3, frames: int = 5, d: int = 8,
                 d_text: int = 6):
    """A seeded model plus pooled features for ``n`` pairs."""
    rng = np.random.default_rng(seed)
    model = ClapModel(layers, d, d_text, seed=seed)
    model.speech_layer_weights.logits.value = rng.standard_normal(layers)
    for head in (model.speech_head, model.text_head):
        head.b1.value = 0.1 * rng.standard_normal(head.b1.value.shape)
        head.b2.value = 0.1 * rng.standard_normal(head.b2.value.shape)
    stacks = rng.standard_normal((n, layers, frames, d))
    speech = stacks.mean(axis=2)
    text = rng.standard_normal((n, d_text))
    return model, speech, text


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    return generate_synthetic(SyntheticSpec(num_pairs=32, cluster_separation=5.0, seed=7), root)


@pytest.fixture(scope="session")
def toy_data(toy_corpus):
    return load_features(toy_corpus.manifest)


@pytest.fixture
def toy_model(toy_data):
    return ClapModel(toy_data.num_layers, toy_data.speech_dim, toy_data.text_dim, seed=3)
