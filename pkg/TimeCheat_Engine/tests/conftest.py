import numpy as np
import pytest

from app.models import ISMTSInstance, Observation
from app.run_config import DataConfig, EmbedderConfig, EncoderConfig, HeadConfig, ModelConfig, OptimizerConfig, RunConfig


def make_instance(triples, span=(0.0, 1.0), label=None, queries=()):
    return ISMTSInstance(
        observations=tuple(Observation(int(c), float(t), float(v)) for c, t, v in triples),
        span=span,
        label=label,
        queries=tuple(Observation(int(c), float(t), float(v)) for c, t, v in queries),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def instance_factory():
    return make_instance


@pytest.fixture
def tiny_model_config():
    return ModelConfig(
        patches=2,
        ref_points=2,
        patch_dim=4,
        embedder=EmbedderConfig(layers=1, heads=2, hidden=4),
        encoder=EncoderConfig(layers=1, heads=2),
        head=HeadConfig(time_dim=3, decoder_hidden=4),
    )


@pytest.fixture
def tiny_run_config(tmp_path, tiny_model_config):
    return RunConfig(
        data=DataConfig(synthetic="two-class", synthetic_instances=20),
        model=tiny_model_config,
        optimizer=OptimizerConfig(epochs=2, batch_size=8, lr=1e-2, patience=5),
        seed=3,
        out_dir=str(tmp_path / "run"),
    )


@pytest.fixture
def random_instance(rng):
    def build(num_channels=2, count=12, span=(0.0, 1.0), label=0):
        times = np.sort(rng.uniform(span[0], span[1], size=count))
        channels = rng.integers(0, num_channels, size=count)
        values = rng.standard_normal(count)
        return make_instance(zip(channels, times, values), span=span, label=label)

    return build
