"""Shared fixtures. Thread pinning must happen before numpy loads."""

import os

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from kgfusion.encoders import EncoderConfig
from kgfusion.fusion import FusionConfig
from kgfusion.graph import SynthSpec, synth_graph
from kgfusion.model import KgModel, ModelConfig


def micro_config(seed: int = 3, **overrides) -> ModelConfig:
    """Small-but-complete model: every architectural feature, cheap forward."""
    base = dict(
        encoder=EncoderConfig(d_o=32, width=32, n_layers=1, n_heads=2, l_text=8,
                              image_size=16, patch_size=8, vocab_size=512,
                              drop_path_rate=0.1),
        fusion=FusionConfig(d_m=48, n_layers=1, n_heads=2, l_h=8, l_t=8,
                            drop_path_rate=0.1),
        n_relations=4, gnn_layers=2, seed=seed)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def micro_model():
    return KgModel(micro_config())


@pytest.fixture(scope="session")
def small_graph():
    return synth_graph(SynthSpec(n_entities=14, n_relations=4, n_triplets=36,
                                 seed=9, image_size=16, modality_mix=0.5))


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)
