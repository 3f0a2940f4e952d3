import numpy as np
import pytest

from flowvc.config import ModelConfig, TrainConfig
from flowvc.decoder import DecoderConfig, FlowConfig, FusionConfig
from flowvc.dsp import MelConfig
from flowvc.extractor import ExtractorConfig
from flowvc.model import VoiceConversionModel


def small_model_config(seed=0, **overrides) -> ModelConfig:
    """Desk-test-sized model: fast enough for per-test training loops."""
    defaults = dict(
        extractor=ExtractorConfig(num_layers=4, dim=16, channels=(8, 8, 12, 16), seed=seed),
        mel=MelConfig(),
        fusion=FusionConfig(attn_dim=16, heads=2),
        decoder=DecoderConfig(hidden=32, heads=2, levels=2, blocks_per_level=1, ffn_mult=2),
        flow=FlowConfig(),
        codebook_size=24,
        seed=seed,
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


@pytest.fixture
def small_model():
    return VoiceConversionModel(small_model_config())


@pytest.fixture(scope="session")
def tiny_corpus():
    from flowvc.corpus import make_corpus

    return make_corpus(num_speakers=2, utts_per_speaker=4, seed=123)
