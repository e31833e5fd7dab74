import numpy as np
import pytest

from byol import ByolConfig, init_pair
from config import DataConfig, PipelineConfig, RunConfig
from data import LabeledSentence, LabelTable
from encoder import Encoder, EncoderConfig, TokenizerConfig
from pipeline import prepare_data


TINY_TOKENIZER = TokenizerConfig(vocab_size=64)
TINY_ENCODER = EncoderConfig(embed_dim=6, num_layers=2, hidden_dim=5)
TINY_BYOL = ByolConfig(projector_hidden=8, projector_out=4, predictor_hidden=8, activation="tanh", epochs=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_encoder(rng):
    return Encoder(TINY_ENCODER, TINY_TOKENIZER, rng)


@pytest.fixture
def tiny_pair(tiny_encoder):
    return init_pair(tiny_encoder, TINY_BYOL, seed=5)


@pytest.fixture
def sentences():
    return [
        LabeledSentence("aspirin treats headache in adults", 0),
        LabeledSentence("ibuprofen treats fever and pain", 0),
        LabeledSentence("smoking causes lung cancer often", 1),
        LabeledSentence("obesity causes type two diabetes", 1),
        LabeledSentence("insulin treats diabetes in patients", 0),
        LabeledSentence("asbestos causes mesothelioma in workers", 1),
    ]


@pytest.fixture
def small_cfg(tmp_path):
    """A configuration small enough to run the whole pipeline in seconds."""
    return RunConfig(
        tokenizer=TokenizerConfig(vocab_size=512),
        encoder=EncoderConfig(embed_dim=16, num_layers=2, hidden_dim=16),
        byol=ByolConfig(projector_hidden=16, projector_out=8, predictor_hidden=16, epochs=3),
        pipeline=PipelineConfig(stage1_epochs=2, stage3_epochs=4, joint_epochs=3, batch_size=16, head_hidden=16),
        data=DataConfig(synthetic=True, classes=4, per_class=24),
        output_dir=str(tmp_path / "run"),
    )


@pytest.fixture
def small_data(small_cfg):
    return prepare_data(small_cfg)


@pytest.fixture
def four_labels():
    return LabelTable.for_classes(4)
