import numpy as np
import pytest
import torch

from hvlformer.config import ExperimentConfig, ModelConfig, TrainConfig, default_class_specs

torch.set_num_threads(1)


def tiny_model_config(**kw) -> ModelConfig:
    """8x8 images, K=3, E=2: small enough for finite differences."""
    base = dict(
        num_classes=3, hierarchy_levels=2, embed_dim=8, latent_dim=8, decoder_layers=2,
        pixel_decoder_layers=2, prompt_tokens=2, image_size=(8, 8), feature_strides=[4, 2],
        num_heads=2, encoder_channels=[4, 6, 6, 8],
    )
    base.update(kw)
    return ModelConfig(**base)


def small_experiment(**train_kw) -> ExperimentConfig:
    """32x32 toy setting used by the short training tests."""
    cfg = ExperimentConfig()
    cfg.model = ModelConfig(embed_dim=32, latent_dim=32, decoder_layers=6, pixel_decoder_layers=3,
                            image_size=(32, 32), feature_strides=[8, 4, 2])
    cfg.train = TrainConfig(lr=1e-3, warmup_iters=10, total_iters=50, labeled_batch=4, unlabeled_batch=4,
                            sre_pretrain_iters=20)
    cfg.data.num_train = 40
    cfg.data.num_val = 16
    cfg.data.labeled_fraction = 0.25
    for k, v in train_kw.items():
        setattr(cfg.train, k, v)
    return cfg


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


@pytest.fixture
def tiny_specs(tiny_cfg):
    return default_class_specs(tiny_cfg.num_classes)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance lines are collected here and repeated in the terminal summary,
# so they survive output capturing
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
