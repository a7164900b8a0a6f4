import pytest
import torch

from virtstain.backbone import FeatureProcessor, toy_backbone
from virtstain.generator import GeneratorConfig, build_generator


def tiny_generator_config(**overrides) -> GeneratorConfig:
    """Desk-scale analog of the canonical architecture: 64-px, 3 levels."""
    base = dict(
        resolution=64,
        encoder_channels=(16, 32, 64),
        bottleneck_blocks=2,
        attention=True,
        cond_scales=(16, 32),
        cond_channels=32,
        embedding_dim=8,
        num_classes=4,
        edge_channels=4,
        spade_hidden=16,
    )
    base.update(overrides)
    return GeneratorConfig(**base).validate()


@pytest.fixture(scope="session")
def tiny_cfg() -> GeneratorConfig:
    return tiny_generator_config()


@pytest.fixture(scope="session")
def tiny_backbone():
    return toy_backbone(seed=7, token_dim=64)


@pytest.fixture()
def tiny_processor(tiny_cfg, tiny_backbone) -> FeatureProcessor:
    torch.manual_seed(5)
    return FeatureProcessor(
        token_dim=tiny_backbone.token_dim,
        channels=tiny_cfg.cond_channels,
        scales=tiny_cfg.cond_scales,
        resblocks=1,
    )


@pytest.fixture()
def tiny_generator(tiny_cfg):
    return build_generator(tiny_cfg, seed=3)
