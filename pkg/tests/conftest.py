import numpy as np
import pytest
import torch

from tsalign.backbone import BackboneConfig
from tsalign.data import SynthComponent, SynthSpec, generate_synthetic
from tsalign.encode import EncoderConfig
from tsalign.train import PatchSpec

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _seeded():
    # every test starts from the same RNG state; tests that care about seeds
    # set their own explicitly
    np.random.seed(0)
    torch.manual_seed(0)
    yield


@pytest.fixture
def toy_patching() -> PatchSpec:
    return PatchSpec(t_in=32, patch_len=8, stride=4)


@pytest.fixture
def toy_encoder_config() -> EncoderConfig:
    return EncoderConfig(patch_len=8, embed_dim=16, max_patches=16)


@pytest.fixture
def toy_backbone_config() -> BackboneConfig:
    return BackboneConfig(l=2, d=16, heads=2, max_positions=16)


def make_sine_series(length=512, channels=2, seed=0, sigma=0.0, period=24, amplitude=1.0):
    components = [SynthComponent(kind="sine", amplitude=amplitude, period_steps=period)]
    if sigma > 0:
        components.append(SynthComponent(kind="noise", sigma=sigma))
    return generate_synthetic(
        SynthSpec(length=length, components=tuple(components), channels=channels, seed=seed)
    )


@pytest.fixture
def sine_series():
    return make_sine_series()
