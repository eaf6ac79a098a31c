import numpy as np
import pytest
from hypothesis import settings

from mbdepth import synth

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_bundle():
    """Fast textured bundle: 96x72 RGB, 12x9 depth, 8 frames."""
    tremor = synth.TremorParams(n_frames=8, seed=3)
    return synth.render_synthetic_bundle(
        synth.scene_preset("sphere-on-plane"), tremor, size=(96, 72), depth_size=(12, 9), seed=3
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
