import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for naive_ref

from scalesel.pyramid import (
    FeatureMap,
    FeaturePyramid,
    LevelSpec,
    SyntheticSpec,
    Warp,
    gen_synthetic_pair,
)

# Level layout shared by most synthetic fixtures: informative levels 1 and 4
# at fine resolution, noise levels across three scales (image 128x128).
PLANTED_LEVELS = (
    LevelSpec(4, 16, 16, 8.0),
    LevelSpec(4, 16, 16, 8.0),
    LevelSpec(4, 8, 8, 16.0),
    LevelSpec(4, 4, 4, 32.0),
    LevelSpec(4, 16, 16, 8.0),
    LevelSpec(4, 8, 8, 16.0),
)


def planted_spec(seed=0, warp=None, noise_sigma=0.05, num_keypoints=8, informative=(1, 4)):
    return SyntheticSpec(
        levels=PLANTED_LEVELS,
        informative_set=informative,
        signal_dims=3,
        noise_sigma=noise_sigma,
        num_keypoints=num_keypoints,
        warp=warp or Warp("identity"),
        seed=seed,
    )


def planted_pair(seed=0, **kwargs):
    return gen_synthetic_pair(planted_spec(seed=seed, **kwargs))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_pyramid(rng):
    """A 2-level pyramid with random float32 payload, image 64x64."""
    levels = (
        FeatureMap(0, 8.0, rng.standard_normal((4, 8, 8))),
        FeatureMap(1, 16.0, rng.standard_normal((8, 4, 4))),
    )
    return FeaturePyramid(64, 64, levels, rng.standard_normal(8))
