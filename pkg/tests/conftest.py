import numpy as np
import pytest

from maskpolicy import MimConfig, TargetModel, gen_phantom, patchify


@pytest.fixture(scope="session")
def small_phantom():
    """A tiny phantom shared by model-level tests: shape (8, 16, 16), P=8."""
    vol, labels = gen_phantom(3, (8, 16, 16), 3, 0.05, radius_range=(3.0, 5.0))
    return vol, labels


@pytest.fixture(scope="session")
def small_setup(small_phantom):
    """(model, patches, grid, hog targets) on the tiny phantom."""
    vol, _ = small_phantom
    patches, grid = patchify(vol, 8)
    model = TargetModel(MimConfig(patch_size=8, embed_dim=12, enc_layers=2,
                                  dec_layers=2), vol.shape,
                        np.random.default_rng(11))
    return model, patches, grid, model.hog_targets(patches)
