import sys

import numpy as np
import pytest

from humanfield.body import default_template, pose_body
from humanfield.config import Config


def tiny_config(**overrides) -> Config:
    """A shrunken architecture that keeps every code path but runs in milliseconds."""
    base = dict(
        image_size=16, encoder_widths=(4, 4, 4, 4), map_channels=6, style_dim=8, plane_channels=4,
        plane_resolution=16, plane_base_resolution=4, plane_hidden=4, voxel_grid=9, point_dim=4,
        token_channels=6, heads=3, head_dim=0, decoder_hidden=8, decoder_layers=2, xyz_freqs=3,
        n_samples=8, density_scale=1.0,
    )
    base.update(overrides)
    return Config(**base)


def projector(t, seed=0):
    """Scalar <t, R> with a fixed random R, so every output entry gets a distinct weight."""
    r = np.random.default_rng(seed + t.size).standard_normal(t.shape)
    return (t * r).sum()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def template():
    return default_template()


@pytest.fixture(scope="session")
def bent_state(template):
    theta = np.zeros((template.n_joints, 3))
    theta[1] = [0.2, 0.1, -0.15]
    theta[3] = [0.0, 0.0, 0.9]
    theta[4] = [0.3, 0.0, -0.6]
    return pose_body(template, theta, np.array([0.5, -0.5]))


def tiny_train_config(**overrides) -> Config:
    """tiny_config plus a training setup sized for 16 px frames."""
    base = dict(patch_size=11, rays_per_step=140, epochs=2, jitter=True, seed=3)
    base.update(overrides)
    return tiny_config(**base)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    from humanfield.synthcap import generate_dataset

    root = tmp_path_factory.mktemp("tiny_data")
    return generate_dataset(root, n_subjects=2, n_poses=2, n_views=2, seed=1, n_test_subjects=1, resolution=16)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in module.RESULTS:
            terminalreporter.write_line(line)
