import numpy as np
import pytest

from avgaze.data import build_chunk_set, load_manifest
from avgaze.model import ModelConfig
from avgaze.synthworld import WorldConfig, generate_world


def small_model_cfg():
    return ModelConfig(input_resolution=16, conv_widths=(4, 4, 8, 8), visual_feat_dim=32, audio_embed_dim=32,
                       temporal_hidden=16, fused_dim=32, audio_hidden=32, pooled_grid=2)


@pytest.fixture(scope="session")
def small_world(tmp_path_factory):
    """A 10-clip, 16x16 world: 8 train clips, 2 test clips, 3 windows each."""
    out = tmp_path_factory.mktemp("world")
    cfg = WorldConfig(seed=11, n_clips=10, frames_per_clip=21, image_size=16)
    manifest = generate_world(cfg, out)
    return cfg, manifest


@pytest.fixture(scope="session")
def small_data(small_world):
    _, manifest = small_world
    return build_chunk_set(load_manifest(manifest), resolution=16)


@pytest.fixture
def model_cfg():
    return small_model_cfg()


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-12))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "avgaze_acceptance", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
