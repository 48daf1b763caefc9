import numpy as np
import pytest
import torch

from streetcompat.data import CatalogImage, ItemRegion, RegionedImage
from streetcompat.netcore import ModelConfig, init_model
from streetcompat.synth import SynthConfig, generate_synthetic_dataset


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def tiny_config():
    return ModelConfig(feature_dim=16, embed_hidden=64, embed_out=64, disc_hidden=64,
                       input_resolution=8, conv_channels=(4, 8))


@pytest.fixture
def tiny_state(tiny_config):
    return init_model(tiny_config, seed=3)


@pytest.fixture(scope="session")
def small_synth():
    cfg = SynthConfig(n_styles=4, persons_per_style=6, items_per_person=3, image_size=96,
                      n_target_train=24, valid_groups_per_style=2, test_groups_per_style=3,
                      valid_comp_per_class=8, test_comp_per_class=10)
    return generate_synthetic_dataset(cfg, seed=11)


def make_person(image_id="img0", person_id="p0", boxes=((0, 0, 10, 10), (10, 10, 20, 20)),
                size=(40, 40), color=(120, 30, 200)):
    pixels = np.zeros(size + (3,), dtype=np.uint8)
    pixels[:] = color
    return RegionedImage(image_id, pixels, person_id, tuple(ItemRegion(b) for b in boxes))


def make_catalog(image_id="cat0", size=(32, 32), color=(10, 200, 90), box=None):
    pixels = np.zeros(size + (3,), dtype=np.uint8)
    pixels[:] = color
    return CatalogImage(image_id, pixels, ItemRegion(box) if box else None)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
