import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from data.phantom import make_subject  # noqa: E402
from utils.config import DegradeConfig, ModelConfig  # noqa: E402


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow end-to-end tests')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope='session')
def small_subject():
    """24^3 phantom pair, shared by tests that only read it."""
    return make_subject('small', (24, 24, 24), seed=3, degrade_cfg=DegradeConfig())


@pytest.fixture
def toy_config():
    """8^3 patches, two stages; small enough for float64 gradient checks."""
    return ModelConfig.from_dict({'patch_size': 8, 'embed_dim': 12, 'window_size': 2,
                                  'depths': [2, 2], 'num_heads': [2, 4]})
