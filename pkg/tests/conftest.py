import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from him.perception import NetworkConfig  # noqa: E402


def tiny_network(**overrides) -> NetworkConfig:
    cfg = dict(channels=8, queries=4, encoder_layers=1, decoder_layers=2, heads=2, ffn_mult=2, stem_channels=8,
               backbone_channels=(8, 16), group_norm_groups=2, guidance_heads=2, fuse_channels=8, unet_depth=2,
               trimap_channels=4, alpha_channels=4)
    cfg.update(overrides)
    return NetworkConfig(**cfg)


@pytest.fixture
def tiny_config():
    return tiny_network()


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
