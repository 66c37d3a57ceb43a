import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from control_model import PulseGrid  # noqa: E402
from system_presets import build_qubit_x  # noqa: E402
from webui_utils import import_hyphenated_file  # noqa: E402


@pytest.fixture(scope="session")
def qubit():
    return build_qubit_x()


@pytest.fixture
def random_pulse():
    """Factory for seeded random pulses of amplitude ~ scale"""
    def make(n_channels, M, T, scale, seed=0, smoothing_sigma=0.0):
        rng = np.random.default_rng(seed)
        raw = rng.uniform(-scale, scale, size=(n_channels, M))
        return PulseGrid(T=T, M=M, raw=raw, smoothing_sigma=smoothing_sigma)
    return make


@pytest.fixture(scope="session")
def cli():
    return import_hyphenated_file(os.path.join(ROOT, "vanloan-grape.py"))
