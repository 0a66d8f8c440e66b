from __future__ import annotations

import numpy as np
import pytest

from relsub import synth


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def bias_free_net(seed):
    """Alternate dense and conv bias-free nets with a matching input."""
    r = np.random.default_rng(seed)
    if seed % 2:
        return synth.random_dense_net(seed), r.standard_normal(6)
    return synth.random_conv_net(seed), r.standard_normal((1, 8, 8))
