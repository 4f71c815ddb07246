import math
import sys

import pytest

from tailcast.graph import Station, build_graph
from tailcast.model import ModelConfig, NetworkParameters

C = math.log(0.01)


@pytest.fixture
def toy_graph():
    """Five stations, a few hundred km apart, so the 300 km graph is connected but not complete."""
    coords = [(45.0, 7.0), (45.5, 8.0), (46.5, 9.5), (44.2, 6.0), (47.0, 11.5)]
    return build_graph([Station(f"T{i}", lat, lon) for i, (lat, lon) in enumerate(coords)], 300.0)


def small_config(n_features=4, variant="NormalPointMassGPD", **kw):
    base = dict(embed_dim=6, hidden_dim=8, gnn_layers=2, u_global=1.0)
    base.update(kw)
    return ModelConfig(n_features=n_features, variant=variant, **base)


def randomize(net: NetworkParameters, rng, scale=0.5):
    """Replace every weight (including the zero-initialised heads) with random values."""
    for _, t in net.named_parameters():
        t.value = rng.uniform(-scale, scale, size=t.shape)
    return net


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
