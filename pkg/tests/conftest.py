"""
Shared fixtures. Puts the repository root on sys.path so the flat modules
import the same way the entry points see them.
"""
import os
import sys

import numpy as np
import pandas as pd
import pytest

BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if BASE_DIR not in sys.path:
    sys.path.insert(0, BASE_DIR)

from graph_builder import build_graph  # noqa: E402
from stgt_model import Architecture, StgtModel  # noqa: E402
from synth_data import SynthConfig, generate  # noqa: E402


def line_tables(n=3, dist=1.0):
    """Station and segment tables of a one-way line 700000 -> 700001 -> ..."""
    ids = [str(700000 + k) for k in range(n)]
    stations = pd.DataFrame({"station_id": ids, "latitude": ["34.0"] * n, "longitude": ["-118.0"] * n})
    segments = pd.DataFrame(
        {"from_id": ids[:-1], "to_id": ids[1:], "distance_km": [dist] * (n - 1)}
    )
    return stations, segments


@pytest.fixture
def line_graph():
    stations, segments = line_tables(3)
    return build_graph(stations, segments, omega=0.1)


def small_synth(**kwargs):
    params = dict(num_nodes=5, days=3, step_minutes=15, rush_width_minutes=60.0, lag_steps=1,
                  amplitude=20.0, noise_std=0.5, seed=3)
    params.update(kwargs)
    return SynthConfig(**params)


@pytest.fixture
def synth_pair():
    return generate(small_synth())


def toy_model(graph, mode="gcn", history=4, horizon=2, seed=0, width=4, hidden=5, heads=2):
    arch = Architecture(mode=mode, num_nodes=graph.num_nodes, history_steps=history, horizon_steps=horizon,
                        spatial_width=width, lstm_hidden=hidden, gat_heads=heads)
    return StgtModel.create(arch, graph, seed=seed)


def compare(analytic, numeric, tol=1e-4):
    from tensor_core import relative_error

    assert analytic.shape == numeric.shape
    err = relative_error(analytic, numeric)
    assert err < tol, f"relative error {err:.3e}\nanalytic=\n{analytic}\nnumeric=\n{numeric}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
