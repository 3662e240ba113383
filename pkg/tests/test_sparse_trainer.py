import logging

import numpy as np
import pytest

import sparse_trainer
from conftest import small_synth, toy_model
from speed_dataset import Normalizer, make_windows, split
from sparse_trainer import (
    HISTORY_COLUMNS,
    SPARSITY_GRID,
    SparseState,
    SparsityError,
    drop_and_grow,
    erk_densities,
    erk_init,
    init_model_masks,
    masked_step,
    sparsity_report,
    train,
)
from stgt_model import SgdMomentum
from synth_data import generate


class ParamHolder:
    """Bare stand-in exposing parameters() like StgtModel."""

    def __init__(self, params):
        self._params = params

    def parameters(self):
        return self._params


def erk_oracle(shapes, d):
    """Proportional ERK allocation without any dense-layer clipping."""
    sizes = {k: float(np.prod(s)) for k, s in shapes.items()}
    raw = {k: float(sum(s)) / sizes[k] for k, s in shapes.items()}
    scale = (1 - d) * sum(sizes.values()) / sum(raw[k] * sizes[k] for k in shapes)
    return {k: scale * raw[k] for k in shapes}


@pytest.fixture
def toy_data():
    graph, series = generate(small_synth())
    train_set, val_set, test_set = split(make_windows(series, 4, 2))
    return graph, train_set, val_set, Normalizer.fit(train_set)


# --- ERK ----------------------------------------------------------------------------

def test_erk_dense_limit():
    state = erk_init({"a": (3, 4), "b": (4, 2)}, 0.0)
    assert all(np.all(m == 1.0) for m in state.masks.values())


def test_erk_single_layer_half():
    state = erk_init({"w": (4, 4)}, 0.5, seed=7)
    assert state.active_counts() == {"w": 8}


def test_erk_two_layers_match_oracle():
    shapes = {"small": (10, 10), "big": (10, 1000)}
    densities = erk_densities(shapes, 0.9)
    oracle = erk_oracle(shapes, 0.9)
    for name in shapes:
        assert densities[name] == pytest.approx(oracle[name], abs=1e-9)
    assert densities["small"] > densities["big"]

    state = erk_init(shapes, 0.9, seed=1)
    target_active = 0.1 * (100 + 10000)
    assert abs(state.total_active() - target_active) <= len(shapes)
    for name, shape in shapes.items():
        assert abs(state.active_counts()[name] - densities[name] * np.prod(shape)) <= 0.5


def test_erk_dense_layer_rescales_the_rest():
    shapes = {"tiny": (2, 2), "big": (100, 100)}
    densities = erk_densities(shapes, 0.5)
    assert densities["tiny"] == 1.0
    assert 0 < densities["big"] < 1
    state = erk_init(shapes, 0.5)
    assert abs(state.total_active() - 0.5 * 10004) <= 2


def test_erk_errors():
    with pytest.raises(SparsityError):
        erk_densities({"w": (4, 4)}, 1.0)
    with pytest.raises(SparsityError):
        erk_densities({"w": (4, 4)}, -0.1)
    with pytest.raises(SparsityError, match="no active weight"):
        erk_init({"w": (1, 1000)}, 0.9999)


def test_erk_same_seed_same_masks():
    a = erk_init({"w": (8, 8)}, 0.5, seed=3)
    b = erk_init({"w": (8, 8)}, 0.5, seed=3)
    assert np.array_equal(a.masks["w"], b.masks["w"])


# --- drop and grow -----------------------------------------------------------------

def test_drop_and_grow_toy_layer():
    w = np.array([
        [0.9, 0.0, -0.1, 0.0],
        [0.0, 0.5, 0.0, -0.7],
        [0.05, 0.0, 0.3, 0.0],
        [0.0, -0.4, 0.0, 0.8],
    ])
    mask = (w != 0).astype(float)
    grads = np.zeros((4, 4))
    grads[0, 1] = -3.0
    grads[3, 2] = 2.0
    grads[1, 0] = 0.5
    state = SparseState(masks={"w": mask}, sparsity=0.5, death_rate=0.25)
    events = drop_and_grow(ParamHolder({"w": w}), state, {"w": grads})

    new = state.masks["w"]
    assert int(new.sum()) == 8
    # the two smallest active magnitudes are 0.05 (2,0) and -0.1 (0,2)
    assert np.array_equal(events[0].dropped, [2, 8])
    # the two largest gradients on inactive positions are (0,1) and (3,2)
    assert np.array_equal(events[0].grown, [1, 14])
    assert (state.mask_updates, state.weights_exchanged) == (1, 2)
    assert new[0, 1] == 1.0 and new[3, 2] == 1.0 and new[2, 0] == 0.0 and new[0, 2] == 0.0
    assert w[0, 1] == 0.0 and w[3, 2] == 0.0
    assert w[2, 0] == 0.0 and w[0, 2] == 0.0
    assert w[0, 0] == 0.9


def test_grow_ties_take_lowest_index():
    w = np.zeros((3, 3))
    mask = np.zeros((3, 3))
    w[2, 2], w[2, 1], w[1, 2] = 1.0, 2.0, 3.0
    mask[2, 2] = mask[2, 1] = mask[1, 2] = 1.0
    state = SparseState(masks={"w": mask}, sparsity=0.6, death_rate=0.34)
    events = drop_and_grow(ParamHolder({"w": w}), state, {"w": np.zeros((3, 3))})
    assert np.array_equal(events[0].grown, [0])
    assert int(state.masks["w"].sum()) == 3


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_drop_and_grow_matches_full_sort(seed):
    rng = np.random.default_rng(seed)
    mask = np.zeros(64)
    mask[rng.choice(64, 32, replace=False)] = 1.0
    mask = mask.reshape(8, 8)
    w = rng.standard_normal((8, 8)) * mask
    grads = rng.standard_normal((8, 8))
    before_mask, before_w = mask.copy(), w.copy()
    state = SparseState(masks={"w": mask}, sparsity=0.5, death_rate=0.3)
    drop_and_grow(ParamHolder({"w": w}), state, {"w": grads})

    n_move = int(np.floor(0.3 * 32 + 0.5))
    flat_w, flat_g, flat_m = before_w.ravel(), grads.ravel(), before_mask.ravel()
    active = sorted((abs(flat_w[i]), i) for i in range(64) if flat_m[i] == 1)
    inactive = sorted((-abs(flat_g[i]), i) for i in range(64) if flat_m[i] == 0)
    expected_drop = {i for _, i in active[:n_move]}
    expected_grow = {i for _, i in inactive[:n_move]}

    new = state.masks["w"].ravel()
    assert {i for i in range(64) if flat_m[i] == 1 and new[i] == 0} == expected_drop
    assert {i for i in range(64) if flat_m[i] == 0 and new[i] == 1} == expected_grow
    assert new.sum() == 32


def test_drop_and_grow_clamps_near_dense(caplog):
    mask = np.ones((3, 3))
    mask[1, 1] = 0.0
    w = np.arange(1.0, 10.0).reshape(3, 3) * mask
    state = SparseState(masks={"w": mask}, sparsity=0.1, death_rate=0.5)
    with caplog.at_level(logging.WARNING, logger="sparse_stgt.trainer"):
        events = drop_and_grow(ParamHolder({"w": w}), state, {"w": np.ones((3, 3))})
    assert "inactive positions" in caplog.text
    assert events[0].dropped.size == 1 and events[0].grown.size == 1
    assert int(state.masks["w"].sum()) == 8


def test_drop_and_grow_resets_velocity():
    rng = np.random.default_rng(5)
    mask = np.zeros(16)
    mask[:8] = 1.0
    mask = mask.reshape(4, 4)
    w = rng.standard_normal((4, 4)) * mask
    opt = SgdMomentum(0.1, 0.9)
    opt.step({"w": w}, {"w": rng.standard_normal((4, 4))}, {"w": mask})
    state = SparseState(masks={"w": mask}, sparsity=0.5, death_rate=0.25)
    events = drop_and_grow(ParamHolder({"w": w}), state, {"w": rng.standard_normal((4, 4))}, opt)
    moved = np.concatenate([events[0].dropped, events[0].grown])
    assert np.all(opt.velocity["w"].ravel()[moved] == 0.0)


def test_cosine_death_rate():
    state = SparseState(masks={}, sparsity=0.5, death_rate=0.5, death_rate_schedule="cosine", total_iterations=100)
    assert state.death_rate_at(0) == pytest.approx(0.5)
    assert state.death_rate_at(50) == pytest.approx(0.25)
    assert state.death_rate_at(100) == pytest.approx(0.0)
    constant = SparseState(masks={}, sparsity=0.5)
    assert constant.death_rate_at(10_000) == 0.5


def test_state_validation():
    with pytest.raises(SparsityError):
        SparseState(masks={}, sparsity=0.5, death_rate=1.0)
    with pytest.raises(SparsityError):
        SparseState(masks={}, sparsity=0.5, update_frequency=0)


def test_sparsity_report():
    state = erk_init({"w": (4, 4)}, 0.5)
    (row,) = sparsity_report(state)
    assert row == {"layer": "w", "shape": [4, 4], "active": 8, "total": 16, "density": 0.5}


def test_sweep_grid_is_valid():
    for d in SPARSITY_GRID:
        erk_densities({"a": (12, 40), "b": (40, 3)}, d)


# --- training ----------------------------------------------------------------------

def test_masked_step_loss_decreases(toy_data):
    graph, train_set, _, norm = toy_data
    model = toy_model(graph, history=4, horizon=2, seed=0)
    state = init_model_masks(model, 0.5, seed=0)
    opt = SgdMomentum(0.01, 0.9)
    x = norm.normalize(train_set.inputs[:64])
    y = norm.normalize(train_set.targets[:64])
    losses = [masked_step(model, state, opt, x, y).loss for _ in range(50)]
    assert losses[-1] < losses[0]
    params = model.parameters()
    for name, mask in state.masks.items():
        assert np.all(params[name][mask == 0] == 0.0)


def test_zero_epochs_leaves_model_untouched(toy_data):
    graph, train_set, val_set, norm = toy_data
    model = toy_model(graph, history=4, horizon=2)
    before = {k: v.copy() for k, v in model.parameters().items()}
    _, history = train(model, None, train_set, val_set, norm, epochs=0)
    assert history.empty and list(history.columns) == HISTORY_COLUMNS
    for name, arr in model.parameters().items():
        assert np.array_equal(arr, before[name])


def test_history_rows(toy_data):
    graph, train_set, val_set, norm = toy_data
    model = toy_model(graph, history=4, horizon=2)
    state = init_model_masks(model, 0.5, seed=0, update_frequency=3)
    _, history = train(model, state, train_set, val_set, norm, epochs=2, batch_size=64, learning_rate=0.01)
    assert list(history.columns) == HISTORY_COLUMNS
    assert list(history["split"]) == ["train", "val", "train", "val"]
    assert list(history["epoch"]) == [1, 1, 2, 2]
    assert np.all(history["mae"] <= history["rmse"] + 1e-12)
    assert history["active_weights"].nunique() == 1
    assert abs(history["sparsity"].iloc[0] - 0.5) < 0.05


def test_dense_limit_is_bit_identical(toy_data):
    graph, train_set, val_set, norm = toy_data
    dense = toy_model(graph, history=4, horizon=2, seed=11)
    sparse = toy_model(graph, history=4, horizon=2, seed=11)
    state = init_model_masks(sparse, 0.0, seed=11, update_frequency=2)
    kwargs = dict(epochs=3, batch_size=50, learning_rate=0.02, momentum=0.9, seed=4)
    _, h_dense = train(dense, None, train_set, val_set, norm, **kwargs)
    _, h_sparse = train(sparse, state, train_set, val_set, norm, **kwargs)
    assert np.array_equal(h_dense["loss"].to_numpy(), h_sparse["loss"].to_numpy())
    for name, arr in dense.parameters().items():
        assert np.array_equal(arr, sparse.parameters()[name])


def run_with_invariant_checks(toy_data, monkeypatch, epochs, update_frequency):
    graph, train_set, val_set, norm = toy_data
    model = toy_model(graph, history=4, horizon=2, seed=2)
    state = init_model_masks(model, 0.5, seed=2, update_frequency=update_frequency)
    initial_counts = state.active_counts()
    previous = {k: m.copy() for k, m in state.masks.items()}
    updates = []
    original = sparse_trainer.drop_and_grow

    def checked_drop_and_grow(model_, state_, grads, optimizer=None):
        params = model_.parameters()
        masks_before = {k: m.copy() for k, m in state_.masks.items()}
        weights_before = {k: params[k].copy() for k in state_.masks}
        events = original(model_, state_, grads, optimizer)
        for name, m0 in masks_before.items():
            m1 = state_.masks[name]
            w0, g = np.abs(weights_before[name]), np.abs(grads[name])
            dropped = (m0 == 1) & (m1 == 0)
            kept = (m0 == 1) & (m1 == 1)
            grown = (m0 == 0) & (m1 == 1)
            passed_over = (m0 == 0) & (m1 == 0)
            if dropped.any() and kept.any():
                assert w0[dropped].max() <= w0[kept].min()
            if grown.any() and passed_over.any():
                assert g[grown].min() >= g[passed_over].max()
            assert np.all(params[name][grown] == 0.0)
        updates.append(state_.iteration)
        return events

    def on_iteration(model_, state_, iteration):
        params = model_.parameters()
        assert state_.active_counts() == initial_counts
        for name, mask in state_.masks.items():
            inactive = params[name][mask == 0]
            assert np.all(inactive == 0.0) and not np.any(np.signbit(inactive))
            if iteration % update_frequency:
                assert np.array_equal(mask, previous[name])
            previous[name] = mask.copy()

    monkeypatch.setattr(sparse_trainer, "drop_and_grow", checked_drop_and_grow)
    train(model, state, train_set, val_set, norm, epochs=epochs, batch_size=64, learning_rate=0.01,
          on_iteration=on_iteration)
    assert state.mask_updates == len(updates)
    return updates


def test_sparse_invariants_short_run(toy_data, monkeypatch):
    updates = run_with_invariant_checks(toy_data, monkeypatch, epochs=4, update_frequency=3)
    assert updates == list(range(3, 4 * 4 + 1, 3))


@pytest.mark.slow
def test_sparse_invariants_full_run(toy_data, monkeypatch):
    updates = run_with_invariant_checks(toy_data, monkeypatch, epochs=200, update_frequency=10)
    assert len(updates) == 80
