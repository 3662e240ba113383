"""
sparse_trainer.py

Dynamic sparse training with a fixed number of active weights per layer.

  1. erk_init: Erdos-Renyi-Kernel densities per layer, active positions drawn
     uniformly at random.
  2. masked_step: forward/backward on the masked weights; only active weights
     move, inactive weights stay exactly 0.
  3. every update_frequency iterations, drop_and_grow: per layer, deactivate
     the round(k * active) active weights of smallest |W| and activate the
     same number of inactive positions with the largest |dense gradient|.
     Grown weights start at 0, so the active count never changes.

Execution stays dense-with-mask; the FLOPs a truly sparse kernel would save
are accounted analytically in flops_accounting.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

import forecast_metrics
from stgt_model import SgdMomentum, StgtModel, mse_loss, mse_loss_grad
from tensor_core import masked_apply, nonzero_count

logger = logging.getLogger("sparse_stgt.trainer")

SPARSITY_GRID = (0.025, 0.05, 0.1, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 0.9, 0.95, 0.975)
DEFAULT_DEATH_RATE = 0.5
DEFAULT_UPDATE_FREQUENCY = 1000
DEFAULT_EPOCHS = 200
DEFAULT_BATCH_SIZE = 242
HISTORY_COLUMNS = ["epoch", "split", "loss", "mae", "rmse", "mape", "sparsity", "active_weights"]


class SparsityError(ValueError):
    pass


@dataclass
class DropGrowEvent:
    iteration: int
    layer: str
    death_rate: float
    dropped: np.ndarray
    grown: np.ndarray


@dataclass
class SparseState:
    masks: Dict[str, np.ndarray]
    sparsity: float
    death_rate: float = DEFAULT_DEATH_RATE
    update_frequency: int = DEFAULT_UPDATE_FREQUENCY
    death_rate_schedule: str = "constant"
    iteration: int = 0
    total_iterations: Optional[int] = None
    mask_updates: int = 0
    weights_exchanged: int = 0

    def __post_init__(self):
        if not 0 < self.death_rate < 1:
            raise SparsityError(f"death rate must be in (0, 1), got {self.death_rate}")
        if self.update_frequency < 1:
            raise SparsityError(f"update frequency must be >= 1, got {self.update_frequency}")
        if self.death_rate_schedule not in ("constant", "cosine"):
            raise SparsityError(f"unknown death rate schedule '{self.death_rate_schedule}'")

    def active_counts(self) -> Dict[str, int]:
        return {name: nonzero_count(m) for name, m in self.masks.items()}

    def total_weights(self) -> int:
        return sum(m.size for m in self.masks.values())

    def total_active(self) -> int:
        return sum(self.active_counts().values())

    def global_sparsity(self) -> float:
        total = self.total_weights()
        return 0.0 if total == 0 else 1.0 - self.total_active() / total

    def death_rate_at(self, iteration: int) -> float:
        if self.death_rate_schedule == "cosine" and self.total_iterations:
            progress = min(iteration / self.total_iterations, 1.0)
            return self.death_rate * 0.5 * (1.0 + math.cos(math.pi * progress))
        return self.death_rate


def erk_densities(shapes: Dict[str, Tuple[int, ...]], sparsity: float) -> Dict[str, float]:
    """
    Per-layer densities proportional to (fan_in + fan_out) / (fan_in * fan_out),
    scaled so the overall density is 1 - sparsity. Layers whose scaled density
    would pass 1 are made dense and the rest rescaled.
    """
    if not 0 <= sparsity < 1:
        raise SparsityError(f"sparsity must be in [0, 1), got {sparsity}")
    if sparsity == 0:
        return {name: 1.0 for name in shapes}

    density = 1.0 - sparsity
    dense_layers = set()
    while True:
        rhs = 0.0
        divisor = 0.0
        raw = {}
        for name, shape in shapes.items():
            n_param = float(np.prod(shape))
            if name in dense_layers:
                rhs -= n_param * sparsity
            else:
                rhs += n_param * density
                raw[name] = float(np.sum(shape)) / n_param
                divisor += raw[name] * n_param
        if not raw:
            raise SparsityError(f"sparsity {sparsity} cannot be distributed over the layers")
        epsilon = rhs / divisor
        max_raw = max(raw.values())
        if max_raw * epsilon > 1.0:
            for name, r in raw.items():
                if r == max_raw:
                    logger.info("ERK: layer %s kept dense", name)
                    dense_layers.add(name)
        else:
            break
    return {name: 1.0 if name in dense_layers else epsilon * raw[name] for name in shapes}


def erk_init(shapes: Dict[str, Tuple[int, ...]], sparsity: float, seed: int = 0,
             death_rate: float = DEFAULT_DEATH_RATE, update_frequency: int = DEFAULT_UPDATE_FREQUENCY,
             death_rate_schedule: str = "constant") -> SparseState:
    densities = erk_densities(shapes, sparsity)
    rng = np.random.default_rng(seed)
    masks = {}
    for name, shape in shapes.items():
        n_param = int(np.prod(shape))
        n_active = int(round(densities[name] * n_param))
        if n_active < 1:
            raise SparsityError(f"layer {name} {tuple(shape)} would keep no active weight at sparsity {sparsity}")
        flat = np.zeros(n_param)
        flat[rng.choice(n_param, size=n_active, replace=False)] = 1.0
        masks[name] = flat.reshape(shape)
    state = SparseState(masks=masks, sparsity=sparsity, death_rate=death_rate,
                        update_frequency=update_frequency, death_rate_schedule=death_rate_schedule)
    logger.info("ERK init: target sparsity %.3f, achieved %.4f over %d weights",
                sparsity, state.global_sparsity(), state.total_weights())
    return state


def init_model_masks(model: StgtModel, sparsity: float, seed: int = 0, **kwargs) -> SparseState:
    """ERK masks for every sparsifiable weight of the model, applied to the weights."""
    params = model.parameters()
    state = erk_init({name: params[name].shape for name in model.sparsifiable()}, sparsity, seed, **kwargs)
    apply_masks(model, state)
    return state


def apply_masks(model: StgtModel, state: SparseState) -> None:
    params = model.parameters()
    for name, mask in state.masks.items():
        params[name][...] = masked_apply(params[name], mask)


def sparsity_report(state: SparseState) -> List[dict]:
    return [
        {
            "layer": name,
            "shape": list(mask.shape),
            "active": nonzero_count(mask),
            "total": int(mask.size),
            "density": nonzero_count(mask) / mask.size,
        }
        for name, mask in state.masks.items()
    ]


@dataclass
class StepResult:
    loss: float
    pred: np.ndarray
    grads: Dict[str, np.ndarray]


def masked_step(model: StgtModel, state: Optional[SparseState], optimizer: SgdMomentum,
                inputs: np.ndarray, targets: np.ndarray) -> StepResult:
    """
    One SGD iteration. grads in the result are the dense gradients (taken at
    the masked weights, inactive positions included); the update itself only
    touches active positions.
    """
    pred, cache = model.forward(inputs)
    loss = mse_loss(pred, targets)
    grads = model.backward(mse_loss_grad(pred, targets), cache)
    optimizer.step(model.parameters(), grads, state.masks if state is not None else None)
    return StepResult(loss=loss, pred=pred, grads=grads)


def drop_and_grow(model: StgtModel, state: SparseState, dense_grads: Dict[str, np.ndarray],
                  optimizer: Optional[SgdMomentum] = None) -> List[DropGrowEvent]:
    """
    Mask update. Grow candidates are the positions inactive before the drop;
    when there are fewer of them than the drop count (only near sparsity 0),
    only that many weights are exchanged. Ties go to the lowest flat index.
    """
    k = state.death_rate_at(state.iteration)
    params = model.parameters()
    events = []
    for name, mask in state.masks.items():
        w = params[name]
        flat_mask = mask.reshape(-1)
        active = np.flatnonzero(flat_mask == 1.0)
        inactive = np.flatnonzero(flat_mask == 0.0)
        n_drop = int(math.floor(k * active.size + 0.5))
        if inactive.size == 0:
            # layer kept dense by ERK
            continue
        if n_drop > inactive.size:
            logger.warning("Layer %s: only %d inactive positions to grow into, exchanging %d instead of %d",
                           name, inactive.size, inactive.size, n_drop)
            n_drop = inactive.size
        if n_drop == 0:
            continue

        magnitudes = np.abs(w.reshape(-1)[active])
        dropped = active[np.argsort(magnitudes, kind="stable")[:n_drop]]
        scores = np.abs(dense_grads[name].reshape(-1)[inactive])
        grown = inactive[np.argsort(-scores, kind="stable")[:n_drop]]

        new_mask = flat_mask.copy()
        new_mask[dropped] = 0.0
        new_mask[grown] = 1.0
        state.masks[name] = new_mask.reshape(mask.shape)
        w[...] = masked_apply(w, state.masks[name])
        if optimizer is not None:
            optimizer.reset_positions(name, np.concatenate([dropped, grown]))
        events.append(DropGrowEvent(iteration=state.iteration, layer=name, death_rate=k,
                                    dropped=np.sort(dropped), grown=np.sort(grown)))
    exchanged = sum(e.dropped.size for e in events)
    state.mask_updates += 1
    state.weights_exchanged += exchanged
    logger.info("Drop-and-grow at iteration %d (k=%.3f): %d weights exchanged over %d layer(s)",
                state.iteration, k, exchanged, len(events))
    return events


IterationHook = Callable[[StgtModel, Optional[SparseState], int], None]


def train(model: StgtModel, state: Optional[SparseState], train_set, val_set, normalizer,
          epochs: int = DEFAULT_EPOCHS, batch_size: int = DEFAULT_BATCH_SIZE, learning_rate: float = 1e-3,
          momentum: float = 0.9, seed: int = 0, mape_epsilon: float = forecast_metrics.DEFAULT_MAPE_EPSILON,
          on_iteration: Optional[IterationHook] = None) -> Tuple[StgtModel, pd.DataFrame]:
    """
    Train for a fixed number of epochs. With state=None this is plain dense
    training; with a SparseState the masks are enforced every step and
    updated every state.update_frequency iterations. Returns the model and a
    per-epoch history (one train and one val row per epoch).
    """
    if epochs < 0 or batch_size < 1:
        raise ValueError(f"epochs must be >= 0 and batch size >= 1 (got {epochs}, {batch_size})")
    rng = np.random.default_rng(seed)
    optimizer = SgdMomentum(learning_rate, momentum)
    x_train = normalizer.normalize(train_set.inputs)
    y_train = normalizer.normalize(train_set.targets)
    x_val = normalizer.normalize(val_set.inputs)
    y_val = normalizer.normalize(val_set.targets)
    n_train = len(train_set)
    batches_per_epoch = math.ceil(n_train / batch_size)

    if state is not None:
        apply_masks(model, state)
        if state.total_iterations is None:
            state.total_iterations = state.iteration + epochs * batches_per_epoch
        sparsifiable_total = state.total_weights()
    else:
        params = model.parameters()
        sparsifiable_total = sum(params[name].size for name in model.sparsifiable())

    rows = []
    iteration = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n_train)
        preds = np.empty_like(y_train)
        loss_sum = 0.0
        for start in range(0, n_train, batch_size):
            idx = order[start:start + batch_size]
            result = masked_step(model, state, optimizer, x_train[idx], y_train[idx])
            loss_sum += result.loss * idx.size
            preds[idx] = result.pred
            iteration += 1
            if state is not None:
                state.iteration += 1
                if state.iteration % state.update_frequency == 0:
                    drop_and_grow(model, state, result.grads, optimizer)
            if on_iteration is not None:
                on_iteration(model, state, iteration)

        if state is not None:
            sparsity, active = state.global_sparsity(), state.total_active()
        else:
            sparsity, active = 0.0, sparsifiable_total
        val_pred = model.predict(x_val, batch_size=batch_size)
        for split_name, loss, pred_norm, truth in (
            ("train", loss_sum / n_train, preds, train_set.targets),
            ("val", mse_loss(val_pred, y_val), val_pred, val_set.targets),
        ):
            row = {"epoch": epoch, "split": split_name, "loss": loss}
            row.update(forecast_metrics.score(normalizer.denormalize(pred_norm), truth, mape_epsilon))
            row.update({"sparsity": sparsity, "active_weights": active})
            rows.append(row)
        logger.info("epoch %d/%d  train loss %.5f  val loss %.5f  val MAPE %.2f%%  active %d/%d",
                    epoch, epochs, rows[-2]["loss"], rows[-1]["loss"], rows[-1]["mape"], active, sparsifiable_total)

    return model, pd.DataFrame(rows, columns=HISTORY_COLUMNS)


def write_history(history: pd.DataFrame, path: str) -> None:
    history.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
