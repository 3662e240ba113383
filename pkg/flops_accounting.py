"""
flops_accounting.py

Analytic training-cost model, in units of one multiply-accumulate (xi).

  fully-connected  I * O * xi
  convolution      L_h * L_w * C_in * C_out * K^2 * xi

f_d is the dense forward cost of the model. Loss, gradient and weight update
are taken to cost the same, so a dense iteration costs 3 f_d. A sparse model
at sparsity d costs f_s = (1 - d) f_d per pass, and every update_frequency
iterations one extra dense gradient is computed to pick the grown weights:

  amortized = (3 f_s dT + 2 f_s + f_d) / (dT + 1)
  ratio     = amortized / (3 f_d) = (3 dT - 3 d dT - 2 d + 3) / (3 (dT + 1))
"""

import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

logger = logging.getLogger("sparse_stgt.flops")


class FlopsError(ValueError):
    pass


def _positive(name: str, value) -> None:
    if value < 1:
        raise FlopsError(f"{name} must be >= 1, got {value}")


@dataclass(frozen=True)
class FcLayer:
    name: str
    in_features: int
    out_features: int
    multiplicity: int = 1  # how many times the layer runs per window
    extended: bool = False  # term outside the fully-connected/conv accounting

    def __post_init__(self):
        _positive(f"{self.name}: in_features", self.in_features)
        _positive(f"{self.name}: out_features", self.out_features)
        _positive(f"{self.name}: multiplicity", self.multiplicity)


@dataclass(frozen=True)
class ConvLayer:
    name: str
    out_height: int
    out_width: int
    in_channels: int
    out_channels: int
    kernel: int
    multiplicity: int = 1
    extended: bool = False

    def __post_init__(self):
        for attr in ("out_height", "out_width", "in_channels", "out_channels", "kernel", "multiplicity"):
            _positive(f"{self.name}: {attr}", getattr(self, attr))


LayerDesc = Union[FcLayer, ConvLayer]


@dataclass(frozen=True)
class FlopsModel:
    layers: Tuple[LayerDesc, ...] = field(default_factory=tuple)
    xi: float = 1.0
    update_frequency: int = 1000
    sparsity: float = 0.0

    def __post_init__(self):
        if self.xi <= 0:
            raise FlopsError(f"xi must be positive, got {self.xi}")
        _check_domain(self.sparsity, self.update_frequency)


def _check_domain(d: float, dT: int) -> None:
    if not 0 <= d < 1:
        raise FlopsError(f"sparsity must be in [0, 1), got {d}")
    if dT < 1:
        raise FlopsError(f"update frequency must be >= 1, got {dT}")


def layer_flops(desc: LayerDesc, xi: float = 1.0) -> float:
    if isinstance(desc, FcLayer):
        return float(desc.in_features * desc.out_features * desc.multiplicity) * xi
    if isinstance(desc, ConvLayer):
        return float(desc.out_height * desc.out_width * desc.in_channels * desc.out_channels
                     * desc.kernel ** 2 * desc.multiplicity) * xi
    raise FlopsError(f"unsupported layer descriptor {type(desc).__name__}")


def dense_flops(model: FlopsModel) -> float:
    """f_d: one dense forward pass."""
    return sum(layer_flops(desc, model.xi) for desc in model.layers)


def dense_step_flops(model: FlopsModel) -> float:
    return 3.0 * dense_flops(model)


def sparse_flops(model: FlopsModel) -> float:
    return dense_flops(model) * (1.0 - model.sparsity)


def sparse_ratio(d: float, dT: int) -> float:
    _check_domain(d, dT)
    return (3.0 * dT - 3.0 * d * dT - 2.0 * d + 3.0) / (3.0 * (dT + 1))


def amortized_training_flops(model: FlopsModel) -> float:
    f_d = dense_flops(model)
    f_s = sparse_flops(model)
    dT = model.update_frequency
    return (3.0 * f_s * dT + 2.0 * f_s + f_d) / (dT + 1)


def ratio_table(sparsities: Sequence[float], dT: int) -> List[Tuple[float, float]]:
    return [(d, sparse_ratio(d, dT)) for d in sparsities]


def stgt_flops_model(arch, num_edges: int, update_frequency: int = 1000, sparsity: float = 0.0,
                     xi: float = 1.0) -> FlopsModel:
    """
    Descriptors for one window through a GCN-STGT / GAT-STGT architecture
    (an Architecture from stgt_model). The spatial block runs once per history
    step, the LSTM once per node per step, the head once per node. GAT score
    and aggregation work is counted per neighbourhood entry (edges plus
    self-loops) and flagged as extended.
    """
    n, steps, width, hidden = arch.num_nodes, arch.history_steps, arch.spatial_width, arch.lstm_hidden
    _positive("num_nodes", n)
    if num_edges < 0:
        raise FlopsError(f"num_edges must be >= 0, got {num_edges}")
    layers: List[LayerDesc] = []
    if arch.mode == "gcn":
        layers.append(FcLayer("spatial.propagation", n, n, multiplicity=steps))
        layers.append(FcLayer("spatial.transform", 1, width, multiplicity=n * steps))
    elif arch.mode == "gat":
        heads = arch.gat_heads
        head_features = width // heads
        neighbourhood = num_edges + n
        layers.append(FcLayer("spatial.transform", 1, heads * head_features, multiplicity=n * steps))
        layers.append(FcLayer("spatial.attention_scores", 2 * head_features, 1,
                              multiplicity=heads * neighbourhood * steps, extended=True))
        layers.append(FcLayer("spatial.aggregation", 1, head_features,
                              multiplicity=heads * neighbourhood * steps, extended=True))
        width = heads * head_features
    else:
        raise FlopsError(f"unknown mode '{arch.mode}'")

    in_features = width
    for k in range(2):
        for gate in ("input", "forget", "output", "candidate"):
            layers.append(FcLayer(f"lstm.{k}.{gate}", in_features + hidden, hidden, multiplicity=n * steps))
        in_features = hidden
    layers.append(FcLayer("head", hidden, arch.horizon_steps, multiplicity=n))
    return FlopsModel(layers=tuple(layers), xi=xi, update_frequency=update_frequency, sparsity=sparsity)


def flops_report(model: FlopsModel, sparsity_layers: Optional[List[dict]] = None) -> dict:
    f_d = dense_flops(model)
    report = {
        "xi": model.xi,
        "sparsity": model.sparsity,
        "update_frequency": model.update_frequency,
        "extended_accounting": any(desc.extended for desc in model.layers),
        "layers": [
            {"name": desc.name, "kind": "fc" if isinstance(desc, FcLayer) else "conv",
             "flops": layer_flops(desc, model.xi), "extended": desc.extended}
            for desc in model.layers
        ],
        "dense_flops": f_d,
        "sparse_flops": sparse_flops(model),
        "dense_step_flops": dense_step_flops(model),
        "amortized_training_flops": amortized_training_flops(model),
        "ratio": sparse_ratio(model.sparsity, model.update_frequency),
    }
    if sparsity_layers is not None:
        report["sparsity_layers"] = sparsity_layers
    return report


def write_flops_report(report: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2)
    logger.info("FLOPs report written to %s (ratio %.5f)", path, report["ratio"])
