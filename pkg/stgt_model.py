"""
stgt_model.py

GCN-STGT / GAT-STGT: a spatial graph block applied to every time step of a
speed window, a two-layer LSTM running over the time axis of each node,
and a fully-connected head mapping the last hidden state to T_out speeds.

Every layer carries its own analytic backward pass (no taped autodiff):
  forward(x) -> (out, cache)
  backward(dout, cache) -> LayerGrads

Shapes (B windows, N nodes, F history steps, D spatial width, H LSTM width):
  window      B x N x F
  spatial in  B x F x N x 1   (one scalar speed per node per step)
  spatial out B x F x N x D
  lstm in     B x N x F x D  ->  B x N x H
  head out    B x N x T_out

Checkpoints are JSON documents tagged with a format name and version.
"""

import json
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from graph_builder import SensorGraph, attention_mask, graph_from_edges, normalize_adjacency
from speed_dataset import Normalizer
from tensor_core import (
    DTYPE,
    DimensionError,
    Layer,
    LayerGrads,
    as_tensor,
    elementwise,
    leaky_relu,
    linear,
    masked_apply,
    matmul,
)

logger = logging.getLogger("sparse_stgt.model")

MODES = {"gcn": "GCN-STGT", "gat": "GAT-STGT"}
CHECKPOINT_FORMAT = "sparse-stgt-checkpoint"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _check_trailing(x: np.ndarray, expected: Tuple[int, ...], what: str) -> None:
    if x.shape[-len(expected):] != expected:
        raise DimensionError(f"{what} expects trailing shape {expected}, got {x.shape}")


class GcnLayer:
    """relu(P x W + b) with P the normalized adjacency (self-loops included)."""

    def __init__(self, propagation: np.ndarray, weight: np.ndarray, bias: np.ndarray):
        self.propagation = np.asarray(propagation, dtype=DTYPE)
        self.params = {"weight": np.asarray(weight, dtype=DTYPE), "bias": np.asarray(bias, dtype=DTYPE)}

    @classmethod
    def create(cls, propagation, in_features: int, out_features: int, rng: np.random.Generator) -> "GcnLayer":
        return cls(propagation, glorot_uniform(rng, in_features, out_features), np.zeros(out_features))

    @property
    def out_features(self) -> int:
        return self.params["weight"].shape[1]

    def forward(self, x: np.ndarray):
        w, b = self.params["weight"], self.params["bias"]
        _check_trailing(x, (self.propagation.shape[0], w.shape[0]), "GCN layer")
        px = self.propagation @ x
        z = linear(px, w, b)
        return elementwise("relu", z), (px, z)

    def backward(self, dout: np.ndarray, cache) -> LayerGrads:
        px, z = cache
        w = self.params["weight"]
        dz = dout * (z > 0)
        dz2 = dz.reshape(-1, w.shape[1])
        grads = {
            "weight": matmul(px.reshape(-1, w.shape[0]).T, dz2),
            "bias": dz2.sum(axis=0),
        }
        dx = self.propagation.T @ linear(dz, w.T)
        return LayerGrads(params=grads, input=dx)


class GatLayer:
    """
    Multi-head graph attention. Per head k with z = x W_k:
      e_ij = leakyrelu(a_k . [z_i || z_j])   for j in the neighbourhood of i
      alpha_ij = softmax_j(e_ij)
      out_i = elu(sum_j alpha_ij z_j)
    Head outputs are concatenated. weight stacks the heads column-wise
    (F_in x heads*F_h); attention holds one row [a_target || a_neighbour] per head.
    """

    def __init__(self, mask: np.ndarray, weight: np.ndarray, attention: np.ndarray, slope: float = 0.2):
        self.mask = np.asarray(mask, dtype=bool)
        if not self.mask.diagonal().all():
            raise ModelError("GAT neighbourhoods must include self-loops")
        self.slope = float(slope)
        self.params = {"weight": np.asarray(weight, dtype=DTYPE), "attention": np.asarray(attention, dtype=DTYPE)}
        heads, two_fh = self.params["attention"].shape
        if two_fh % 2 or self.params["weight"].shape[1] != heads * (two_fh // 2):
            raise ModelError("GAT weight and attention shapes disagree")

    @classmethod
    def create(cls, mask, in_features: int, heads: int, head_features: int, rng: np.random.Generator,
               slope: float = 0.2) -> "GatLayer":
        weight = glorot_uniform(rng, in_features, heads * head_features)
        attention = np.stack([glorot_uniform(rng, 2 * head_features, 1)[:, 0] for _ in range(heads)])
        return cls(mask, weight, attention, slope)

    @property
    def heads(self) -> int:
        return self.params["attention"].shape[0]

    @property
    def head_features(self) -> int:
        return self.params["attention"].shape[1] // 2

    @property
    def out_features(self) -> int:
        return self.params["weight"].shape[1]

    def forward(self, x: np.ndarray, return_attention: bool = False):
        w, att = self.params["weight"], self.params["attention"]
        n = self.mask.shape[0]
        _check_trailing(x, (n, w.shape[0]), "GAT layer")
        h, fh = self.heads, self.head_features
        lead = x.shape[:-2]

        z = np.moveaxis(linear(x, w).reshape(*lead, n, h, fh), -2, -3)  # ... x h x N x F_h
        s_dst = np.einsum("...hnf,hf->...hn", z, att[:, :fh])
        s_src = np.einsum("...hnf,hf->...hn", z, att[:, fh:])
        e = s_dst[..., :, None] + s_src[..., None, :]  # ... x h x N(i) x N(j)

        logits = np.where(self.mask, leaky_relu(e, self.slope), -np.inf)
        logits = logits - logits.max(axis=-1, keepdims=True)
        p = np.exp(logits)
        alpha = p / p.sum(axis=-1, keepdims=True)

        agg = alpha @ z
        out = np.moveaxis(elementwise("elu", agg), -3, -2).reshape(*lead, n, h * fh)
        cache = (x, z, e, alpha, agg)
        if return_attention:
            return out, cache, alpha
        return out, cache

    def backward(self, dout: np.ndarray, cache) -> LayerGrads:
        x, z, e, alpha, agg = cache
        w, att = self.params["weight"], self.params["attention"]
        n = self.mask.shape[0]
        h, fh = self.heads, self.head_features
        lead = x.shape[:-2]

        d_out = np.moveaxis(dout.reshape(*lead, n, h, fh), -2, -3)
        d_agg = d_out * np.where(agg > 0, 1.0, np.exp(np.minimum(agg, 0.0)))
        d_alpha = d_agg @ np.swapaxes(z, -1, -2)
        dz = np.swapaxes(alpha, -1, -2) @ d_agg

        d_logits = alpha * (d_alpha - (d_alpha * alpha).sum(axis=-1, keepdims=True))
        de = d_logits * np.where(e > 0, 1.0, self.slope)
        ds_dst = de.sum(axis=-1)
        ds_src = de.sum(axis=-2)
        dz = dz + ds_dst[..., None] * att[:, None, :fh] + ds_src[..., None] * att[:, None, fh:]

        z_flat = z.reshape(-1, h, n, fh)
        d_att = np.concatenate(
            [
                np.einsum("bhn,bhnf->hf", ds_dst.reshape(-1, h, n), z_flat),
                np.einsum("bhn,bhnf->hf", ds_src.reshape(-1, h, n), z_flat),
            ],
            axis=1,
        )
        dz_cat = np.moveaxis(dz, -3, -2).reshape(*lead, n, h * fh)
        grads = {
            "weight": matmul(x.reshape(-1, w.shape[0]).T, dz_cat.reshape(-1, h * fh)),
            "attention": d_att,
        }
        return LayerGrads(params=grads, input=linear(dz_cat, w.T))


class LstmLayer:
    """
    One LSTM layer with forget gate over sequences M x T x D. Gate columns are
    ordered input, forget, output, candidate; states start at zero.
    """

    def __init__(self, w_x: np.ndarray, w_h: np.ndarray, bias: np.ndarray):
        self.params = {
            "w_x": np.asarray(w_x, dtype=DTYPE),
            "w_h": np.asarray(w_h, dtype=DTYPE),
            "bias": np.asarray(bias, dtype=DTYPE),
        }

    @classmethod
    def create(cls, in_features: int, hidden: int, rng: np.random.Generator) -> "LstmLayer":
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0
        return cls(glorot_uniform(rng, in_features, 4 * hidden), glorot_uniform(rng, hidden, 4 * hidden), bias)

    @property
    def hidden(self) -> int:
        return self.params["w_h"].shape[0]

    def forward(self, seq: np.ndarray):
        w_x, w_h, b = self.params["w_x"], self.params["w_h"], self.params["bias"]
        if seq.ndim != 3 or seq.shape[2] != w_x.shape[0]:
            raise DimensionError(f"LSTM layer expects M x T x {w_x.shape[0]}, got {seq.shape}")
        m, steps, _ = seq.shape
        hd = self.hidden

        hs = np.empty((m, steps, hd))
        cs = np.empty((m, steps, hd))
        gates = np.empty((m, steps, 4 * hd))
        h = np.zeros((m, hd))
        c = np.zeros((m, hd))
        for t in range(steps):
            a = elementwise("add", linear(seq[:, t], w_x, b), matmul(h, w_h))
            i, f, o = (elementwise("sigmoid", a[:, k * hd:(k + 1) * hd]) for k in range(3))
            g = elementwise("tanh", a[:, 3 * hd:])
            c = elementwise("add", elementwise("mul", f, c), elementwise("mul", i, g))
            h = elementwise("mul", o, elementwise("tanh", c))
            hs[:, t], cs[:, t] = h, c
            gates[:, t] = np.concatenate([i, f, o, g], axis=1)
        return hs, (seq, hs, cs, gates)

    def backward(self, dhs: np.ndarray, cache) -> LayerGrads:
        seq, hs, cs, gates = cache
        w_x, w_h = self.params["w_x"], self.params["w_h"]
        m, steps, _ = seq.shape
        hd = self.hidden

        dw_x = np.zeros_like(w_x)
        dw_h = np.zeros_like(w_h)
        db = np.zeros(4 * hd)
        dseq = np.empty_like(seq)
        dh_next = np.zeros((m, hd))
        dc_next = np.zeros((m, hd))
        zeros = np.zeros((m, hd))
        for t in reversed(range(steps)):
            i, f, o, g = (gates[:, t, k * hd:(k + 1) * hd] for k in range(4))
            c_prev = cs[:, t - 1] if t > 0 else zeros
            h_prev = hs[:, t - 1] if t > 0 else zeros
            tc = np.tanh(cs[:, t])

            dh = dhs[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc ** 2)
            da = np.concatenate(
                [
                    dc * g * i * (1.0 - i),
                    dc * c_prev * f * (1.0 - f),
                    dh * tc * o * (1.0 - o),
                    dc * i * (1.0 - g ** 2),
                ],
                axis=1,
            )
            dc_next = dc * f
            dw_x += matmul(seq[:, t].T, da)
            dw_h += matmul(h_prev.T, da)
            db += da.sum(axis=0)
            dseq[:, t] = matmul(da, w_x.T)
            dh_next = matmul(da, w_h.T)
        return LayerGrads(params={"w_x": dw_x, "w_h": dw_h, "bias": db}, input=dseq)


class LstmStack:
    """Stacked LSTM layers over [..., T, D]; returns the last layer's final hidden state [..., H]."""

    def __init__(self, layers: List[LstmLayer]):
        if not layers:
            raise ModelError("LSTM stack needs at least one layer")
        self.layers = layers

    @classmethod
    def create(cls, in_features: int, hidden: int, rng: np.random.Generator, depth: int = 2) -> "LstmStack":
        layers = [LstmLayer.create(in_features if k == 0 else hidden, hidden, rng) for k in range(depth)]
        return cls(layers)

    @property
    def hidden(self) -> int:
        return self.layers[-1].hidden

    def forward(self, seq: np.ndarray):
        lead = seq.shape[:-2]
        x = seq.reshape(-1, *seq.shape[-2:])
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x[:, -1].reshape(*lead, self.hidden), (seq.shape, caches)

    def backward(self, dout: np.ndarray, cache):
        """Returns (per-layer LayerGrads, input gradient shaped like the input sequence)."""
        seq_shape, caches = cache
        m, steps = int(np.prod(seq_shape[:-2], dtype=int)), seq_shape[-2]
        dx = np.zeros((m, steps, self.hidden))
        dx[:, -1] = dout.reshape(m, self.hidden)
        grads: List[Optional[LayerGrads]] = [None] * len(self.layers)
        for k in reversed(range(len(self.layers))):
            grads[k] = self.layers[k].backward(dx, caches[k])
            dx = grads[k].input
        return grads, dx.reshape(seq_shape)


class DenseLayer:
    """x W + b over the last axis."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.params = {"weight": np.asarray(weight, dtype=DTYPE), "bias": np.asarray(bias, dtype=DTYPE)}

    @classmethod
    def create(cls, in_features: int, out_features: int, rng: np.random.Generator) -> "DenseLayer":
        return cls(glorot_uniform(rng, in_features, out_features), np.zeros(out_features))

    def forward(self, x: np.ndarray):
        w = self.params["weight"]
        if x.shape[-1] != w.shape[0]:
            raise DimensionError(f"dense layer expects last axis {w.shape[0]}, got {x.shape}")
        return linear(x, w, self.params["bias"]), x

    def backward(self, dout: np.ndarray, cache) -> LayerGrads:
        x = cache
        w = self.params["weight"]
        d2 = dout.reshape(-1, w.shape[1])
        grads = {"weight": matmul(x.reshape(-1, w.shape[0]).T, d2), "bias": d2.sum(axis=0)}
        return LayerGrads(params=grads, input=linear(dout, w.T))


@dataclass
class Architecture:
    mode: str
    num_nodes: int
    history_steps: int
    horizon_steps: int
    spatial_width: int = 64
    lstm_hidden: int = 128
    gat_heads: int = 4
    gat_slope: float = 0.2
    normalization: str = "sym"


class StgtModel:
    def __init__(self, arch: Architecture, graph: SensorGraph, spatial: Layer, temporal: LstmStack, head: DenseLayer):
        if arch.mode not in MODES:
            raise ModelError(f"unknown mode '{arch.mode}' (expected one of {', '.join(MODES)})")
        if graph.num_nodes != arch.num_nodes:
            raise ModelError(f"graph has {graph.num_nodes} nodes, architecture expects {arch.num_nodes}")
        self.arch = arch
        self.graph = graph
        self.spatial = spatial
        self.temporal = temporal
        self.head = head

    @classmethod
    def create(cls, arch: Architecture, graph: SensorGraph, seed: int = 0) -> "StgtModel":
        rng = np.random.default_rng(seed)
        if arch.mode == "gcn":
            spatial = GcnLayer.create(normalize_adjacency(graph, arch.normalization), 1, arch.spatial_width, rng)
        elif arch.mode == "gat":
            if arch.spatial_width % arch.gat_heads:
                raise ModelError(f"spatial width {arch.spatial_width} is not divisible by {arch.gat_heads} heads")
            spatial = GatLayer.create(attention_mask(graph), 1, arch.gat_heads, arch.spatial_width // arch.gat_heads,
                                      rng, arch.gat_slope)
        else:
            raise ModelError(f"unknown mode '{arch.mode}' (expected one of {', '.join(MODES)})")
        temporal = LstmStack.create(spatial.out_features, arch.lstm_hidden, rng)
        head = DenseLayer.create(arch.lstm_hidden, arch.horizon_steps, rng)
        return cls(arch, graph, spatial, temporal, head)

    @property
    def tag(self) -> str:
        return MODES[self.arch.mode]

    def layers(self) -> Dict[str, Layer]:
        named: Dict[str, Layer] = {"spatial": self.spatial}
        for k, layer in enumerate(self.temporal.layers):
            named[f"lstm.{k}"] = layer
        named["head"] = self.head
        return named

    def parameters(self) -> Dict[str, np.ndarray]:
        """Live parameter arrays keyed '<layer>.<param>'; updating them in place updates the model."""
        return {f"{lname}.{pname}": arr for lname, layer in self.layers().items() for pname, arr in layer.params.items()}

    def sparsifiable(self) -> List[str]:
        """Weight matrices; biases and attention vectors stay dense."""
        return [name for name, arr in self.parameters().items() if arr.ndim == 2 and not name.endswith(".attention")]

    def forward(self, window: np.ndarray):
        x = as_tensor(window, f"{self.tag} input window")
        single = x.ndim == 2
        if single:
            x = x[None]
        expected = (self.arch.num_nodes, self.arch.history_steps)
        if x.ndim != 3 or x.shape[1:] != expected:
            raise DimensionError(f"{self.tag} expects windows of shape {expected}, got {np.shape(window)}")

        xs = np.transpose(x, (0, 2, 1))[..., None]
        s, s_cache = self.spatial.forward(xs)
        seq = np.transpose(s, (0, 2, 1, 3))
        hidden, t_cache = self.temporal.forward(seq)
        pred, h_cache = self.head.forward(hidden)
        pred = as_tensor(pred, f"{self.tag} prediction")
        cache = (single, s_cache, t_cache, h_cache)
        return (pred[0] if single else pred), cache

    def backward(self, dpred: np.ndarray, cache) -> Dict[str, np.ndarray]:
        single, s_cache, t_cache, h_cache = cache
        if single:
            dpred = dpred[None]
        grads: Dict[str, np.ndarray] = {}
        g_head = self.head.backward(dpred, h_cache)
        grads.update({f"head.{k}": v for k, v in g_head.params.items()})
        g_lstm, d_seq = self.temporal.backward(g_head.input, t_cache)
        for k, g in enumerate(g_lstm):
            grads.update({f"lstm.{k}.{p}": v for p, v in g.params.items()})
        g_spatial = self.spatial.backward(np.transpose(d_seq, (0, 2, 1, 3)), s_cache)
        grads.update({f"spatial.{k}": v for k, v in g_spatial.params.items()})
        return grads

    def predict(self, windows: np.ndarray, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(windows, dtype=DTYPE)
        if x.ndim == 2:
            return self.forward(x)[0]
        parts = [self.forward(x[i:i + batch_size])[0] for i in range(0, x.shape[0], batch_size)]
        return np.concatenate(parts, axis=0)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = np.asarray(pred, dtype=DTYPE), np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} does not match target shape {target.shape}")
    return float(np.mean((pred - target) ** 2))


def mse_loss_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    pred, target = np.asarray(pred, dtype=DTYPE), np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} does not match target shape {target.shape}")
    return 2.0 * (pred - target) / pred.size


class SgdMomentum:
    """
    Heavy-ball SGD. When masks are given, gradients and velocities are masked
    and the updated weights are re-masked, so inactive weights stay exactly 0.
    """

    def __init__(self, learning_rate: float = 1e-3, momentum: float = 0.9):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
             masks: Optional[Dict[str, np.ndarray]] = None) -> None:
        masks = masks or {}
        for name, w in params.items():
            g = grads[name]
            mask = masks.get(name)
            if mask is not None:
                g = g * mask
            v = self.momentum * self.velocity.get(name, np.zeros_like(w)) + g
            w -= self.learning_rate * v
            if mask is not None:
                w[...] = masked_apply(w, mask)
                v = np.where(mask == 1.0, v, 0.0)
            self.velocity[name] = v

    def reset_positions(self, name: str, positions: np.ndarray) -> None:
        """Zero the velocity at the flat positions given (used when connections are regrown)."""
        if name in self.velocity:
            self.velocity[name].reshape(-1)[positions] = 0.0


def save_checkpoint(path: str, model: StgtModel, masks: Optional[Dict[str, np.ndarray]] = None,
                    normalizer=None, extra: Optional[dict] = None) -> None:
    arch = model.arch
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "mode": MODES[arch.mode],
        "architecture": asdict(arch),
        "graph": {
            "node_ids": list(model.graph.node_ids),
            "omega": model.graph.omega,
            "edges": [[i, j, d] for i, j, d in model.graph.edges],
        },
        "params": {name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
                   for name, arr in model.parameters().items()},
        "masks": {name: {"shape": list(m.shape), "data": m.ravel().astype(int).tolist()}
                  for name, m in (masks or {}).items()},
    }
    if normalizer is not None:
        doc["normalizer"] = {"mean": normalizer.mean.tolist(), "std": normalizer.std.tolist()}
    if extra:
        doc["extra"] = extra
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)
    logger.info("Saved %s checkpoint to %s", MODES[arch.mode], path)


def _unpack(entry: dict, name: str) -> np.ndarray:
    try:
        return np.asarray(entry["data"], dtype=DTYPE).reshape(entry["shape"])
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"checkpoint entry '{name}' is malformed: {e}") from e


def load_checkpoint(path: str):
    """Returns (model, masks, normalizer_or_None, extra)."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path} is not valid JSON: {e}") from e
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} document")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')}")

    arch = Architecture(**doc["architecture"])
    g = doc["graph"]
    graph = graph_from_edges(g["node_ids"], g["edges"], g["omega"])

    model = StgtModel.create(arch, graph, seed=0)
    params = model.parameters()
    if set(doc["params"]) != set(params):
        raise CheckpointError("checkpoint parameters do not match the architecture")
    for name, entry in doc["params"].items():
        arr = _unpack(entry, name)
        if arr.shape != params[name].shape:
            raise CheckpointError(f"parameter '{name}' has shape {arr.shape}, expected {params[name].shape}")
        params[name][...] = arr
    masks = {name: _unpack(entry, name) for name, entry in doc.get("masks", {}).items()}
    normalizer = None
    if "normalizer" in doc:
        normalizer = Normalizer(mean=np.asarray(doc["normalizer"]["mean"]), std=np.asarray(doc["normalizer"]["std"]))
    return model, masks, normalizer, doc.get("extra", {})
