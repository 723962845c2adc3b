"""Graph attention layers over the daily graph, plus the trend classifier.

Attention follows the additive single-head formulation; the day graph's
masked edge weights scale messages after the softmax. Every node gets a
functional self-loop with weight 1 inside the layer, so isolated nodes
keep their own signal and the neighbor softmax is always well defined.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph_builder import DailyGraph

NEG_INF = -1e9


@dataclass
class GATLayer:
    w: Tensor   # d_in x d_out
    a: Tensor   # 2*d_out x 1 attention vector


@dataclass
class GATParams:
    layers: list
    w_out: Tensor  # d_out x 3
    b_out: Tensor  # 3

    def named(self, prefix="gat"):
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.layer{i}.w"] = layer.w
            out[f"{prefix}.layer{i}.a"] = layer.a
        out[f"{prefix}.w_out"] = self.w_out
        out[f"{prefix}.b_out"] = self.b_out
        return out


@dataclass
class NodeBatch:
    features: Tensor  # N x d_p
    graph: DailyGraph

    def __post_init__(self):
        n = self.features.shape[0]
        if self.graph.adjacency.shape != (n, n):
            raise ad.ShapeError(
                f"graph size {self.graph.adjacency.shape} does not match "
                f"{n} node features")


def init_gat(d_in, hidden, n_layers, rng, n_classes=3, dtype=np.float64):
    layers = []
    dims = [d_in] + [hidden] * n_layers
    for i in range(n_layers):
        layers.append(GATLayer(
            w=Tensor(rng.standard_normal((dims[i], dims[i + 1])).astype(dtype)
                     / np.sqrt(dims[i]), requires_grad=True),
            a=Tensor(rng.standard_normal((2 * dims[i + 1], 1)).astype(dtype)
                     / np.sqrt(2 * dims[i + 1]), requires_grad=True),
        ))
    return GATParams(
        layers=layers,
        w_out=Tensor(rng.standard_normal((dims[-1], n_classes)).astype(dtype)
                     / np.sqrt(dims[-1]), requires_grad=True),
        b_out=Tensor(np.zeros(n_classes, dtype=dtype), requires_grad=True),
    )


def attention_coefficients(layer: GATLayer, h: Tensor, graph: DailyGraph):
    """Neighbor softmax over A plus the functional self-loop."""
    n = h.shape[0]
    d_out = layer.w.shape[1]
    wh = h @ layer.w
    a_left = ad.take_rows(layer.a, np.arange(d_out))
    a_right = ad.take_rows(layer.a, np.arange(d_out, 2 * d_out))
    s_l = wh @ a_left    # N x 1
    s_r = wh @ a_right   # N x 1
    logits = ad.leaky_relu(s_l + s_r.T)
    if not np.isfinite(logits.data).all():
        u, v = np.argwhere(~np.isfinite(logits.data))[0]
        raise ValueError(f"non-finite attention logit at edge ({u}, {v})")
    mask = graph.adjacency | np.eye(n, dtype=bool)
    penalty = Tensor(np.where(mask, 0.0, NEG_INF).astype(logits.data.dtype))
    alpha = ad.row_softmax(logits + penalty)
    return alpha, wh, mask


def gat_layer(layer: GATLayer, h: Tensor, graph: DailyGraph) -> Tensor:
    """One attention layer: ELU of edge-weighted, attention-scaled messages."""
    alpha, wh, _ = attention_coefficients(layer, h, graph)
    n = h.shape[0]
    # masked day weights on real edges; fixed weight 1 on functional self-loops
    self_loop = np.diag((~graph.adjacency.diagonal()).astype(wh.data.dtype))
    eff = graph.weights + Tensor(self_loop)
    return ad.elu((alpha * eff) @ wh)


def predict(params: GATParams, batch: NodeBatch) -> Tensor:
    """Per-ticker class distribution after all attention layers."""
    h = batch.features
    for layer in params.layers:
        h = gat_layer(layer, h, batch.graph)
    return ad.row_softmax(h @ params.w_out + params.b_out)
