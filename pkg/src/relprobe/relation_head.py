"""Relation heads: article hidden states -> normalized N x N interaction matrix.

Three constructions are supported: Full (every ticker embedding attends to
all token states), Limited (queries restricted to tickers mentioned in the
article, other rows zeroed before projection), and Pooling (mean-pooled
token state scored bilinearly, broadcast to the mentioned pairs).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


class HeadVariant(enum.Enum):
    FULL = "full"
    LIMITED = "limited"
    POOLING = "pooling"


class EmptyMentionError(ValueError):
    """Limited head got an article with no mentioned tickers."""


@dataclass
class RelationHeadParams:
    e: Tensor        # N x d ticker embeddings
    w_q: Tensor      # d x d
    w_k: Tensor
    w_v: Tensor
    w_proj: Tensor   # d x d_p
    z_gain: Tensor   # d_p affine after projection layer-norm
    z_bias: Tensor
    w_bi: Tensor     # d_p x d_p bilinear scorer
    w_a: Tensor      # d x d_p, pooling variant left map
    w_b: Tensor      # d x d_p, pooling variant right map

    @property
    def n_tickers(self):
        return self.e.shape[0]

    @property
    def d(self):
        return self.e.shape[1]

    def named(self, prefix="head"):
        return {f"{prefix}.{k}": v for k, v in vars(self).items()}


def init_relation_head(n, d, d_p, rng, dtype=np.float64):
    def w(rows, cols):
        return Tensor(rng.standard_normal((rows, cols)).astype(dtype)
                      / np.sqrt(rows), requires_grad=True)

    return RelationHeadParams(
        e=Tensor(rng.standard_normal((n, d)).astype(dtype),
                 requires_grad=True),
        w_q=w(d, d), w_k=w(d, d), w_v=w(d, d),
        w_proj=w(d, d_p),
        z_gain=Tensor(np.ones(d_p, dtype=dtype), requires_grad=True),
        z_bias=Tensor(np.zeros(d_p, dtype=dtype), requires_grad=True),
        w_bi=w(d_p, d_p),
        w_a=w(d, d_p), w_b=w(d, d_p),
    )


def _check_dims(params, h):
    if h.shape[1] != params.d:
        raise ShapeError(
            f"hidden size {h.shape[1]} does not match ticker embedding "
            f"size {params.d}")


def _interaction(params, z):
    i = (z @ params.w_bi) @ z.T
    return ad.layer_norm(i)


def _project(params, e_prime):
    z = ad.layer_norm(e_prime @ params.w_proj) * params.z_gain + params.z_bias
    return z


def attention_weights(params, h, query_rows=None):
    """Scaled dot-product attention of ticker queries over token states."""
    queries = params.e if query_rows is None else ad.take_rows(params.e, query_rows)
    q = queries @ params.w_q
    k = h @ params.w_k
    return ad.row_softmax((q @ k.T) / np.sqrt(params.d))


def full_head(params: RelationHeadParams, h: Tensor) -> Tensor:
    """All N ticker embeddings attend to the token states."""
    _check_dims(params, h)
    att = attention_weights(params, h)
    e_prime = att @ (h @ params.w_v)
    return _interaction(params, _project(params, e_prime))


def limited_head(params: RelationHeadParams, h: Tensor, mentioned) -> Tensor:
    """Cross-attention restricted to mentioned tickers.

    Rows of E' for non-mentioned tickers are zero vectors before projection;
    the output keeps the fixed N x N shape.
    """
    _check_dims(params, h)
    mentioned = sorted(set(int(m) for m in mentioned))
    if not mentioned:
        raise EmptyMentionError("article mentions no tickers")
    n = params.n_tickers
    if mentioned[0] < 0 or mentioned[-1] >= n:
        raise ShapeError(f"mentioned tickers {mentioned} outside universe 0..{n - 1}")
    att = attention_weights(params, h, query_rows=mentioned)
    e_sub = att @ (h @ params.w_v)
    scatter = np.zeros((n, len(mentioned)), dtype=h.data.dtype)
    scatter[mentioned, np.arange(len(mentioned))] = 1.0
    e_prime = Tensor(scatter) @ e_sub
    return _interaction(params, _project(params, e_prime))


def pooling_head(params: RelationHeadParams, h: Tensor, mentioned=()) -> Tensor:
    """Mean-pool token states and score the pooled vector bilinearly.

    The score is the dot product of two linear maps of h_avg, a single
    scalar per article; it is written to every ordered pair of mentioned
    tickers. Pooling keeps no ticker axis, so it can judge whether an
    article asserts a relation but not which mentioned pair it binds.
    """
    _check_dims(params, h)
    n = params.n_tickers
    h_avg = h.mean(axis=0, keepdims=True)        # 1 x d
    score = (h_avg @ params.w_a) @ (h_avg @ params.w_b).T   # 1 x 1
    mentioned = sorted(set(int(m) for m in mentioned))
    if mentioned and (mentioned[0] < 0 or mentioned[-1] >= n):
        raise ShapeError(f"mentioned tickers {mentioned} outside universe 0..{n - 1}")
    mask = np.zeros((n, n), dtype=h.data.dtype)
    for u in mentioned:
        for v in mentioned:
            if u != v:
                mask[u, v] = 1.0
    return ad.layer_norm(Tensor(mask) * score)


def apply_head(variant: HeadVariant, params, h, mentioned=None) -> Tensor:
    if variant is HeadVariant.FULL:
        return full_head(params, h)
    if variant is HeadVariant.LIMITED:
        return limited_head(params, h, mentioned or [])
    return pooling_head(params, h, mentioned or [])
