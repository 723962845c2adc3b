"""Day-level graph construction from per-article interaction matrices.

The day's interactions are summed and row-normalized into edge attributes,
thresholded into a directed boolean adjacency, and masked into edge
weights. The threshold mask is treated as a constant during backward, so
gradients flow into the per-article matrices through the surviving edges.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass
class ThresholdConfig:
    tau: float
    zero_diagonal: bool = True

    def __post_init__(self):
        if not np.isfinite(self.tau):
            raise ValueError(f"threshold tau must be finite, got {self.tau}")


@dataclass
class DailyGraph:
    date: str
    attr: Tensor            # N x N edge attributes
    adjacency: np.ndarray   # N x N bool; row u lists the neighbors u attends to
    weights: Tensor         # adjacency-masked attr
    n_articles: int


def build_day_graph(interactions, cfg: ThresholdConfig, date="", n=None) -> DailyGraph:
    """Aggregate per-article interaction matrices into one day graph.

    An empty interaction list yields the empty graph (zero attributes, no
    edges); the GAT's functional self-loops keep isolated nodes usable.
    `n` is only needed to size that empty graph.
    """
    if not interactions:
        if n is None:
            raise ValueError("empty day needs the universe size n")
        return empty_day_graph(n, cfg, date)
    n = interactions[0].shape[0]
    for i, mat in enumerate(interactions):
        if mat.shape != (n, n):
            raise ShapeError(
                f"interaction {i} has shape {mat.shape}, expected {(n, n)}")
    total = interactions[0]
    for mat in interactions[1:]:
        total = total + mat
    attr = ad.layer_norm(total)
    adjacency = attr.data > cfg.tau
    if cfg.zero_diagonal:
        np.fill_diagonal(adjacency, False)
    weights = attr * Tensor(adjacency.astype(attr.data.dtype))
    return DailyGraph(date=date, attr=attr, adjacency=adjacency,
                      weights=weights, n_articles=len(interactions))


def empty_day_graph(n, cfg: ThresholdConfig, date="") -> DailyGraph:
    zeros = Tensor(np.zeros((n, n), dtype=np.float32))
    return DailyGraph(date=date, attr=zeros,
                      adjacency=np.zeros((n, n), dtype=bool),
                      weights=zeros, n_articles=0)


def build_cooccurrence_graph(articles, n, date=None) -> DailyGraph:
    """Baseline: weight(u, v) = number of same-day articles mentioning both."""
    dates = {a.date for a in articles}
    if len(dates) > 1:
        raise ValueError(f"co-occurrence graph expects one date, got {sorted(dates)}")
    day = date if date is not None else (dates.pop() if dates else "")
    counts = np.zeros((n, n), dtype=np.float32)
    for article in articles:
        mentioned = sorted(set(article.tickers))
        for i, u in enumerate(mentioned):
            for v in mentioned[i + 1:]:
                counts[u, v] += 1
                counts[v, u] += 1
    adjacency = counts >= 1
    return DailyGraph(date=day, attr=Tensor(counts), adjacency=adjacency,
                      weights=Tensor(counts), n_articles=len(articles))


def export_graph(graph: DailyGraph, path, tickers=None):
    """Edge-list CSV `date,src,dst,weight`, one row per edge, sorted."""
    def label(i):
        return tickers[i] if tickers is not None else i

    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["date", "src", "dst", "weight"])
            for u, v in zip(*np.nonzero(graph.adjacency)):
                writer.writerow([graph.date, label(u), label(v),
                                 repr(float(graph.weights.data[u, v]))])
    except OSError as exc:
        raise OSError(f"failed to write graph CSV {path}: {exc}") from exc
