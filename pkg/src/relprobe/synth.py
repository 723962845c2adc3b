"""Synthetic desk-scale corpus with a planted relation graph.

Returns follow a first-order spillover process on a hidden directed graph;
news articles mention ticker pairs and carry relation-vocabulary tokens
when the pair is genuinely linked. Co-mention noise (articles about random
pairs) is injected so that naive co-occurrence graphs pick up spurious
edges while the planted signal stays recoverable from token content.
"""
from __future__ import annotations

import datetime
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph_builder import DailyGraph


@dataclass
class PlantedWorld:
    n_tickers: int = 20
    n_days: int = 500
    articles_per_day: int = 10
    article_len: int = 30
    vocab_size: int = 200
    relation_vocab_size: int = 20
    n_edges: int = 40
    spillover: float = 0.15
    momentum: float = 0.1
    noise_scale: float = 0.02
    source_noise_ratio: float = 5.0
    p_signal: float = 0.8
    planted_mention_rate: float = 0.6
    n_distractors: int = 2
    structure: str = "hub"   # hub | random edge placement
    start_date: str = "2020-01-01"

    def __post_init__(self):
        if self.vocab_size < self.n_tickers + self.relation_vocab_size + 10:
            raise ValueError("vocab too small for ticker + relation + filler tokens")
        if self.article_len < 5 + self.n_distractors:
            raise ValueError("article too short for pair, relation and "
                             "distractor slots")
        if self.n_distractors > self.n_tickers:
            raise ValueError("more distractor mentions than tickers")

    # token id layout: [0, N) ticker mentions, [N, N+R) relation vocab, rest filler
    @property
    def relation_token_range(self):
        lo = self.n_tickers
        return lo, lo + self.relation_vocab_size

    @property
    def filler_token_range(self):
        return self.n_tickers + self.relation_vocab_size, self.vocab_size

    @property
    def tickers(self):
        return [f"T{i:02d}" for i in range(self.n_tickers)]


@dataclass
class GeneratedData:
    world: PlantedWorld
    b_star: np.ndarray          # N x N spillover coefficients
    truth_edges: set            # {(u, v)} with b_star[u, v] != 0
    returns: np.ndarray         # D x N close-to-close returns
    dates: list
    prices_path: Path
    articles_path: Path
    truth_path: Path


def _plant_edges(world, rng):
    n = world.n_tickers
    b = np.zeros((n, n))
    if world.structure == "hub":
        # bipartite spillover: a pool of driver tickers feeds hub targets
        # (several drivers per target). Drivers get no in-edges, so a
        # target's next-day move is only readable off its drivers' current
        # returns, never off its own history; missing edges cost signal
        m = max(2, min(n // 2, 10))
        spread = -(-world.n_edges // max(1, n - m))   # ceil division
        in_deg = min(m, max(2, spread))
        order = rng.permutation(n)
        sources = order[:m]
        rest = order[m:]
        remaining = world.n_edges
        for t in rest:
            if remaining <= 0:
                break
            take = min(in_deg, remaining)
            for idx in rng.choice(m, size=take, replace=False):
                b[t, sources[idx]] = world.spillover
            remaining -= take
        if remaining > 0:
            free = [(u, v) for u in range(n) for v in range(n)
                    if u != v and b[u, v] == 0.0]
            chosen = rng.choice(len(free), size=remaining, replace=False)
            for idx in chosen:
                u, v = free[idx]
                b[u, v] = world.spillover
    else:
        pairs = [(u, v) for u in range(n) for v in range(n) if u != v]
        chosen = rng.choice(len(pairs), size=world.n_edges, replace=False)
        for idx in chosen:
            u, v = pairs[idx]
            b[u, v] = world.spillover
    transition = world.momentum * np.eye(n) + b
    radius = float(np.abs(np.linalg.eigvals(transition)).max())
    if radius >= 1.0:
        raise ValueError(f"unstable return process: spectral radius {radius:.3f} >= 1")
    return b


def _simulate_returns(world, b, rng):
    n = world.n_tickers
    transition = world.momentum * np.eye(n) + b
    r = np.zeros((world.n_days, n))
    # tickers that drive others (nonzero spillover column) carry larger
    # innovations than the tickers they drive
    sigma = np.full(n, world.noise_scale)
    sigma[np.abs(b).sum(axis=0) > 0] *= world.source_noise_ratio
    eps = rng.normal(size=(world.n_days, n)) * sigma
    r[0] = eps[0]
    for t in range(1, world.n_days):
        r[t] = transition @ r[t - 1] + eps[t]
    return r


def _make_dates(world):
    start = datetime.date.fromisoformat(world.start_date)
    return [(start + datetime.timedelta(days=i)).isoformat()
            for i in range(world.n_days)]


def _write_prices(path, world, dates, returns, rng):
    close = 100.0 * np.cumprod(1.0 + returns, axis=0)
    open_ = np.vstack([np.full(world.n_tickers, 100.0), close[:-1]])
    spread = np.abs(rng.normal(scale=0.002, size=close.shape))
    high = np.maximum(open_, close) * (1.0 + spread)
    low = np.minimum(open_, close) * (1.0 - spread)
    volume = np.exp(rng.normal(loc=10.0, scale=0.5, size=close.shape))
    lines = ["date,ticker,open,high,low,close,volume"]
    for t, date in enumerate(dates):
        for j, sym in enumerate(world.tickers):
            lines.append(
                f"{date},{sym},{open_[t, j]:.6f},{high[t, j]:.6f},"
                f"{low[t, j]:.6f},{close[t, j]:.6f},{volume[t, j]:.2f}")
    Path(path).write_text("\n".join(lines) + "\n")


def _make_article_tokens(world, u, v, planted, rng):
    """Token layout: the operative pair leads, a distractor pair trails.

    Slots 0/1 hold the source and target mentions of the pair the article
    is about; slots 2-4 hold relation-vocabulary tokens when the article
    genuinely asserts the link. A distractor ticker pair is mentioned at
    random later slots, so telling the operative pair from the bystanders
    requires token positions, not just the bag of mentioned tickers.
    """
    lo, hi = world.relation_token_range
    flo, fhi = world.filler_token_range
    tokens = rng.integers(flo, fhi, size=world.article_len).tolist()
    tokens[0] = int(v)  # source ticker mention
    tokens[1] = int(u)  # target ticker mention
    if planted and rng.random() < world.p_signal:
        for s in range(2, 5):
            tokens[s] = int(rng.integers(lo, hi))
    extras = []
    if world.n_distractors > 0:
        extras = rng.choice(world.n_tickers, size=world.n_distractors,
                            replace=False).tolist()
        slots = rng.choice(world.article_len - 5, size=world.n_distractors,
                           replace=False) + 5
        for s, x in zip(slots, extras):
            tokens[int(s)] = int(x)
    return tokens, [int(x) for x in extras]


def _write_articles(path, world, dates, edges, seed):
    root = np.random.SeedSequence(seed)
    day_seeds = root.spawn(len(dates))
    edge_list = sorted(edges)
    with open(path, "w") as fh:
        for t, date in enumerate(dates):
            rng = np.random.default_rng(day_seeds[t])
            for i in range(world.articles_per_day):
                planted = bool(rng.random() < world.planted_mention_rate)
                if planted and edge_list:
                    u, v = edge_list[int(rng.integers(len(edge_list)))]
                else:
                    planted = False
                    u = int(rng.integers(world.n_tickers))
                    v = int((u + 1 + rng.integers(world.n_tickers - 1))
                            % world.n_tickers)
                tokens, extras = _make_article_tokens(world, u, v, planted, rng)
                fh.write(json.dumps({
                    "id": f"{date}-{i}",
                    "date": date,
                    "tokens": tokens,
                    "tickers": sorted({int(u), int(v), *extras}),
                }) + "\n")


def generate(world: PlantedWorld, seed, out_dir) -> GeneratedData:
    """Write prices.csv, articles.jsonl and truth_edges.csv under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    b = _plant_edges(world, rng)
    returns = _simulate_returns(world, b, rng)
    dates = _make_dates(world)

    prices_path = out_dir / "prices.csv"
    articles_path = out_dir / "articles.jsonl"
    truth_path = out_dir / "truth_edges.csv"
    _write_prices(prices_path, world, dates, returns, rng)
    truth_edges = {(u, v) for u, v in zip(*np.nonzero(b))}
    _write_articles(articles_path, world, dates, truth_edges, seed)
    lines = ["src,dst,coef"]
    for u, v in sorted(truth_edges):
        lines.append(f"{u},{v},{b[u, v]:.6f}")
    truth_path.write_text("\n".join(lines) + "\n")
    return GeneratedData(world=world, b_star=b, truth_edges=truth_edges,
                         returns=returns, dates=dates,
                         prices_path=prices_path, articles_path=articles_path,
                         truth_path=truth_path)


def load_truth_edges(path):
    edges = set()
    with open(path) as fh:
        next(fh)
        for line in fh:
            u, v, _ = line.strip().split(",")
            edges.add((int(u), int(v)))
    return edges


@dataclass
class RecoveryScore:
    precision: float
    recall: float
    f1: float


def edge_recovery_score(predicted, truth_edges) -> RecoveryScore:
    """Directed edge-set precision/recall/F1, diagonal excluded."""
    if isinstance(predicted, DailyGraph):
        adjacency = predicted.adjacency
    else:
        adjacency = np.asarray(predicted, dtype=bool)
    pred = {(int(u), int(v)) for u, v in zip(*np.nonzero(adjacency)) if u != v}
    truth = {(u, v) for u, v in truth_edges if u != v}
    tp = len(pred & truth)
    precision = tp / len(pred) if pred else 0.0
    recall = tp / len(truth) if truth else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall > 0 else 0.0)
    return RecoveryScore(precision=precision, recall=recall, f1=f1)
