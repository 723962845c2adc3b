import numpy as np
import pytest

from relprobe.encoders import load_articles, load_prices
from relprobe.graph_builder import build_cooccurrence_graph
from relprobe.synth import (
    PlantedWorld,
    edge_recovery_score,
    generate,
    load_truth_edges,
)
from relprobe.trainer import make_labels

SMALL = PlantedWorld(n_tickers=6, n_days=60, articles_per_day=4,
                     article_len=12, vocab_size=60, relation_vocab_size=8,
                     n_edges=8)


def test_deterministic_given_seed(tmp_path):
    d1 = generate(SMALL, seed=7, out_dir=tmp_path / "a")
    d2 = generate(SMALL, seed=7, out_dir=tmp_path / "b")
    assert d1.prices_path.read_bytes() == d2.prices_path.read_bytes()
    assert d1.articles_path.read_bytes() == d2.articles_path.read_bytes()
    assert d1.truth_path.read_bytes() == d2.truth_path.read_bytes()


def test_different_seed_differs(tmp_path):
    d1 = generate(SMALL, seed=7, out_dir=tmp_path / "a")
    d2 = generate(SMALL, seed=8, out_dir=tmp_path / "b")
    assert d1.prices_path.read_bytes() != d2.prices_path.read_bytes()


def test_outputs_parse_with_ingestion(tmp_path):
    data = generate(SMALL, seed=1, out_dir=tmp_path)
    panel = load_prices(data.prices_path)
    assert panel.tickers == SMALL.tickers
    assert len(panel.dates) == SMALL.n_days
    articles = load_articles(data.articles_path)
    assert len(articles) == SMALL.n_days * SMALL.articles_per_day
    assert all(len(a.tokens) == SMALL.article_len for a in articles)
    truth = load_truth_edges(data.truth_path)
    assert truth == data.truth_edges
    assert len(truth) == SMALL.n_edges


def test_iid_world_label_distribution(tmp_path):
    world = PlantedWorld(n_tickers=10, n_days=2000, articles_per_day=1,
                         article_len=12, vocab_size=60,
                         relation_vocab_size=8, n_edges=0,
                         spillover=0.0, momentum=0.0)
    data = generate(world, seed=2, out_dir=tmp_path)
    labels = make_labels(data.returns)
    labeled = labels[labels != -1]
    # i.i.d. Gaussian: ~0.3174 beyond 1 sigma, split across the two tails
    shares = np.bincount(labeled, minlength=3) / len(labeled)
    assert shares[1] == pytest.approx(1 - 0.3174, abs=0.02)
    assert shares[0] == pytest.approx(0.1587, abs=0.02)
    assert shares[2] == pytest.approx(0.1587, abs=0.02)


def test_pure_signal_cooccurrence_matches_planted_support(tmp_path):
    world = PlantedWorld(n_tickers=6, n_days=20, articles_per_day=6,
                         article_len=12, vocab_size=60,
                         relation_vocab_size=8, n_edges=8,
                         p_signal=1.0, planted_mention_rate=1.0,
                         n_distractors=0)
    data = generate(world, seed=3, out_dir=tmp_path)
    articles = load_articles(data.articles_path)
    undirected_truth = {frozenset(e) for e in data.truth_edges}
    by_date = {}
    for a in articles:
        by_date.setdefault(a.date, []).append(a)
    for date, arts in by_date.items():
        g = build_cooccurrence_graph(arts, n=6, date=date)
        for u, v in zip(*np.nonzero(g.adjacency)):
            assert frozenset((int(u), int(v))) in undirected_truth


def test_unstable_world_rejected(tmp_path):
    world = PlantedWorld(n_tickers=4, n_days=10, vocab_size=60,
                         relation_vocab_size=8, n_edges=12, spillover=0.9)
    with pytest.raises(ValueError, match="spectral radius"):
        generate(world, seed=0, out_dir=tmp_path)


def test_labels_follow_std_rule_exactly(tmp_path):
    data = generate(SMALL, seed=5, out_dir=tmp_path)
    labels = make_labels(data.returns)
    std = data.returns.std(axis=0)
    for u in range(SMALL.n_tickers):
        for t in range(SMALL.n_days - 1):
            nxt = data.returns[t + 1, u]
            expected = 2 if nxt > std[u] else (0 if nxt < -std[u] else 1)
            assert labels[t, u] == expected


# --- edge recovery ------------------------------------------------------------

def test_recovery_perfect():
    truth = {(0, 1), (2, 3)}
    adjacency = np.zeros((4, 4), dtype=bool)
    adjacency[0, 1] = adjacency[2, 3] = True
    s = edge_recovery_score(adjacency, truth)
    assert s.f1 == 1.0


def test_recovery_empty_prediction():
    s = edge_recovery_score(np.zeros((4, 4), dtype=bool), {(0, 1)})
    assert (s.precision, s.recall, s.f1) == (0.0, 0.0, 0.0)


def test_recovery_matches_bruteforce_sets():
    rng = np.random.default_rng(11)
    adjacency = rng.random((5, 5)) > 0.6
    np.fill_diagonal(adjacency, False)
    truth = {(int(u), int(v)) for u, v in
             rng.integers(0, 5, size=(6, 2)) if u != v}
    s = edge_recovery_score(adjacency, truth)
    pred = {(u, v) for u in range(5) for v in range(5)
            if adjacency[u, v] and u != v}
    tp = len(pred & truth)
    prec = tp / len(pred) if pred else 0.0
    rec = tp / len(truth) if truth else 0.0
    assert s.precision == pytest.approx(prec)
    assert s.recall == pytest.approx(rec)
    if prec + rec:
        assert s.f1 == pytest.approx(2 * prec * rec / (prec + rec))


def test_recovery_excludes_diagonal():
    adjacency = np.eye(3, dtype=bool)
    s = edge_recovery_score(adjacency, {(0, 0), (1, 1)})
    assert s.f1 == 0.0


def test_generation_speed():
    import time
    import tempfile
    start = time.time()
    with tempfile.TemporaryDirectory() as d:
        generate(PlantedWorld(), seed=0, out_dir=d)
    assert time.time() - start < 60
