"""Joint training: encoder -> relation head -> day graph -> GAT -> loss.

One trading day is one optimization step; the class-weighted cross-entropy
is summed over labeled tickers within the day. The learning-rate sweep
re-initializes every parameter group from the same seed, trains with early
stopping on validation macro F1, and keeps the overall best checkpoint.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from . import encoders as enc
from .encoders import ContextMode, load_hidden_states, select_context
from .gat import GATParams, NodeBatch, init_gat, predict
from .graph_builder import ThresholdConfig, build_cooccurrence_graph, build_day_graph
from .metrics import evaluate
from .relation_head import (
    EmptyMentionError,
    HeadVariant,
    apply_head,
    init_relation_head,
)

log = logging.getLogger("relprobe")

NEGATIVE, NEUTRAL, POSITIVE = 0, 1, 2
UNLABELED = -1
LOG_EPS = 1e-12


@dataclass
class TrainConfig:
    learning_rates: tuple = (1e-3, 1e-4, 1e-5)
    max_epochs: int = 30
    patience: int = 5
    class_weights: tuple = (5.0, 1.0, 5.0)
    seed: int = 13423
    d_p: int = 128
    tau: float = 0.5
    zero_diagonal: bool = True
    split: tuple = (8, 1, 1)
    lookback: int = 20
    encoder_d: int = 64
    encoder_l_max: int = 64
    vocab_size: int = 200
    encoder_mode: str = "joint"        # joint | frozen
    head_variant: str = "full"         # full | limited | pooling
    context_mode: str = "io"           # io | ig (imported states only)
    baseline: str = "none"             # none | cooccurrence
    gat_layers: int = 2
    train_std_only: bool = False       # label std over train split instead of full period


# --- labels -----------------------------------------------------------------

def make_labels(returns, std_end=None):
    """Three-class labels from next-day returns vs per-ticker return std.

    returns: D x N. Row t is labeled from returns[t + 1]; the last row and
    tickers with fewer than two observations stay UNLABELED. Returns exactly
    at +-std map to neutral (strict inequalities).
    """
    returns = np.asarray(returns, dtype=np.float64)
    d, n = returns.shape
    labels = np.full((d, n), UNLABELED, dtype=np.int64)
    if d < 2:
        return labels
    ref = returns if std_end is None else returns[:std_end]
    std = ref.std(axis=0)
    nxt = returns[1:]
    lab = np.full((d - 1, n), NEUTRAL, dtype=np.int64)
    lab[nxt > std] = POSITIVE
    lab[nxt < -std] = NEGATIVE
    labels[:-1] = lab
    return labels


# --- loss ---------------------------------------------------------------------

def weighted_ce(y_hat: Tensor, labels, mask, weights):
    """-sum over labeled tickers of w[y] * log y_hat[y]; summed, not averaged."""
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    n = y_hat.shape[0]
    coeff = np.zeros((n, y_hat.shape[1]), dtype=y_hat.data.dtype)
    idx = np.nonzero(mask)[0]
    coeff[idx, labels[idx]] = np.asarray(weights)[labels[idx]]
    return -(Tensor(coeff) * ad.log(ad.clip_min(y_hat, LOG_EPS))).sum()


# --- Adam ------------------------------------------------------------------------

class Adam:
    """Standard Adam with bias correction over a named parameter dict."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        for name, p in self.params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise ValueError(f"non-finite gradient on parameter '{name}'; "
                                 "step aborted")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            new = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            # keep optimizer state on the float32 grid so that a checkpoint
            # round-trip (float32 payloads) resumes bit-for-bit
            p.data = new.astype(np.float32).astype(new.dtype)
            self.m[name] = self.m[name].astype(np.float32).astype(new.dtype)
            self.v[name] = self.v[name].astype(np.float32).astype(new.dtype)

    def state_dict(self):
        out = {"adam.t": np.float32(self.t)}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_dict(self, state):
        self.t = int(np.asarray(state["adam.t"]).reshape(()))
        for name in self.params:
            dtype = self.params[name].data.dtype
            self.m[name] = np.array(state[f"adam.m.{name}"], dtype=dtype)
            self.v[name] = np.array(state[f"adam.v.{name}"], dtype=dtype)


# --- dataset ---------------------------------------------------------------------

@dataclass
class LabeledDay:
    date: str
    windows: np.ndarray   # N x T x p
    labels: np.ndarray    # N ints, UNLABELED where undefined
    labeled_mask: np.ndarray
    articles: list


@dataclass
class DaySplits:
    days: list            # LabeledDay, chronological
    train: list           # indices into days
    val: list
    test: list
    n_tickers: int
    tickers: list


def chronological_split(n_usable, ratio):
    total = sum(ratio)
    n_train = int(n_usable * ratio[0] / total)
    n_val = int(n_usable * ratio[1] / total)
    train = list(range(n_train))
    val = list(range(n_train, n_train + n_val))
    test = list(range(n_train + n_val, n_usable))
    return train, val, test


def build_dataset(panel, articles, config: TrainConfig) -> DaySplits:
    """Assemble per-day windows, labels and article groups, chronologically.

    Day t's prediction consumes the feature window ending at t and articles
    dated t; its label comes from the t+1 close return. No look-ahead.
    """
    feats = enc.market_features(panel)      # (D-1) x N x 5, aligned to dates[1:]
    dates = panel.dates[1:]
    close_ret = panel.close[1:] / panel.close[:-1] - 1.0
    t = config.lookback
    usable = list(range(t - 1, len(dates) - 1))
    if not usable:
        raise ValueError("not enough days for the configured lookback")
    train_idx, val_idx, test_idx = chronological_split(len(usable), config.split)
    train_end_feature_row = usable[train_idx[-1]] + 1 if train_idx else len(dates)
    z = enc.zscore_features(feats, train_end_feature_row)
    std_end = train_end_feature_row if config.train_std_only else None
    labels = make_labels(close_ret, std_end=std_end)

    by_date = {}
    for a in articles:
        by_date.setdefault(a.date, []).append(a)

    days = []
    for j in usable:
        days.append(LabeledDay(
            date=dates[j],
            windows=np.transpose(z[j - t + 1:j + 1], (1, 0, 2)).astype(np.float32),
            labels=labels[j],
            labeled_mask=labels[j] != UNLABELED,
            articles=by_date.get(dates[j], []),
        ))
    return DaySplits(days=days, train=train_idx, val=val_idx, test=test_idx,
                     n_tickers=panel.n_tickers, tickers=panel.tickers)


# --- model -------------------------------------------------------------------------

@dataclass
class PipelineModel:
    config: TrainConfig
    n_tickers: int
    encoder: enc.ToyEncoderParams | None
    head: object | None
    lstm: enc.LSTMParams
    gat: GATParams
    hidden_cache: dict = field(default_factory=dict)  # article_id -> HiddenStates
    threshold: ThresholdConfig = None

    def __post_init__(self):
        if self.threshold is None:
            self.threshold = ThresholdConfig(tau=self.config.tau,
                                             zero_diagonal=self.config.zero_diagonal)

    @property
    def head_variant(self):
        return HeadVariant(self.config.head_variant)

    @property
    def context(self):
        return (ContextMode.INPUT_PLUS_GEN if self.config.context_mode == "ig"
                else ContextMode.INPUT_ONLY)

    def named_params(self, trainable_only=True):
        out = {}
        if self.encoder is not None and (
                not trainable_only or self.config.encoder_mode == "joint"):
            out.update(self.encoder.named())
        if self.head is not None:
            out.update(self.head.named())
        out.update(self.lstm.named())
        out.update(self.gat.named())
        return out

    def article_states(self, article):
        cached = self.hidden_cache.get(article.article_id)
        if cached is not None:
            return cached
        states = enc.encode_article(self.encoder, article)
        return states

    def day_graph(self, day: LabeledDay):
        if self.config.baseline == "cooccurrence":
            return build_cooccurrence_graph(day.articles, self.n_tickers,
                                            date=day.date)
        interactions = []
        for article in day.articles:
            h = select_context(self.article_states(article), self.context)
            try:
                interactions.append(apply_head(self.head_variant, self.head, h,
                                               mentioned=article.tickers))
            except EmptyMentionError:
                log.info("skipping article %s: no mentioned tickers",
                         article.article_id)
        return build_day_graph(interactions, self.threshold, date=day.date,
                               n=self.n_tickers)

    def forward_day(self, day: LabeledDay):
        graph = self.day_graph(day)
        features = enc.encode_nodes(self.lstm, day.windows)
        return predict(self.gat, NodeBatch(features=features, graph=graph)), graph


def init_model(config: TrainConfig, n_tickers, rng) -> PipelineModel:
    needs_head = config.baseline == "none"
    encoder = (enc.init_toy_encoder(config.vocab_size, config.encoder_d,
                                    config.encoder_l_max, rng)
               if needs_head else None)
    head = (init_relation_head(n_tickers, config.encoder_d, config.d_p, rng)
            if needs_head else None)
    lstm = enc.init_lstm(p=5, d_p=config.d_p, rng=rng)
    gat = init_gat(config.d_p, hidden=config.d_p, n_layers=config.gat_layers,
                   rng=rng)
    return PipelineModel(config=config, n_tickers=n_tickers, encoder=encoder,
                         head=head, lstm=lstm, gat=gat)


def freeze_hidden_states(model: PipelineModel, days):
    """Pre-encode every article once; backbone stays fixed (pure probing)."""
    with ad.no_grad():
        for day in days:
            for article in day.articles:
                if article.article_id not in model.hidden_cache:
                    model.hidden_cache[article.article_id] = enc.encode_article(
                        model.encoder, article)


def import_hidden_states(model: PipelineModel, days, state_dir, suffix=".rphs"):
    """Load exported hidden states; d is taken from the files, not config."""
    from pathlib import Path

    state_dir = Path(state_dir)
    d_seen = None
    for day in days:
        for article in day.articles:
            h = load_hidden_states(state_dir / f"{article.article_id}{suffix}")
            if d_seen is None:
                d_seen = h.states.shape[1]
            elif h.states.shape[1] != d_seen:
                raise ValueError(
                    f"inconsistent hidden size in {state_dir}: "
                    f"{h.states.shape[1]} != {d_seen}")
            model.hidden_cache[article.article_id] = h
    return d_seen


# --- training loop --------------------------------------------------------------

@dataclass
class LogRow:
    epoch: int
    lr: float
    split: str
    accuracy: float
    macro_f1: float
    mcc: float
    auc: float
    loss: float

    def as_csv(self):
        return (f"{self.epoch},{self.lr!r},{self.split},{self.accuracy!r},"
                f"{self.macro_f1!r},{self.mcc!r},{self.auc!r},{self.loss!r}")


@dataclass
class TrainResult:
    best_params: dict          # name -> ndarray snapshot
    best_lr: float
    best_epoch: int
    best_val_macro_f1: float
    log_rows: list
    config: TrainConfig


def evaluate_split(model: PipelineModel, splits: DaySplits, indices):
    """Deterministic ordered pass over the given days; returns (bundle, loss)."""
    probs, labels = [], []
    total_loss = 0.0
    weights = np.asarray(model.config.class_weights)
    with ad.no_grad():
        for i in indices:
            day = splits.days[i]
            y_hat, _ = model.forward_day(day)
            mask = day.labeled_mask
            if mask.any():
                probs.append(y_hat.data[mask])
                labels.append(day.labels[mask])
            total_loss += float(weighted_ce(y_hat, day.labels, mask,
                                            weights).data)
    if not probs:
        raise ValueError("no labeled tickers in evaluation split")
    bundle = evaluate(np.concatenate(probs), np.concatenate(labels))
    return bundle, total_loss


class EpochRunner:
    """One lr's optimization state; exposes epoch stepping for resume."""

    def __init__(self, model: PipelineModel, splits: DaySplits, lr):
        self.model = model
        self.splits = splits
        self.optimizer = Adam(model.named_params(), lr=lr)
        self.epoch = 0

    def run_epoch(self):
        cfg = self.model.config
        weights = np.asarray(cfg.class_weights)
        train_loss = 0.0
        probs, labels = [], []
        for i in self.splits.train:
            day = self.splits.days[i]
            self.optimizer.zero_grad()
            y_hat, _ = self.model.forward_day(day)
            loss = weighted_ce(y_hat, day.labels, day.labeled_mask, weights)
            loss.backward()
            self.optimizer.step()
            train_loss += float(loss.data)
            if day.labeled_mask.any():
                probs.append(y_hat.data[day.labeled_mask])
                labels.append(day.labels[day.labeled_mask])
        self.epoch += 1
        # running train metrics from the step-time predictions (no extra pass)
        train_bundle = evaluate(np.concatenate(probs), np.concatenate(labels))
        val_bundle, val_loss = evaluate_split(self.model, self.splits,
                                              self.splits.val)
        return train_loss, train_bundle, val_bundle, val_loss

    def state_dict(self):
        out = {"runner.epoch": np.float32(self.epoch)}
        for name, p in self.model.named_params(trainable_only=False).items():
            out[f"param.{name}"] = p.data
        out.update(self.optimizer.state_dict())
        return out

    def load_state_dict(self, state):
        self.epoch = int(np.asarray(state["runner.epoch"]).reshape(()))
        for name, p in self.model.named_params(trainable_only=False).items():
            p.data = np.array(state[f"param.{name}"], dtype=p.data.dtype)
        self.optimizer.load_state_dict(state)


def snapshot_params(model: PipelineModel):
    return {name: p.data.copy()
            for name, p in model.named_params(trainable_only=False).items()}


def restore_params(model: PipelineModel, snapshot):
    for name, p in model.named_params(trainable_only=False).items():
        p.data = np.array(snapshot[name], dtype=p.data.dtype)


def prepare_model(config: TrainConfig, splits: DaySplits, hidden_state_dir=None):
    rng = np.random.default_rng(config.seed)
    model = init_model(config, splits.n_tickers, rng)
    if model.head is not None:
        if hidden_state_dir is not None:
            d = import_hidden_states(model, splits.days, hidden_state_dir)
            model.encoder = None  # imported states replace the toy backbone
            if d != config.encoder_d:
                # hidden size is data on the import path; rebuild the head
                model.head = init_relation_head(
                    splits.n_tickers, d, config.d_p,
                    np.random.default_rng(config.seed + 1))
        elif config.encoder_mode == "frozen":
            freeze_hidden_states(model, splits.days)
    return model


def train(config: TrainConfig, splits: DaySplits, hidden_state_dir=None) -> TrainResult:
    """Learning-rate sweep with early stopping on validation macro F1."""
    if not splits.train or not splits.val or not splits.test:
        raise ValueError("empty split: train/val/test must all be non-empty")
    log_rows = []
    best = None  # (macro_f1, lr, epoch, snapshot)
    for lr in config.learning_rates:
        model = prepare_model(config, splits, hidden_state_dir)
        runner = EpochRunner(model, splits, lr)
        best_val = -np.inf
        stale = 0
        for epoch in range(1, config.max_epochs + 1):
            train_loss, train_bundle, val_bundle, val_loss = runner.run_epoch()
            log_rows.append(LogRow(epoch, lr, "train", train_bundle.accuracy,
                                   train_bundle.macro_f1, train_bundle.mcc,
                                   train_bundle.auc, train_loss))
            log_rows.append(LogRow(epoch, lr, "val", val_bundle.accuracy,
                                   val_bundle.macro_f1, val_bundle.mcc,
                                   val_bundle.auc, val_loss))
            if val_bundle.macro_f1 > best_val:
                best_val = val_bundle.macro_f1
                stale = 0
                if best is None or val_bundle.macro_f1 > best[0]:
                    best = (val_bundle.macro_f1, lr, epoch, snapshot_params(model))
            else:
                stale += 1
                if stale > config.patience:
                    break
    best_f1, best_lr, best_epoch, snapshot = best
    return TrainResult(best_params=snapshot, best_lr=best_lr,
                       best_epoch=best_epoch, best_val_macro_f1=best_f1,
                       log_rows=log_rows, config=config)


def write_log_csv(path, rows):
    lines = ["epoch,lr,split,accuracy,macro_f1,mcc,auc,loss"]
    lines.extend(r.as_csv() for r in rows)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
