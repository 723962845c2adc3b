"""Article and market encoders.

Token hidden states come from either a small trainable transformer block
(the stand-in backbone) or from RPHS files exported by a real language
model. Node features for the graph come from an LSTM over per-ticker
market windows only; the article stream never touches them.
"""
from __future__ import annotations

import enum
import json
import re
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

RPHS_MAGIC = b"RPHS"
RPHS_VERSION = 1

_WORD_RE = re.compile(r"[A-Za-z0-9_]+")


class ContextMode(enum.Enum):
    INPUT_ONLY = 0
    INPUT_PLUS_GEN = 1


class RPHSError(ValueError):
    """Malformed hidden-state file."""


@dataclass
class Article:
    article_id: str
    date: str  # ISO-8601 calendar day
    tokens: list
    tickers: list  # mentioned ticker indices

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise ValueError(f"article {self.article_id} has no tokens")


@dataclass
class HiddenStates:
    states: Tensor  # L x d
    input_len: int
    context: ContextMode

    def __post_init__(self):
        L = self.states.shape[0]
        if self.input_len > L:
            raise RPHSError(f"input_len {self.input_len} exceeds L={L}")
        if self.context is ContextMode.INPUT_ONLY and self.input_len != L:
            raise RPHSError(
                f"InputOnly requires input_len == L, got {self.input_len} != {L}")


def select_context(h: HiddenStates, mode: ContextMode) -> Tensor:
    """Pick the token rows the relation head is allowed to see."""
    if mode is ContextMode.INPUT_PLUS_GEN:
        if h.context is not ContextMode.INPUT_PLUS_GEN:
            raise ValueError("Input+Gen requested but states carry no generated rows")
        return h.states
    if h.input_len == h.states.shape[0]:
        return h.states
    return ad.take_rows(h.states, np.arange(h.input_len))


# --- RPHS hidden-state files -----------------------------------------------

def save_hidden_states(path, states, input_len, context: ContextMode):
    states = np.ascontiguousarray(
        states.data if isinstance(states, Tensor) else states, dtype="<f4")
    L, d = states.shape
    with open(path, "wb") as fh:
        fh.write(RPHS_MAGIC)
        fh.write(struct.pack("<IIII", RPHS_VERSION, L, d, int(input_len)))
        fh.write(struct.pack("<B3x", context.value))
        fh.write(states.tobytes())


def load_hidden_states(path) -> HiddenStates:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != RPHS_MAGIC:
        raise RPHSError(f"bad magic {blob[:4]!r} at offset 0 in {path}")
    if len(blob) < 24:
        raise RPHSError(f"truncated header in {path}")
    version, L, d, input_len = struct.unpack_from("<IIII", blob, 4)
    if version != RPHS_VERSION:
        raise RPHSError(f"unsupported RPHS version {version} in {path}")
    (context_flag,) = struct.unpack_from("<B", blob, 20)
    try:
        context = ContextMode(context_flag)
    except ValueError:
        raise RPHSError(f"unknown context flag {context_flag} in {path}") from None
    payload = blob[24:]
    if len(payload) != 4 * L * d:
        raise RPHSError(
            f"truncated payload in {path}: expected {4 * L * d} bytes, got {len(payload)}")
    states = np.frombuffer(payload, dtype="<f4").reshape(L, d).copy()
    if input_len > L:
        raise RPHSError(f"input_len {input_len} exceeds L={L} in {path}")
    return HiddenStates(states=Tensor(states), input_len=int(input_len),
                        context=context)


# --- toy article encoder ------------------------------------------------------

@dataclass
class ToyEncoderParams:
    token_emb: Tensor   # vocab x d
    pos_emb: Tensor     # L_max x d
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    w_ff1: Tensor       # d x 4d
    b_ff1: Tensor
    w_ff2: Tensor       # 4d x d
    b_ff2: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    @property
    def vocab_size(self):
        return self.token_emb.shape[0]

    @property
    def d(self):
        return self.token_emb.shape[1]

    def named(self, prefix="encoder"):
        return {f"{prefix}.{k}": v for k, v in vars(self).items()}


def init_toy_encoder(vocab_size, d, l_max, rng, dtype=np.float64):
    def w(*shape, scale=None):
        scale = scale if scale is not None else 1.0 / np.sqrt(shape[0])
        return Tensor(rng.standard_normal(shape).astype(dtype) * scale,
                      requires_grad=True)

    return ToyEncoderParams(
        token_emb=w(vocab_size, d, scale=0.1),
        pos_emb=w(l_max, d, scale=0.1),
        w_q=w(d, d), w_k=w(d, d), w_v=w(d, d), w_o=w(d, d),
        ln1_gain=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
        ln1_bias=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
        w_ff1=w(d, 4 * d), b_ff1=Tensor(np.zeros(4 * d, dtype=dtype), requires_grad=True),
        w_ff2=w(4 * d, d), b_ff2=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
        ln2_gain=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
        ln2_bias=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
    )


def encode_article(params: ToyEncoderParams, article: Article) -> HiddenStates:
    """One pre-norm attention block over token + positional embeddings."""
    tokens = np.asarray(article.tokens, dtype=np.int64)
    for pos, tok in enumerate(tokens):
        if tok < 0 or tok >= params.vocab_size:
            raise ValueError(
                f"token id {tok} at position {pos} outside vocab "
                f"(size {params.vocab_size})")
    if len(tokens) > params.pos_emb.shape[0]:
        raise ValueError(
            f"article length {len(tokens)} exceeds L_max {params.pos_emb.shape[0]}")
    L = len(tokens)
    x = ad.take_rows(params.token_emb, tokens) + ad.take_rows(
        params.pos_emb, np.arange(L))

    h1 = ad.layer_norm(x) * params.ln1_gain + params.ln1_bias
    q = h1 @ params.w_q
    k = h1 @ params.w_k
    v = h1 @ params.w_v
    att = ad.row_softmax((q @ k.T) / np.sqrt(params.d))
    x = x + (att @ v) @ params.w_o

    h2 = ad.layer_norm(x) * params.ln2_gain + params.ln2_bias
    ff = ad.elu(h2 @ params.w_ff1 + params.b_ff1) @ params.w_ff2 + params.b_ff2
    x = x + ff
    return HiddenStates(states=x, input_len=L, context=ContextMode.INPUT_ONLY)


# --- LSTM market encoder -------------------------------------------------------

@dataclass
class LSTMParams:
    w_i: Tensor
    u_i: Tensor
    b_i: Tensor
    w_f: Tensor
    u_f: Tensor
    b_f: Tensor
    w_g: Tensor
    u_g: Tensor
    b_g: Tensor
    w_o: Tensor
    u_o: Tensor
    b_o: Tensor

    @property
    def hidden_size(self):
        return self.u_i.shape[0]

    def named(self, prefix="lstm"):
        return {f"{prefix}.{k}": v for k, v in vars(self).items()}


def init_lstm(p, d_p, rng, dtype=np.float64):
    def w(rows, cols):
        return Tensor(rng.standard_normal((rows, cols)).astype(dtype)
                      / np.sqrt(rows), requires_grad=True)

    def b():
        return Tensor(np.zeros(d_p, dtype=dtype), requires_grad=True)

    return LSTMParams(
        w_i=w(p, d_p), u_i=w(d_p, d_p), b_i=b(),
        w_f=w(p, d_p), u_f=w(d_p, d_p), b_f=b(),
        w_g=w(p, d_p), u_g=w(d_p, d_p), b_g=b(),
        w_o=w(p, d_p), u_o=w(d_p, d_p), b_o=b(),
    )


def encode_nodes(params: LSTMParams, windows) -> Tensor:
    """LSTM scan over stacked windows (N x T x p) -> node features N x d_p.

    Initial hidden and cell states are zero.
    """
    windows = np.asarray(windows)
    if windows.ndim != 3:
        raise ad.ShapeError(f"expected N x T x p windows, got {windows.shape}")
    n, t_steps, _ = windows.shape
    for t in range(t_steps):
        if not np.isfinite(windows[:, t, :]).all():
            raise ValueError(f"non-finite market feature at step {t}")
    d_p = params.hidden_size
    h = Tensor(np.zeros((n, d_p), dtype=windows.dtype))
    c = Tensor(np.zeros((n, d_p), dtype=windows.dtype))
    for t in range(t_steps):
        x = Tensor(windows[:, t, :])
        i = ad.sigmoid(x @ params.w_i + h @ params.u_i + params.b_i)
        f = ad.sigmoid(x @ params.w_f + h @ params.u_f + params.b_f)
        g = ad.tanh(x @ params.w_g + h @ params.u_g + params.b_g)
        o = ad.sigmoid(x @ params.w_o + h @ params.u_o + params.b_o)
        c = f * c + i * g
        h = o * ad.tanh(c)
    return h


def encode_node(params: LSTMParams, window) -> Tensor:
    """Single-ticker variant: T x p window -> d_p feature vector."""
    window = np.asarray(window)
    if window.ndim != 2:
        raise ad.ShapeError(f"expected T x p window, got {window.shape}")
    out = encode_nodes(params, window[None, :, :])
    return ad.reshape(out, (params.hidden_size,))


# --- ingestion ---------------------------------------------------------------

@dataclass
class PricePanel:
    dates: list
    tickers: list
    open: np.ndarray    # D x N
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray

    @property
    def n_tickers(self):
        return len(self.tickers)


def _forward_fill(arr):
    out = arr.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        last = np.nan
        for i in range(len(col)):
            if np.isnan(col[i]):
                col[i] = last
            else:
                last = col[i]
        # leading gaps: backfill from the first observation
        first = col[~np.isnan(col)]
        if len(first):
            col[np.isnan(col)] = first[0]
    return out


def load_prices(path) -> PricePanel:
    """Read `date,ticker,open,high,low,close,volume` CSV into a dense panel."""
    import csv

    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"date", "ticker", "open", "high", "low", "close", "volume"}
        if reader.fieldnames is None or not expected.issubset(reader.fieldnames):
            raise ValueError(f"price CSV {path} missing columns "
                             f"{sorted(expected - set(reader.fieldnames or []))}")
        for row in reader:
            rows.append(row)
    dates = sorted({r["date"] for r in rows})
    tickers = sorted({r["ticker"] for r in rows})
    d_idx = {d: i for i, d in enumerate(dates)}
    t_idx = {t: i for i, t in enumerate(tickers)}
    fields = {f: np.full((len(dates), len(tickers)), np.nan)
              for f in ("open", "high", "low", "close", "volume")}
    for r in rows:
        i, j = d_idx[r["date"]], t_idx[r["ticker"]]
        for f in fields:
            fields[f][i, j] = float(r[f])
    fields = {f: _forward_fill(v) for f, v in fields.items()}
    return PricePanel(dates=dates, tickers=tickers, **fields)


def market_features(panel: PricePanel):
    """Per-day features: o/h/l/c simple returns + log volume change.

    Output is (D-1) x N x 5 aligned to panel.dates[1:].
    """
    def ret(x):
        return x[1:] / x[:-1] - 1.0

    vol = np.log(np.maximum(panel.volume, 1e-9))
    feats = np.stack([
        ret(panel.open), ret(panel.high), ret(panel.low), ret(panel.close),
        vol[1:] - vol[:-1],
    ], axis=-1)
    return feats


def zscore_features(feats, train_end):
    """Standardize per ticker/feature using only rows < train_end."""
    mu = feats[:train_end].mean(axis=0, keepdims=True)
    sd = feats[:train_end].std(axis=0, keepdims=True)
    return (feats - mu) / np.maximum(sd, 1e-8)


def tokenize(text):
    return _WORD_RE.findall(text.lower())


def load_articles(path, vocab=None):
    """Read JSON-lines articles. Raw `text` is tokenized and mapped through
    the (growing) vocab dict; pre-tokenized `tokens` pass straight through."""
    articles = []
    vocab = vocab if vocab is not None else {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "tokens" in obj:
                tokens = [int(t) for t in obj["tokens"]]
            elif "text" in obj:
                words = tokenize(obj["text"])
                tokens = [vocab.setdefault(w, len(vocab)) for w in words]
            else:
                raise ValueError(f"article on line {line_no} has neither "
                                 "'tokens' nor 'text'")
            articles.append(Article(
                article_id=str(obj["id"]),
                date=str(obj["date"]),
                tokens=tokens,
                tickers=[int(t) for t in obj.get("tickers", [])],
            ))
    return articles
