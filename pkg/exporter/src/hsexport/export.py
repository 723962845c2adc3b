"""Run articles through a causal language model and export hidden states.

Each article is wrapped in a fixed relation-extraction prompt, the model
runs once over the prompt (and, in input-plus-gen mode, greedily decodes
a short continuation), and the final-layer hidden state of every position
is written to one RPHS file per article.
"""
from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import torch

from .rphs import CONTEXT_INPUT_ONLY, CONTEXT_INPUT_PLUS_GEN, write_rphs

log = logging.getLogger("hsexport")

PROMPT_TEMPLATE = (
    "Please read the following news text and determine whether there is a "
    "connection between the stocks {tickers} and whether they may influence "
    "each other.\n"
    "Hint: There may be positive or negative correlations.\n"
    "News Article: {news_text}"
)


@dataclass
class Article:
    article_id: str
    date: str
    text: str
    tickers: list


@dataclass
class ExportJob:
    model: str                 # model name or local directory
    articles: str              # JSONL path
    tickers: list              # universe of ticker symbols, index-aligned
    context: str = "io"        # io | ig
    max_gen: int = 8
    out: str = "hidden_states"

    def __post_init__(self):
        if self.context not in ("io", "ig"):
            raise ValueError(f"context must be 'io' or 'ig', got {self.context!r}")
        if self.context == "ig" and self.max_gen < 1:
            raise ValueError("input-plus-gen context requires max_gen >= 1")


def load_articles(path, tickers):
    """Parse article JSONL; token-id articles are rendered as word tokens."""
    articles = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            raw = json.loads(line)
            if "text" in raw:
                text = raw["text"]
            elif "tokens" in raw:
                text = " ".join(f"tok{t}" for t in raw["tokens"])
            else:
                raise ValueError(f"article on line {i + 1} has no text or tokens")
            mentioned = [tickers[t] if isinstance(t, int) else str(t)
                         for t in raw.get("tickers", [])]
            articles.append(Article(article_id=str(raw["id"]), date=raw["date"],
                                    text=text, tickers=mentioned))
    return articles


def render_prompt(article: Article) -> str:
    names = ", ".join(article.tickers) if article.tickers else "mentioned"
    return PROMPT_TEMPLATE.format(tickers=names, news_text=article.text)


def _final_layer_states(model, input_ids):
    with torch.no_grad():
        out = model(input_ids=input_ids, output_hidden_states=True)
    return out.hidden_states[-1][0], out.logits


def _greedy_extend(model, input_ids, max_gen, max_positions):
    """Greedy decoding, re-running the full sequence each step.

    Slow but simple; export batches are small and correctness (exact
    final-layer states for every position) matters more than speed here.
    """
    ids = input_ids
    for _ in range(max_gen):
        if ids.shape[1] >= max_positions:
            break
        with torch.no_grad():
            logits = model(input_ids=ids).logits
        nxt = int(torch.argmax(logits[0, -1]))
        ids = torch.cat([ids, torch.tensor([[nxt]], dtype=ids.dtype)], dim=1)
    return ids


def export(job: ExportJob):
    """Export every article; returns the list of written RPHS paths."""
    from transformers import AutoModelForCausalLM, AutoTokenizer

    tokenizer = AutoTokenizer.from_pretrained(job.model)
    model = AutoModelForCausalLM.from_pretrained(job.model)
    model.eval()
    torch.manual_seed(0)

    max_positions = getattr(model.config, "max_position_embeddings", 1 << 30)
    out_dir = Path(job.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    articles = load_articles(job.articles, job.tickers)

    written = []
    index_rows = []
    for article in articles:
        prompt = render_prompt(article)
        enc = tokenizer(prompt, return_tensors="pt")
        input_ids = enc["input_ids"]
        input_len = input_ids.shape[1]
        if input_len > max_positions:
            log.warning("skipping %s: prompt length %d exceeds model window %d",
                        article.article_id, input_len, max_positions)
            continue

        if job.context == "ig":
            ids = _greedy_extend(model, input_ids, job.max_gen, max_positions)
            flag = CONTEXT_INPUT_PLUS_GEN
        else:
            ids = input_ids
            flag = CONTEXT_INPUT_ONLY
        states, _ = _final_layer_states(model, ids)
        path = out_dir / f"{article.article_id}.rphs"
        write_rphs(path, states.numpy(), input_len=input_len, context=flag)
        written.append(path)
        index_rows.append({"article_id": article.article_id,
                           "date": article.date,
                           "tickers": article.tickers})

    _write_index(out_dir / "index.jsonl", index_rows)
    return written


def _write_index(path, rows):
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
