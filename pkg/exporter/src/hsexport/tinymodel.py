"""Build a tiny self-contained causal language model on local disk.

Useful for tests and offline smoke runs: a randomly initialized GPT-2
style model with a word-level tokenizer trained on nothing but a fixed
word list, saved in standard transformers format so the exporter can
load it like any hub model.
"""
from __future__ import annotations

from pathlib import Path


def build_tiny_model(out_dir, vocab_words=None, hidden_size=16, n_layer=2,
                     n_head=2, n_positions=128, seed=0):
    """Create and save a small random-init model + tokenizer; returns the path."""
    import torch
    from tokenizers import Tokenizer, models, pre_tokenizers
    from transformers import GPT2Config, GPT2LMHeadModel, PreTrainedTokenizerFast

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if vocab_words is None:
        vocab_words = [f"tok{i}" for i in range(256)]
    base = ["<unk>", "<pad>"]
    # cover the fixed prompt wording plus punctuation and ticker-ish symbols
    prompt_words = ("Please read the following news text and determine whether "
                    "there is a connection between the stocks and they may "
                    "influence each other Hint There be positive or negative "
                    "correlations News Article").split()
    symbols = list(".,:{}()") + [f"T{i:02d}" for i in range(64)]
    vocab = {}
    for word in base + prompt_words + symbols + list(vocab_words):
        if word not in vocab:
            vocab[word] = len(vocab)

    tok = Tokenizer(models.WordLevel(vocab=vocab, unk_token="<unk>"))
    tok.pre_tokenizer = pre_tokenizers.Sequence([
        pre_tokenizers.Whitespace(),
    ])
    fast = PreTrainedTokenizerFast(tokenizer_object=tok, unk_token="<unk>",
                                   pad_token="<pad>")
    fast.save_pretrained(out_dir)

    torch.manual_seed(seed)
    config = GPT2Config(vocab_size=len(vocab), n_positions=n_positions,
                        n_embd=hidden_size, n_layer=n_layer, n_head=n_head)
    model = GPT2LMHeadModel(config)
    model.save_pretrained(out_dir)
    return out_dir
