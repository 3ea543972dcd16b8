"""Sequence tasks: the delayed copy task and character-level next-token prediction."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cells import cross_entropy, get_cell
from .errors import UsageError

TRAIN_STREAM, EVAL_STREAM, DROPOUT_STREAM = 0, 1, 2

COPY_DIGITS = 30
COPY_DELAY = 10
COPY_VOCAB = 10


@dataclass
class SequenceBatch:
    """Batch-major one-hot inputs/targets plus the positions scored for accuracy."""

    inputs: np.ndarray
    targets: np.ndarray
    target_mask: np.ndarray

    @property
    def batch_size(self):
        return self.inputs.shape[0]

    @property
    def length(self):
        return self.inputs.shape[1]

    @property
    def input_ids(self):
        return self.inputs.argmax(axis=-1)

    @property
    def target_ids(self):
        return self.targets.argmax(axis=-1)

    def astype(self, dtype):
        return SequenceBatch(self.inputs.astype(dtype), self.targets.astype(dtype), self.target_mask)


def stream_seed(seed, stream, index=0):
    """Independent, reproducible seed for batch ``index`` of ``stream``."""
    return np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(index)))


def one_hot(ids, n, dtype=np.float64):
    out = np.zeros(ids.shape + (n,), dtype=dtype)
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out


def generate_copy_batch(batch_size, seed, n_digits=COPY_DIGITS, delay=COPY_DELAY,
                        score_all=False, dtype=np.float64):
    """Digits 1-9 followed by padding; the target repeats them ``delay`` steps later."""
    if batch_size <= 0:
        raise UsageError("batch_size must be positive")
    rng = np.random.default_rng(seed)
    length = n_digits + delay
    digits = rng.integers(1, COPY_VOCAB, size=(batch_size, n_digits))
    x = np.zeros((batch_size, length), dtype=np.int64)
    y = np.zeros((batch_size, length), dtype=np.int64)
    x[:, :n_digits] = digits
    y[:, delay:] = digits
    mask = np.zeros((batch_size, length), dtype=bool)
    mask[:, delay:] = True
    if score_all:
        mask[:] = True
    return SequenceBatch(one_hot(x, COPY_VOCAB, dtype), one_hot(y, COPY_VOCAB, dtype), mask)


UNK = "�"


@dataclass
class TextCorpus:
    tokens: np.ndarray
    vocab: list

    def __post_init__(self):
        self.index = {c: i for i, c in enumerate(self.vocab)}

    @property
    def vocab_size(self):
        return len(self.vocab)

    def encode(self, text):
        unk = self.index.get(UNK)
        ids = []
        for c in text.lower():
            i = self.index.get(c, unk)
            if i is None:
                raise UsageError(f"character {c!r} not in vocabulary")
            ids.append(i)
        return np.array(ids, dtype=np.int64)

    def decode(self, ids):
        return "".join(self.vocab[int(i)] for i in ids)

    def chunks(self, window):
        n = len(self.tokens) // window
        return self.tokens[: n * window].reshape(n, window)


def build_vocab(text, vocab_limit=None):
    """Characters ordered by descending frequency, ties broken by code point.

    ASCII characters are always kept; rarer non-ASCII characters beyond the
    limit collapse onto a single unknown token.
    """
    counts = Counter(text)
    ordered = sorted(counts, key=lambda c: (-counts[c], c))
    if vocab_limit is None or len(ordered) <= vocab_limit:
        return ordered
    ascii_chars = [c for c in ordered if ord(c) < 128]
    if len(ascii_chars) + 1 > vocab_limit:
        raise UsageError(
            f"vocab_limit={vocab_limit} cannot hold the {len(ascii_chars)} distinct ASCII characters"
        )
    room = vocab_limit - 1 - len(ascii_chars)
    extra = [c for c in ordered if ord(c) >= 128][:room]
    keep = set(ascii_chars) | set(extra)
    return [c for c in ordered if c in keep] + [UNK]


def ingest_text_corpus(path, vocab_limit=None):
    """Read UTF-8 text, lowercase it and encode it as character ids."""
    text = Path(path).read_text(encoding="utf-8").lower()
    if not text:
        raise UsageError(f"corpus {path} is empty")
    vocab = build_vocab(text, vocab_limit)
    corpus = TextCorpus(np.zeros(0, dtype=np.int64), vocab)
    corpus.tokens = corpus.encode(text)
    return corpus


class CharTask:
    """Next-character prediction over fixed windows; the last 10% of windows are held out."""

    def __init__(self, corpus, window=70, holdout=0.1):
        self.corpus = corpus
        self.window = window
        n = (len(corpus.tokens) - 1) // window
        if n < 2:
            raise UsageError("corpus too short for the requested window")
        n_val = max(1, int(round(holdout * n)))
        self.train_idx = np.arange(n - n_val)
        self.val_idx = np.arange(n - n_val, n)

    @property
    def vocab_size(self):
        return self.corpus.vocab_size

    def _batch(self, starts, dtype):
        w = self.window
        pos = starts[:, None] * w + np.arange(w)[None, :]
        x = self.corpus.tokens[pos]
        y = self.corpus.tokens[pos + 1]
        v = self.vocab_size
        return SequenceBatch(one_hot(x, v, dtype), one_hot(y, v, dtype), np.ones(x.shape, dtype=bool))

    def train_batch(self, batch_size, seed, dtype=np.float64):
        rng = np.random.default_rng(seed)
        return self._batch(rng.choice(self.train_idx, size=batch_size), dtype)

    def eval_batch(self, n_samples, dtype=np.float64):
        return self._batch(self.val_idx[:n_samples], dtype)


def forward_logits(params, inputs, mask=None):
    """Feedforward logits for every step (no inference, no target)."""
    cell = get_cell(params.family)
    batch, steps = inputs.shape[:2]
    h = cell.zero_state(params, batch)
    out = []
    for t in range(steps):
        latents, logits = cell.feedforward(params, inputs[:, t], h, mask)
        h = latents[0]
        out.append(logits)
    return np.stack(out, axis=1)


def evaluate(params, batch):
    """Mean per-position cross-entropy, masked/all-position accuracy and perplexity."""
    logits = forward_logits(params, batch.inputs)
    ce = cross_entropy(logits.astype(np.float64), batch.targets.astype(np.float64))
    correct = logits.argmax(axis=-1) == batch.target_ids
    loss = float(ce.mean())
    return {
        "eval_loss": loss,
        "eval_accuracy": float(correct[batch.target_mask].mean()),
        "eval_accuracy_all": float(correct.mean()),
        "eval_perplexity": float(math.exp(min(loss, 700.0))),
    }
