"""Corpus ingestion, tokenization, deterministic batching, perplexity.

The default tokenizer is byte-level (vocab 256) so the determinism surface
has no external vocab files; a learned byte-pair tokenizer is available as
a config choice. Splits are contiguous 90/5/5 byte ranges with integer
floor. Batching shuffles contiguous BPTT windows, never single tokens, and
drops the last partial batch so step accounting stays exact.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, NumericError, RngStream


class DataError(ContractError):
    pass


# ---------------------------------------------------------------------------
# tokenizers

class ByteTokenizer:
    """Identity tokenizer over UTF-8 bytes; vocab is exactly 256."""

    vocab_size = 256
    kind = "byte"

    def encode(self, text: str) -> np.ndarray:
        return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)

    def encode_bytes(self, raw: bytes) -> np.ndarray:
        return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    def decode(self, ids) -> str:
        return bytes(int(i) for i in ids).decode("utf-8")


class BpeTokenizer:
    """Byte-level BPE: merges act on byte ids, so round-trip is exact.

    Merge selection is deterministic (most-frequent pair, ties broken by the
    lexicographically smallest pair); encoding applies merges in learned order.
    """

    kind = "bpe"

    def __init__(self, merges: list[tuple[int, int]]):
        self.merges = list(merges)
        self.vocab_size = 256 + len(self.merges)

    @classmethod
    def train(cls, raw: bytes, vocab_size: int, max_train_bytes: int = 262144) -> "BpeTokenizer":
        if vocab_size < 256:
            raise DataError("bpe vocab_size must be >= 256")
        seq = np.frombuffer(raw[:max_train_bytes], dtype=np.uint8).astype(np.int64)
        merges: list[tuple[int, int]] = []
        next_id = 256
        while next_id < vocab_size and len(seq) >= 2:
            keys = seq[:-1] * (1 << 32) + seq[1:]
            uniq, counts = np.unique(keys, return_counts=True)
            best_count = counts.max()
            if best_count < 2:
                break
            # ties: smallest packed key == lexicographically smallest (a, b)
            best = uniq[counts == best_count].min()
            a, b = int(best >> 32), int(best & 0xFFFFFFFF)
            merges.append((a, b))
            seq = cls._apply_merge(seq, a, b, next_id)
            next_id += 1
        return cls(merges)

    @staticmethod
    def _apply_merge(seq: np.ndarray, a: int, b: int, new_id: int) -> np.ndarray:
        hits = np.where((seq[:-1] == a) & (seq[1:] == b))[0]
        if hits.size == 0:
            return seq
        # greedy left-to-right, no overlaps ("aaa" merges once for pair aa)
        keep = []
        last = -2
        for h in hits:
            if h > last + 1:
                keep.append(h)
                last = h
        out = seq.copy()
        keep = np.asarray(keep)
        out[keep] = new_id
        mask = np.ones(len(seq), dtype=bool)
        mask[keep + 1] = False
        return out[mask]

    def encode_bytes(self, raw: bytes) -> np.ndarray:
        seq = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
        for i, (a, b) in enumerate(self.merges):
            seq = self._apply_merge(seq, a, b, 256 + i)
        return seq

    def encode(self, text: str) -> np.ndarray:
        return self.encode_bytes(text.encode("utf-8"))

    def decode(self, ids) -> str:
        table: dict[int, bytes] = {i: bytes([i]) for i in range(256)}
        for i, (a, b) in enumerate(self.merges):
            table[256 + i] = table[a] + table[b]
        return b"".join(table[int(i)] for i in ids).decode("utf-8")


def make_tokenizer(kind: str = "byte", bpe_vocab_size: int = 512,
                   train_bytes: bytes | None = None):
    if kind == "byte":
        return ByteTokenizer()
    if kind == "bpe":
        if train_bytes is None:
            raise DataError("bpe tokenizer needs training bytes")
        return BpeTokenizer.train(train_bytes, bpe_vocab_size)
    raise DataError(f"unknown tokenizer kind '{kind}'")


# ---------------------------------------------------------------------------
# corpus

SPLIT_FRACTIONS = (0.90, 0.05, 0.05)


@dataclass
class Corpus:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    vocab_size: int
    digest: str
    tokenizer_kind: str = "byte"


def split_bounds(n: int, fractions=SPLIT_FRACTIONS) -> tuple[int, int]:
    """Integer-floor split: train gets floor(f0*n), valid floor(f1*n), test the rest."""
    n_train = int(fractions[0] * n)
    n_valid = int(fractions[1] * n)
    return n_train, n_train + n_valid


def load_corpus(path: str, tokenizer_kind: str = "byte",
                bpe_vocab_size: int = 512) -> Corpus:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read corpus file: {exc}") from exc
    try:
        raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"corpus is not valid UTF-8: {exc}") from exc
    digest = hashlib.sha256(raw).hexdigest()
    a, b = split_bounds(len(raw))
    parts = raw[:a], raw[a:b], raw[b:]
    if any(len(p) == 0 for p in parts):
        raise DataError("corpus too small: a split came out empty")
    tok = make_tokenizer(tokenizer_kind, bpe_vocab_size, train_bytes=parts[0])
    train, valid, test = (tok.encode_bytes(p) for p in parts)
    return Corpus(train=train, valid=valid, test=test, vocab_size=tok.vocab_size,
                  digest=digest, tokenizer_kind=tokenizer_kind)


# ---------------------------------------------------------------------------
# batching

@dataclass
class BatchStream:
    """Deterministic (input, target) batches over stride-T windows.

    Window w covers tokens [w*T, w*T + T]; inputs are the first T tokens and
    targets the last T, so target[t] == input[t+1]. The window order is a pure
    function of the shuffle stream (identity order when stream is None).
    Exhaustion raises StopIteration: an epoch boundary, not an error.
    """

    tokens: np.ndarray
    batch_size: int
    bptt_len: int
    shuffle: RngStream | None = None
    cursor: int = 0
    _order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n_windows = max(0, (len(self.tokens) - 1) // self.bptt_len)
        if n_windows < self.batch_size:
            raise DataError(
                f"split too small: {n_windows} windows < batch size {self.batch_size}")
        if self.shuffle is None:
            self._order = np.arange(n_windows)
        else:
            self._order = self.shuffle.permutation(n_windows)

    @property
    def n_batches(self) -> int:
        return len(self._order) // self.batch_size  # drop-last

    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        if self.cursor >= self.n_batches:
            raise StopIteration
        T = self.bptt_len
        idx = self._order[self.cursor * self.batch_size:(self.cursor + 1) * self.batch_size]
        starts = idx * T
        inputs = np.stack([self.tokens[s:s + T] for s in starts])
        targets = np.stack([self.tokens[s + 1:s + T + 1] for s in starts])
        self.cursor += 1
        return inputs, targets

    def __iter__(self):
        while self.cursor < self.n_batches:
            yield self.next_batch()


def perplexity(logits, targets) -> float:
    """exp(mean token NLL) over every position of the batch.

    Accepts a Tensor or ndarray of logits [B, T, V]; accumulation is float64
    in fixed order so repeated evaluations agree bitwise.
    """
    x = np.asarray(getattr(logits, "data", logits), dtype=np.float64)
    t = np.asarray(targets)
    x = x.reshape(-1, x.shape[-1])
    tt = t.reshape(-1)
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    nll = lse - x[np.arange(x.shape[0]), tt]
    mean_nll = float(nll.mean())
    if not np.isfinite(mean_nll):
        raise NumericError("non-finite NLL in perplexity")
    return float(np.exp(mean_nll))


def token_nll_sum(logits, targets) -> tuple[float, int]:
    """Summed token NLL and token count, for streaming evaluation."""
    x = np.asarray(getattr(logits, "data", logits), dtype=np.float64)
    t = np.asarray(targets)
    x = x.reshape(-1, x.shape[-1])
    tt = t.reshape(-1)
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    nll = lse - x[np.arange(x.shape[0]), tt]
    s = float(nll.sum())
    if not np.isfinite(s):
        raise NumericError("non-finite NLL during evaluation")
    return s, x.shape[0]


# ---------------------------------------------------------------------------
# synthetic desk corpus

_WORDS = (
    "the a an of to in for with on from by over under between through time "
    "river stone garden window market letter winter summer morning evening "
    "city village road bridge mountain valley harbor island forest meadow "
    "child teacher doctor sailor farmer painter writer keeper walks reads "
    "writes builds carries watches remembers forgets finds loses opens "
    "closes begins ends small large quiet bright ancient narrow wide deep "
    "early late red blue green grey golden silver and but while because "
    "although never always often rarely perhaps certainly"
).split()


def synthetic_corpus(path: str, n_bytes: int = 1_000_000, seed: int = 20260810):
    """Write a deterministic English-like word-salad corpus of ~n_bytes."""
    rs = RngStream(seed)
    chunks = []
    total = 0
    while total < n_bytes:
        k = int(rs.integers(6, 14))
        idx = rs.integers(0, len(_WORDS), k)
        sentence = " ".join(_WORDS[int(i)] for i in idx).capitalize() + ". "
        if total // 400 != (total + len(sentence)) // 400:
            sentence += "\n"
        chunks.append(sentence)
        total += len(sentence)
    text = "".join(chunks)[:n_bytes]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return path
