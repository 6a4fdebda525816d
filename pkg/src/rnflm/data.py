"""Vocabulary, corpora, batching, and synthetic datasets."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import ContractError, VocabularyError

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
RESERVED = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = range(4)
MAX_LEN = 200
DEFAULT_CAP = 20_000


def tokenize(line: str, max_len: int = MAX_LEN) -> list[str]:
    return line.lower().split()[:max_len]


@dataclass
class Vocab:
    itos: list[str]
    stoi: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.itos[:4]) != RESERVED:
            raise ContractError("vocabulary must start with the reserved tokens")
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ContractError("vocabulary tokens must be unique")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        return np.array([self.stoi.get(t, UNK_ID) for t in tokens], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.itos):
                raise VocabularyError(f"id {i} outside vocabulary of size {len(self.itos)}")
            out.append(self.itos[i])
        return out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.itos):
                fh.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, idx = line.rsplit("\t", 1)
                pairs.append((int(idx), tok))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise ContractError(f"{path}: ids are not dense from 0")
        return cls([tok for _, tok in pairs])


def build_vocab(lines: Iterable[str], cap: int = DEFAULT_CAP, max_len: int = MAX_LEN) -> Vocab:
    """Frequency-ranked vocabulary (ties broken lexicographically), capped at ``cap``.

    Lines are truncated to ``max_len`` tokens before counting.
    """
    if cap <= len(RESERVED):
        raise ContractError(f"vocabulary cap must exceed {len(RESERVED)}")
    counts: Counter[str] = Counter()
    seen_line = False
    for line in lines:
        seen_line = True
        counts.update(t for t in tokenize(line, max_len) if t not in RESERVED)
    if not seen_line or not counts:
        raise ContractError("build_vocab: empty input stream")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab(list(RESERVED) + [tok for tok, _ in ranked[: cap - len(RESERVED)]])


@dataclass
class Corpus:
    split: str
    sentences: list[np.ndarray]
    vocab: Vocab

    def __post_init__(self):
        if self.split not in ("train", "dev", "test"):
            raise ContractError(f"unknown split {self.split!r}")
        size = len(self.vocab)
        for s in self.sentences:
            if len(s) > MAX_LEN:
                raise ContractError(f"sentence of length {len(s)} exceeds {MAX_LEN}")
            if len(s) and (s.min() < 0 or s.max() >= size):
                raise VocabularyError("corpus id outside vocabulary")

    def __len__(self) -> int:
        return len(self.sentences)

    @property
    def n_words(self) -> int:
        return int(sum(len(s) for s in self.sentences))

    @property
    def n_predicted(self) -> int:
        """Words plus one end-of-sentence token per sentence."""
        return self.n_words + len(self.sentences)

    @classmethod
    def from_lines(cls, lines: Iterable[str], vocab: Vocab, split: str, max_len: int = MAX_LEN) -> "Corpus":
        sentences = [vocab.encode(toks) for toks in (tokenize(line, max_len) for line in lines) if toks]
        return cls(split, sentences, vocab)

    def lines(self) -> list[str]:
        return [" ".join(self.vocab.decode(s)) for s in self.sentences]


def load_corpus(path, vocab: Vocab, split: str) -> Corpus:
    with open(path, encoding="utf-8") as fh:
        return Corpus.from_lines(fh, vocab, split)


SPLIT_FILES = {"train": ("train.txt",), "dev": ("dev.txt", "valid.txt"), "test": ("test.txt",)}


def find_split_file(data_dir, split: str) -> Path | None:
    for name in SPLIT_FILES[split]:
        path = Path(data_dir) / name
        if path.exists():
            return path
    return None


@dataclass
class Batch:
    ids: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray

    @property
    def size(self) -> int:
        return self.ids.shape[0]


def make_batch(sentences: list[np.ndarray], pad_to: int | None = None) -> Batch:
    lengths = np.array([len(s) for s in sentences], dtype=np.int64)
    width = max(int(lengths.max()) if len(lengths) else 0, pad_to or 0)
    ids = np.full((len(sentences), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(sentences), width))
    for i, s in enumerate(sentences):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return Batch(ids, mask, lengths)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batcher(c: Corpus, batch_size: int, seed: int, epoch: int = 0, shuffle: bool = True) -> Iterator[Batch]:
    """One pass over ``c`` in seeded random order, padded per batch."""
    order = epoch_order(len(c), seed, epoch) if shuffle else np.arange(len(c))
    for start in range(0, len(order), batch_size):
        yield make_batch([c.sentences[i] for i in order[start : start + batch_size]])


@dataclass
class BatchStream:
    """Endless batches over repeated shuffled passes; position is checkpointable."""

    corpus: Corpus
    batch_size: int
    seed: int
    epoch: int = 0
    index: int = 0

    def next(self) -> Batch:
        n = len(self.corpus)
        if n == 0:
            raise ContractError("cannot batch an empty corpus")
        if self.index * self.batch_size >= n:
            self.epoch += 1
            self.index = 0
        order = epoch_order(n, self.seed, self.epoch)
        chunk = order[self.index * self.batch_size : (self.index + 1) * self.batch_size]
        self.index += 1
        return make_batch([self.corpus.sentences[i] for i in chunk])

    def state(self) -> dict:
        return {"epoch": self.epoch, "index": self.index}

    def load_state(self, state: dict) -> None:
        self.epoch, self.index = int(state["epoch"]), int(state["index"])


# -- synthetic topic grammar --------------------------------------------------

TOPIC_WORDS = {
    "animals": {"noun": ["dog", "cat", "bird", "horse"], "verb": ["chases", "sees", "feeds"],
                "adj": ["small", "brown", "wild"]},
    "food": {"noun": ["bread", "soup", "apple", "cheese"], "verb": ["cooks", "eats", "buys"],
             "adj": ["fresh", "warm", "sweet"]},
    "city": {"noun": ["car", "train", "bridge", "street"], "verb": ["builds", "crosses", "paints"],
             "adj": ["old", "busy", "long"]},
    "music": {"noun": ["song", "guitar", "band", "drum"], "verb": ["plays", "writes", "hears"],
              "adj": ["loud", "quiet", "new"]},
}
DETERMINERS = ["the", "a"]
P_ADJ, P_OBJECT, P_PP = 0.5, 0.7, 0.4


def grammar_vocab() -> Vocab:
    words = DETERMINERS + ["with", "."]
    for parts in TOPIC_WORDS.values():
        words += parts["noun"] + parts["verb"] + parts["adj"]
    return Vocab(list(RESERVED) + words)


def _sample_sentence(rng: np.random.Generator) -> list[str]:
    parts = TOPIC_WORDS[list(TOPIC_WORDS)[rng.integers(len(TOPIC_WORDS))]]

    def noun_phrase():
        out = [DETERMINERS[rng.integers(2)]]
        if rng.random() < P_ADJ:
            out.append(parts["adj"][rng.integers(len(parts["adj"]))])
        out.append(parts["noun"][rng.integers(len(parts["noun"]))])
        return out

    words = noun_phrase() + [parts["verb"][rng.integers(len(parts["verb"]))]]
    if rng.random() < P_OBJECT:
        words += noun_phrase()
    if rng.random() < P_PP:
        words += ["with"] + noun_phrase()
    return words + ["."]


def synthetic_grammar(n: int, seed: int, split: str = "train") -> Corpus:
    """``n`` sentences from a four-topic template grammar (lengths 4 to 12).

    A sentence draws one topic and then uses only that topic's nouns, verbs
    and adjectives, so a latent code that carries the topic and the template
    choices is genuinely useful to a decoder.
    """
    vocab = grammar_vocab()
    rng = np.random.default_rng(seed)
    return Corpus(split, [vocab.encode(_sample_sentence(rng)) for _ in range(n)], vocab)


def grammar_expected_counts() -> dict[str, float]:
    """Expected occurrences of each word in one sentence of the grammar."""
    n_topics = len(TOPIC_WORDS)
    n_np = 1.0 + P_OBJECT + P_PP
    counts = {w: n_np / len(DETERMINERS) for w in DETERMINERS}
    counts["with"] = P_PP
    counts["."] = 1.0
    for parts in TOPIC_WORDS.values():
        for w in parts["noun"]:
            counts[w] = n_np / len(parts["noun"]) / n_topics
        for w in parts["adj"]:
            counts[w] = n_np * P_ADJ / len(parts["adj"]) / n_topics
        for w in parts["verb"]:
            counts[w] = 1.0 / len(parts["verb"]) / n_topics
    return counts


def grammar_unigram_entropy() -> float:
    """Entropy (nats) of the long-run word frequencies of the grammar."""
    counts = np.array(list(grammar_expected_counts().values()))
    p = counts / counts.sum()
    return float(-np.sum(p * np.log(p)))


def unigram_entropy(c: Corpus) -> float:
    if c.n_words == 0:
        return 0.0
    counts = np.bincount(np.concatenate(c.sentences), minlength=len(c.vocab)).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


# -- swiss roll -------------------------------------------------------------


def swiss_roll(n: int, noise: float = 0.0, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Points ``(t cos t, h, t sin t)`` with ``t`` in ``[1.5 pi, 4.5 pi]``, ``h`` in ``[0, 21]``.

    Returns the ``n x 3`` embedding and the ``n x 2`` intrinsic coordinates
    ``(t, h)``.
    """
    rng = np.random.default_rng(seed)
    t = 1.5 * np.pi * (1.0 + 2.0 * rng.random(n))
    h = 21.0 * rng.random(n)
    points = np.column_stack([t * np.cos(t), h, t * np.sin(t)])
    if noise > 0:
        points = points + noise * rng.standard_normal(points.shape)
    return points, np.column_stack([t, h])


def _spiral_arclength(t: np.ndarray) -> np.ndarray:
    return 0.5 * (t * np.sqrt(1.0 + t * t) + np.arcsinh(t))


def swiss_roll_intrinsic_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Geodesic distance on the noiseless roll between intrinsic coordinates."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    ds = _spiral_arclength(a[:, 0]) - _spiral_arclength(b[:, 0])
    return np.sqrt(ds**2 + (a[:, 1] - b[:, 1]) ** 2)
