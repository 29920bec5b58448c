"""Vocabulary, tokenization, TSV loading, embeddings and the synthetic corpus."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1
SPLITS = ("train", "dev", "test")


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    index: dict[str, int]

    def __len__(self):
        return len(self.index)

    def __getitem__(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def tokens(self) -> list[str]:
        return sorted(self.index, key=self.index.__getitem__)


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and strip non-alphanumerics at token edges."""
    out = []
    for raw in text.lower().split():
        start, end = 0, len(raw)
        while start < end and not raw[start].isalnum():
            start += 1
        while end > start and not raw[end - 1].isalnum():
            end -= 1
        if start < end:
            out.append(raw[start:end])
    return out


def build_vocab(corpus: Iterable[str | Sequence[str]], min_count: int = 1) -> Vocab:
    """Frequency-ordered vocabulary; ties broken lexicographically.

    `corpus` holds raw strings (tokenized here) or pre-split token lists.
    """
    counts: Counter[str] = Counter()
    seen = False
    for item in corpus:
        seen = True
        counts.update(tokenize(item) if isinstance(item, str) else item)
    if not seen or not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in (PAD, UNK)),
                  key=lambda t: (-counts[t], t))
    index = {PAD: PAD_ID, UNK: UNK_ID}
    for tok in kept:
        index[tok] = len(index)
    return Vocab(index)


def encode(text: str, vocab: Vocab, t_fixed: int) -> np.ndarray:
    if t_fixed < 1:
        raise ValueError("t_fixed must be at least 1")
    ids = [vocab[t] for t in tokenize(text)][:t_fixed]
    out = np.full(t_fixed, PAD_ID, dtype=np.int64)
    out[:len(ids)] = ids
    return out


@dataclass
class LabeledDataset:
    """Encoded sentences (n, T) with clean and optionally noisy labels."""

    tokens: np.ndarray
    labels: np.ndarray
    k: int
    split: str
    noisy_labels: np.ndarray | None = None
    texts: list[str] | None = None
    label_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.tokens.ndim != 2 or len(self.tokens) != len(self.labels):
            raise ValueError("tokens must be (n, T) aligned with labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise ValueError(f"labels must lie in [0, {self.k})")
        if self.noisy_labels is not None:
            if self.split == "test":
                raise ValueError("test labels are never corrupted")
            self.noisy_labels = np.asarray(self.noisy_labels, dtype=np.int64)
            if self.noisy_labels.shape != self.labels.shape:
                raise ValueError("noisy labels misaligned with clean labels")

    def __len__(self):
        return len(self.labels)

    @property
    def t_fixed(self) -> int:
        return self.tokens.shape[1]

    def targets(self) -> np.ndarray:
        """Labels the trainer sees: noisy if present, clean otherwise."""
        return self.labels if self.noisy_labels is None else self.noisy_labels

    def with_noisy(self, noisy) -> "LabeledDataset":
        return replace(self, noisy_labels=np.asarray(noisy, dtype=np.int64))


def load_tsv(path, label_map: dict[str, int] | None = None):
    """Read "label<TAB>text" lines (or "clean<TAB>noisy<TAB>text").

    Returns (labels, noisy_or_None, texts, label_map). Label strings map to
    dense indices in first-seen order; pass `label_map` to extend an existing
    mapping, e.g. when reading a dev file after the train file.
    """
    label_map = dict(label_map or {})
    labels, noisy, texts = [], [], []
    ncols = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise DataFormatError(f"{path}:{lineno}: expected 'label<TAB>text', got {line[:40]!r}")
            cols = 3 if len(parts) >= 3 else 2
            if ncols is None:
                ncols = cols
            elif cols != ncols:
                raise DataFormatError(f"{path}:{lineno}: expected {ncols} columns, got {cols}")
            fields = parts[:cols - 1]
            for lab in fields:
                if lab == "":
                    raise DataFormatError(f"{path}:{lineno}: empty label")
                if lab not in label_map:
                    label_map[lab] = len(label_map)
            labels.append(label_map[fields[0]])
            if cols == 3:
                noisy.append(label_map[fields[1]])
            texts.append("\t".join(parts[cols - 1:]))
    return labels, (noisy if ncols == 3 else None), texts, label_map


def percentile_length(texts: Iterable[str], q: float = 95.0) -> int:
    lengths = [len(tokenize(t)) for t in texts]
    if not lengths:
        return 1
    return max(1, int(math.ceil(np.percentile(lengths, q))))


def make_dataset(texts, labels, vocab, t_fixed, k, split, noisy=None, label_names=()):
    toks = np.stack([encode(t, vocab, t_fixed) for t in texts]) if texts else np.zeros((0, t_fixed), np.int64)
    return LabeledDataset(toks, np.asarray(labels, np.int64), k, split,
                          noisy_labels=None if noisy is None else np.asarray(noisy, np.int64),
                          texts=list(texts), label_names=list(label_names))


def write_tsv(path, dataset: LabeledDataset) -> None:
    """Write 2 columns (label, text) or 3 (clean, noisy, text) when noisy labels exist."""
    names = dataset.label_names or [str(i) for i in range(dataset.k)]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, text in enumerate(dataset.texts or []):
            cols = [names[dataset.labels[i]]]
            if dataset.noisy_labels is not None:
                cols.append(names[dataset.noisy_labels[i]])
            fh.write("\t".join(cols + [text]) + "\n")


# ------------------------------------------------------------ embeddings

def read_pretrained(path) -> dict[str, np.ndarray]:
    """Text-format vectors: "token v1 ... vd" per line; a "count dim" header is skipped."""
    vectors: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip().split(" ")
            if not parts or parts == [""]:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue
            try:
                vectors[parts[0]] = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
    return vectors


def init_embeddings(vocab: Vocab, d: int, rng: np.random.Generator, pretrained_path=None) -> np.ndarray:
    E = rng.uniform(-0.25, 0.25, size=(len(vocab), d))
    if pretrained_path is not None:
        hits = 0
        for tok, vec in read_pretrained(pretrained_path).items():
            if vec.shape != (d,):
                raise DataFormatError(f"pretrained vector for {tok!r} has dim {vec.size}, expected {d}")
            if tok in vocab.index:
                E[vocab.index[tok]] = vec
                hits += 1
        log.info("pretrained vectors cover %d/%d tokens", hits, len(vocab))
    E[PAD_ID] = 0.0
    return E


# ------------------------------------------------------- synthetic corpus

@dataclass(frozen=True)
class SyntheticSpec:
    k: int = 4
    n: int = 4000
    n_dev: int = 500
    n_test: int = 500
    t: int = 20
    vocab_size: int = 2000
    signal_tokens_per_class: int = 25
    noise_rate_of_fillers: float = 0.85
    signal_skew: float = 0.0
    filler_skew: float = 0.8


def _zipf_cdf(n, skew):
    p = 1.0 / np.arange(1, n + 1) ** skew
    return np.cumsum(p / p.sum())


def synthetic_texts(spec: SyntheticSpec, rng: np.random.Generator):
    """Raw (labels, texts) per split for the synthetic topic corpus.

    Class c owns `signal_tokens_per_class` indicative tokens "c{c}w{j}"; the
    rest of the vocabulary is shared filler "f{j}". Both pools are sampled
    Zipf-style with exponents `signal_skew` and `filler_skew` (0 = uniform).
    A sentence of length L holds round((1 - noise_rate_of_fillers) * L)
    indicative tokens (at least one), all from its own class, so the label
    is a function of the indicative tokens alone.
    """
    k, s = spec.k, spec.signal_tokens_per_class
    n_fill = spec.vocab_size - k * s
    if k < 2 or s < 1 or n_fill < 1 or spec.t < 2:
        raise ValueError("infeasible synthetic corpus: need vocab_size > k * signal_tokens_per_class, k >= 2, t >= 2")
    if not 0.0 <= spec.noise_rate_of_fillers < 1.0:
        raise ValueError("noise_rate_of_fillers must lie in [0, 1)")
    fill_cdf = _zipf_cdf(n_fill, spec.filler_skew)
    sig_cdf = _zipf_cdf(s, spec.signal_skew)
    out = {}
    for split, n in (("train", spec.n), ("dev", spec.n_dev), ("test", spec.n_test)):
        # balanced labels, shuffled
        labels = np.resize(np.arange(k), n)
        rng.shuffle(labels)
        texts = []
        for c in labels:
            L = int(rng.integers(spec.t // 2, spec.t + 1))
            n_sig = max(1, int(round((1.0 - spec.noise_rate_of_fillers) * L)))
            words = [f"f{j}" for j in np.minimum(np.searchsorted(fill_cdf, rng.random(L - n_sig)), n_fill - 1)]
            for j in np.minimum(np.searchsorted(sig_cdf, rng.random(n_sig)), s - 1):
                words.insert(int(rng.integers(0, len(words) + 1)), f"c{c}w{j}")
            texts.append(" ".join(words))
        out[split] = (labels.tolist(), texts)
    return out


def make_synthetic_corpus(spec: SyntheticSpec, rng: np.random.Generator):
    """Encoded (train, dev, test) datasets plus the vocabulary built on train."""
    raw = synthetic_texts(spec, rng)
    vocab = build_vocab(raw["train"][1])
    names = [f"class{c}" for c in range(spec.k)]
    sets = tuple(make_dataset(raw[s][1], raw[s][0], vocab, spec.t, spec.k, s, label_names=names)
                 for s in SPLITS)
    return sets, vocab
