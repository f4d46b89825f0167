"""Corpora, vocabularies, batching and synthetic task generators."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, IngestionError, InvalidInputError

PAD_ID = 0
UNK_ID = 1
PAD, UNK = "<pad>", "<unk>"


@dataclass
class Example:
    tokens: list[int]
    label: int
    query_tokens: list[int] | None = None

    def to_dict(self) -> dict:
        d = {"tokens": list(map(int, self.tokens)), "label": int(self.label)}
        if self.query_tokens is not None:
            d["query"] = list(map(int, self.query_tokens))
        return d


class Vocabulary:
    """Token <-> id map with ``0 = PAD`` and ``1 = UNK``."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos = [PAD, UNK]
        self.stoi = {PAD: PAD_ID, UNK: UNK_ID}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.stoi.get(w, UNK_ID) for w in words]

    @classmethod
    def build(cls, sentences: Sequence[Sequence[str]], min_freq: int = 2) -> Vocabulary:
        counts = Counter(w for s in sentences for w in s)
        # sort by (-count, token) so ids do not depend on corpus order
        kept = sorted((w for w, c in counts.items() if c >= min_freq), key=lambda w: (-counts[w], w))
        return cls(kept)


@dataclass
class DatasetSplit:
    train: list[Example]
    validation: list[Example]
    test: list[Example]
    vocab_size: int
    num_classes: int
    vocabulary: Vocabulary | None = None
    meta: dict = field(default_factory=dict)

    @property
    def output_size(self) -> int:
        return 1 if self.num_classes == 2 else self.num_classes

    def class_counts(self) -> dict[str, list[int]]:
        out = {}
        for name in ("train", "validation", "test"):
            labels = [e.label for e in getattr(self, name)]
            out[name] = np.bincount(labels, minlength=self.num_classes).astype(int).tolist()
        return out

    def sizes(self) -> dict[str, int]:
        return {n: len(getattr(self, n)) for n in ("train", "validation", "test")}

    def manifest(self) -> dict:
        return {**self.meta, "sizes": self.sizes(), "class_counts": self.class_counts(),
                "vocab_size": self.vocab_size, "num_classes": self.num_classes}


def split_indices(n: int, rng: np.random.Generator, fractions=(0.8, 0.1, 0.1)) -> tuple[np.ndarray, ...]:
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must sum to 1, got {fractions}")
    perm = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def _tokenize(text: str) -> list[str]:
    return text.lower().split()


def load_jsonl(path, seed: int = 0, fractions=(0.8, 0.1, 0.1), min_freq: int = 2) -> DatasetSplit:
    """Read ``{"text" | "tokens", "label", "query"?}`` lines and split them.

    ``text`` is whitespace-tokenized and lowercased. Pre-tokenized ``tokens``
    may be strings (looked up like text) or integer ids (used as-is). The
    vocabulary comes from the training split only.
    """
    path = Path(path)
    raw = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                label = int(obj["label"])
                if "text" in obj:
                    toks = _tokenize(obj["text"])
                else:
                    toks = obj["tokens"]
                    toks = [t.lower() if isinstance(t, str) else int(t) for t in toks]
                query = obj.get("query")
                if isinstance(query, str):
                    query = _tokenize(query)
                elif query is not None:
                    query = [q.lower() if isinstance(q, str) else int(q) for q in query]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise IngestionError(f"{path}:{lineno}: malformed record ({exc})") from None
            if not toks or label < 0:
                raise IngestionError(f"{path}:{lineno}: empty token list or negative label")
            raw.append((toks, label, query))
    if not raw:
        raise IngestionError(f"{path}: empty dataset")

    numeric = all(isinstance(t, int) for toks, _, _ in raw for t in toks)
    rng = np.random.default_rng(seed)
    tr, va, te = split_indices(len(raw), rng, fractions)
    num_classes = max(2, max(r[1] for r in raw) + 1)

    if numeric:
        vocab = None
        vocab_size = max(max(max(r[0]), max(r[2] or [0])) for r in raw) + 1

        def convert(r):
            return Example(list(r[0]), r[1], None if r[2] is None else list(r[2]))
    else:
        train_sents = [raw[i][0] for i in tr] + [raw[i][2] for i in tr if raw[i][2]]
        vocab = Vocabulary.build(train_sents, min_freq=min_freq)
        vocab_size = len(vocab)

        def convert(r):
            q = None if r[2] is None else vocab.encode([str(t) for t in r[2]])
            return Example(vocab.encode([str(t) for t in r[0]]), r[1], q)

    return DatasetSplit(
        train=[convert(raw[i]) for i in tr],
        validation=[convert(raw[i]) for i in va],
        test=[convert(raw[i]) for i in te],
        vocab_size=vocab_size,
        num_classes=num_classes,
        vocabulary=vocab,
        meta={"name": path.stem, "source": str(path), "seed": seed},
    )


def export_jsonl(examples: Sequence[Example], path) -> None:
    with Path(path).open("w") as fh:
        for e in examples:
            fh.write(json.dumps(e.to_dict()) + "\n")


def export_split(split: DatasetSplit, directory) -> None:
    """Write ``train/validation/test.jsonl`` plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("train", "validation", "test"):
        export_jsonl(getattr(split, name), directory / f"{name}.jsonl")
    (directory / "manifest.json").write_text(json.dumps(split.manifest(), indent=2))


def load_split_dir(directory, vocab_size: int | None = None) -> DatasetSplit:
    """Inverse of :func:`export_split` for integer-token files."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    parts = {}
    for name in ("train", "validation", "test"):
        rows = []
        with (directory / f"{name}.jsonl").open() as fh:
            for lineno, line in enumerate(fh, 1):
                try:
                    obj = json.loads(line)
                    rows.append(Example([int(t) for t in obj["tokens"]], int(obj["label"]),
                                        None if obj.get("query") is None else [int(q) for q in obj["query"]]))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise IngestionError(f"{directory / name}.jsonl:{lineno}: {exc}") from None
        parts[name] = rows
    meta = {k: v for k, v in manifest.items() if k not in ("sizes", "class_counts", "vocab_size", "num_classes")}
    return DatasetSplit(**parts, vocab_size=vocab_size or manifest["vocab_size"],
                        num_classes=manifest["num_classes"], meta=meta)


# ---------------------------------------------------------------------------
# synthetic tasks


def _signal_layout(vocab_size: int, num_classes: int, signals_per_class: int):
    n_signal = num_classes * signals_per_class
    first_filler = 2 + n_signal
    if vocab_size - first_filler < 2:
        raise ConfigurationError(
            f"vocab_size={vocab_size} leaves fewer than 2 filler tokens after {n_signal} signal tokens"
        )
    signal = np.arange(2, first_filler).reshape(num_classes, signals_per_class)
    return signal, first_filler


def _planted(n, T, vocab_size, seed, noise_rate, num_classes, signals_per_class, name, extra_meta,
             fractions=(0.8, 0.1, 0.1)):
    if n < 20:
        raise ConfigurationError(f"n={n} is too small to split (need >= 20)")
    if T < 3:
        raise ConfigurationError("sequence length T must be >= 3")
    if vocab_size < 10:
        raise ConfigurationError("vocab_size must be >= 10")
    signal, first_filler = _signal_layout(vocab_size, num_classes, signals_per_class)
    rng = np.random.default_rng(seed)
    tokens = rng.integers(first_filler, vocab_size, size=(n, T))
    # classes are balanced exactly (a shuffled round-robin), not sampled
    classes = rng.permutation(np.arange(n) % num_classes)
    which = rng.integers(0, signals_per_class, size=n)
    positions = rng.integers(0, T, size=n)
    tokens[np.arange(n), positions] = signal[classes, which]
    labels = classes.copy()
    if noise_rate > 0:
        # each example is flipped with marginal probability noise_rate; drawing a fixed
        # count per class keeps the label marginal balanced as well
        flip = np.zeros(n, dtype=bool)
        for c in range(num_classes):
            members = np.nonzero(classes == c)[0]
            flip[rng.choice(members, int(round(noise_rate * len(members))), replace=False)] = True
        # binary: flip; multi-class: move to a uniformly chosen other class
        shift = rng.integers(1, num_classes, size=n) if num_classes > 2 else np.ones(n, dtype=int)
        labels = np.where(flip, (classes + shift) % num_classes, classes)
    examples = [Example(tokens[i].tolist(), int(labels[i])) for i in range(n)]
    tr, va, te = split_indices(n, rng, tuple(fractions))
    meta = {"name": name, "generator": name, "seed": seed, "n": n, "T": T,
            "signal_tokens": signal.tolist(), **extra_meta}
    split = DatasetSplit([examples[i] for i in tr], [examples[i] for i in va], [examples[i] for i in te],
                         vocab_size=vocab_size, num_classes=num_classes, meta=meta)
    split.meta["signal_positions"] = {
        "train": positions[tr].tolist(), "validation": positions[va].tolist(), "test": positions[te].tolist()
    }
    split.meta["signal_classes"] = {
        "train": classes[tr].tolist(), "validation": classes[va].tolist(), "test": classes[te].tolist()
    }
    return split


def generate_planted_token(n: int, T: int, vocab_size: int, seed: int = 0, num_classes: int = 2,
                           signals_per_class: int = 2, fractions=(0.8, 0.1, 0.1)) -> DatasetSplit:
    """Random filler sequences with one class-specific signal token planted at a random position.

    The label is the class of the planted token. Signal ids occupy
    ``2 .. 2 + num_classes * signals_per_class``; filler tokens are the rest.
    ``meta["signal_positions"]`` records where the signal sits in each split.
    ``fractions`` are the train/validation/test shares.
    """
    return _planted(n, T, vocab_size, seed, 0.0, num_classes, signals_per_class, "planted_token", {}, fractions)


def generate_distractor_task(n: int, T: int, vocab_size: int, noise_rate: float, seed: int = 0,
                             signals_per_class: int = 2, fractions=(0.8, 0.1, 0.1)) -> DatasetSplit:
    """Planted-token task with ``round(noise_rate * class size)`` labels of each class flipped.

    Flipping an exact count per class keeps the labels balanced.
    """
    if not 0.0 <= noise_rate <= 0.5:
        raise ConfigurationError(f"noise_rate must lie in [0, 0.5], got {noise_rate}")
    return _planted(n, T, vocab_size, seed, noise_rate, 2, signals_per_class, "distractor",
                    {"noise_rate": noise_rate}, fractions)


def generate_symmetric_task(n: int, T: int, vocab_size: int, seed: int = 0,
                            fractions=(0.8, 0.1, 0.1)) -> DatasetSplit:
    """Every position of a sequence repeats the same signal token.

    All positions carry identical information, so a position-local encoder
    produces identical hidden rows and any attention mechanism is uniform.
    """
    if n < 20:
        raise ConfigurationError(f"n={n} is too small to split (need >= 20)")
    if vocab_size < 10:
        raise ConfigurationError("vocab_size must be >= 10")
    signal, _ = _signal_layout(vocab_size, 2, 2)
    rng = np.random.default_rng(seed)
    classes = rng.integers(0, 2, size=n)
    which = rng.integers(0, 2, size=n)
    examples = [Example([int(signal[c, w])] * T, int(c)) for c, w in zip(classes, which)]
    tr, va, te = split_indices(n, rng, tuple(fractions))
    meta = {"name": "symmetric", "generator": "symmetric", "seed": seed, "n": n, "T": T}
    return DatasetSplit([examples[i] for i in tr], [examples[i] for i in va], [examples[i] for i in te],
                        vocab_size=vocab_size, num_classes=2, meta=meta)


GENERATORS = {
    "planted_token": generate_planted_token,
    "distractor": generate_distractor_task,
    "symmetric": generate_symmetric_task,
}


def make_dataset(spec: dict) -> DatasetSplit:
    """Build a dataset from ``{"generator": name, "params": {...}, "seed": s}`` or ``{"path": ...}``."""
    if "path" in spec:
        p = Path(spec["path"])
        if p.is_dir():
            return load_split_dir(p)
        return load_jsonl(p, seed=spec.get("seed", 0))
    try:
        gen = GENERATORS[spec["generator"]]
    except KeyError:
        raise ConfigurationError(f"unknown dataset generator in {spec!r}") from None
    return gen(**spec.get("params", {}), seed=spec.get("seed", 0))


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    tokens: np.ndarray      # (B, T) int, PAD-filled
    mask: np.ndarray        # (B, T) bool, True at real tokens
    labels: np.ndarray      # (B,)
    query: np.ndarray | None = None
    query_mask: np.ndarray | None = None
    indices: np.ndarray | None = None


def pad_sequences(seqs: Sequence[Sequence[int]], pad_id: int = PAD_ID) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad_id, dtype=int)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
        mask[i, :len(s)] = True
    return out, mask


def make_batch(examples: Sequence[Example], pad_id: int = PAD_ID, indices=None) -> Batch:
    if any(len(e.tokens) == 0 for e in examples):
        raise InvalidInputError("examples must contain at least one token")
    tokens, mask = pad_sequences([e.tokens for e in examples], pad_id)
    labels = np.array([e.label for e in examples], dtype=int)
    query = query_mask = None
    if any(e.query_tokens is not None for e in examples):
        query, query_mask = pad_sequences([e.query_tokens or [pad_id] for e in examples], pad_id)
    return Batch(tokens, mask, labels, query, query_mask,
                 None if indices is None else np.asarray(indices))


def batches(examples: Sequence[Example], batch_size: int, rng: np.random.Generator | None = None,
            pad_id: int = PAD_ID) -> Iterator[Batch]:
    """Yield padded batches; shuffled when ``rng`` is given."""
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    order = np.arange(len(examples)) if rng is None else rng.permutation(len(examples))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield make_batch([examples[i] for i in idx], pad_id, idx)


def binary_entropy(p: float) -> float:
    """H_b(p) in bits."""
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return float(-p * np.log2(p) - (1 - p) * np.log2(1 - p))


def analytic_distractor_mi(noise_rate: float) -> float:
    """I(signal class; label) in bits for the balanced binary distractor task."""
    return 1.0 - binary_entropy(noise_rate)
