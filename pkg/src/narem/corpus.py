"""Synthetic parallel corpora and token-id corpus I/O.

Two families of synthetic translation data are supported:

* Experiment 1: token ``k`` translates to ``k`` copies of itself
  (``2 1 4 3`` -> ``2 2 1 4 4 4 4 3 3 3``).  The mapping is deterministic,
  so the data contains no multi-modality.
* Experiment 2: the Experiment-1 target additionally receives four ``0``
  tokens split randomly between its front and back.  Sources are kept
  pairwise distinct, so there is no instance-level multi-modality, but the
  random split makes the corpus-level mapping non-deterministic.

Sentences are stored as tuples of vocabulary ids.  Generation uses a seeded
PCG64 generator, so corpora are bit-identical across runs and platforms for
a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

Sentence = tuple[int, ...]

SPECIALS = ("<pad>", "<bos>", "<eos>", "<concat>")
DATA_SYMBOLS = ("0", "1", "2", "3", "4", "5")


class CorpusError(ValueError):
    """Invalid corpus contents or generation arguments."""


class ParseError(CorpusError):
    """Malformed corpus or vocabulary file."""


@dataclass(frozen=True)
class Vocabulary:
    """Bijective symbol <-> dense-id mapping with reserved specials.

    The four specials always occupy ids 0..3 in the fixed order
    PAD, BOS, EOS, CONCAT; data symbols follow.
    """

    symbols: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    PAD = 0
    BOS = 1
    EOS = 2
    CONCAT = 3

    def __post_init__(self) -> None:
        if tuple(self.symbols[: len(SPECIALS)]) != SPECIALS:
            raise CorpusError(f"vocabulary must start with specials {SPECIALS}")
        if len(set(self.symbols)) != len(self.symbols):
            raise CorpusError("duplicate symbols in vocabulary")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.symbols)})

    @classmethod
    def synthetic(cls) -> "Vocabulary":
        """The shared source/target vocabulary of the synthetic experiments."""
        return cls(SPECIALS + DATA_SYMBOLS)

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def num_specials(self) -> int:
        return len(SPECIALS)

    def id_of(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise CorpusError(f"unknown symbol {symbol!r}") from None

    def encode(self, text: str) -> Sentence:
        """Space-separated symbols -> id tuple."""
        return tuple(self.id_of(tok) for tok in text.split())

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.symbols[i] for i in ids)

    def validate_sentence(self, sent: Sequence[int]) -> None:
        for i in sent:
            if not 0 <= i < len(self.symbols):
                raise CorpusError(f"token id {i} outside vocabulary of size {len(self.symbols)}")
            if i == self.PAD:
                raise CorpusError("PAD inside a sentence")

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(s + "\n" for s in self.symbols), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        symbols = tuple(line.strip() for line in lines if line.strip())
        return cls(symbols)


@dataclass
class ParallelCorpus:
    """Aligned (source, target) id-sequence pairs over one vocabulary."""

    pairs: list[tuple[Sentence, Sentence]]
    vocab: Vocabulary
    name: str = ""

    def __post_init__(self) -> None:
        for k, (src, tgt) in enumerate(self.pairs):
            if not src or not tgt:
                raise CorpusError(f"pair {k} has an empty side")
            self.vocab.validate_sentence(src)
            self.vocab.validate_sentence(tgt)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @property
    def sources(self) -> list[Sentence]:
        return [s for s, _ in self.pairs]

    @property
    def targets(self) -> list[Sentence]:
        return [t for _, t in self.pairs]

    def mean_target_length(self) -> float:
        return float(np.mean([len(t) for t in self.targets]))

    def with_targets(self, targets: Sequence[Sentence], name: str = "") -> "ParallelCorpus":
        """Same sources, new targets (distillation / pseudo datasets)."""
        if len(targets) != len(self.pairs):
            raise CorpusError("target count does not match corpus size")
        return ParallelCorpus(
            [(src, tuple(tgt)) for (src, _), tgt in zip(self.pairs, targets)],
            self.vocab,
            name or self.name,
        )

    def subset(self, indices: Sequence[int], name: str = "") -> "ParallelCorpus":
        return ParallelCorpus([self.pairs[i] for i in indices], self.vocab, name or self.name)


def expand_exp1(src: Sequence[int]) -> Sentence:
    """Experiment-1 expansion on symbol values: k -> k copies of k."""
    out: list[int] = []
    for k in src:
        if not 1 <= k <= 5:
            raise CorpusError(f"invalid source token {k}: expected a value in 1..5")
        out.extend([k] * k)
    return tuple(out)


def _values_to_ids(vocab: Vocabulary, values: Iterable[int]) -> Sentence:
    return tuple(vocab.id_of(str(v)) for v in values)


def _ids_to_values(vocab: Vocabulary, ids: Iterable[int]) -> tuple[int, ...]:
    return tuple(int(vocab.symbols[i]) for i in ids)


def source_values(vocab: Vocabulary, src: Sentence) -> tuple[int, ...]:
    """Numeric values of a synthetic source sentence's symbols."""
    return _ids_to_values(vocab, src)


def gen_exp1(n: int, src_len: int, seed: int, name: str = "exp1") -> ParallelCorpus:
    """Deterministic expansion corpus: i.i.d. uniform sources over {1..5}."""
    if n < 1 or src_len < 1:
        raise CorpusError("n and src_len must be >= 1")
    vocab = Vocabulary.synthetic()
    rng = np.random.Generator(np.random.PCG64(seed))
    draws = rng.integers(1, 6, size=(n, src_len))
    pairs = []
    for row in draws:
        values = tuple(int(v) for v in row)
        pairs.append((_values_to_ids(vocab, values), _values_to_ids(vocab, expand_exp1(values))))
    return ParallelCorpus(pairs, vocab, name)


def gen_exp2(n: int, src_len: int, seed: int, name: str = "exp2") -> ParallelCorpus:
    """Multi-modal corpus: four boundary zeros split uniformly front/back.

    Sources are rejection-sampled to be pairwise distinct, so the corpus has
    no instance-level multi-modality by construction.
    """
    if n < 1 or src_len < 1:
        raise CorpusError("n and src_len must be >= 1")
    capacity = 5**src_len
    if n > capacity:
        raise CorpusError(f"cannot draw {n} distinct sources of length {src_len} (capacity {capacity})")
    vocab = Vocabulary.synthetic()
    rng = np.random.Generator(np.random.PCG64(seed))
    seen: set[tuple[int, ...]] = set()
    pairs = []
    while len(pairs) < n:
        values = tuple(int(v) for v in rng.integers(1, 6, size=src_len))
        if values in seen:
            continue
        seen.add(values)
        k = int(rng.integers(0, 5))
        target = (0,) * k + expand_exp1(values) + (0,) * (4 - k)
        pairs.append((_values_to_ids(vocab, values), _values_to_ids(vocab, target)))
    return ParallelCorpus(pairs, vocab, name)


def save_corpus(corpus: ParallelCorpus, path: str | Path) -> None:
    """One pair per line: ``source<TAB>target``, space-separated symbols."""
    with open(path, "w", encoding="utf-8") as fh:
        for src, tgt in corpus.pairs:
            fh.write(f"{corpus.vocab.decode(src)}\t{corpus.vocab.decode(tgt)}\n")


def load_corpus(path: str | Path, vocab: Vocabulary, name: str = "") -> ParallelCorpus:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected 'source<TAB>target', got {line!r}")
            try:
                src, tgt = vocab.encode(parts[0]), vocab.encode(parts[1])
            except CorpusError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if not src or not tgt:
                raise ParseError(f"{path}:{lineno}: empty source or target")
            pairs.append((src, tgt))
    return ParallelCorpus(pairs, vocab, name or Path(path).stem)
