"""Triple files, vocabularies, entity descriptions and negative sampling."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
from sklearn.feature_extraction.text import ENGLISH_STOP_WORDS

logger = logging.getLogger(__name__)

MAX_CORRUPTION_ATTEMPTS = 100
SPLITS = ("train", "valid", "test")

_TOKEN_RE = re.compile(r"[^0-9a-z]+")


class TripleParseError(ValueError):
    pass


class VocabularyError(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class SamplingExhaustedError(RuntimeError):
    pass


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


class _SymbolTable:
    """Dense bijection between symbols and 0..size-1."""

    def __init__(self, symbols: Iterable[str] = ()):
        self._symbols: list[str] = []
        self._index: dict[str, int] = {}
        for s in symbols:
            self.add(s)

    def add(self, symbol: str) -> int:
        idx = self._index.get(symbol)
        if idx is None:
            idx = len(self._symbols)
            self._index[symbol] = idx
            self._symbols.append(symbol)
        return idx

    def index(self, symbol: str) -> int:
        return self._index[symbol]

    def symbol(self, index: int) -> str:
        return self._symbols[index]

    def get(self, symbol: str, default=None):
        return self._index.get(symbol, default)

    def __contains__(self, symbol) -> bool:
        return symbol in self._index

    def __len__(self) -> int:
        return len(self._symbols)

    def __iter__(self):
        return iter(self._symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, _SymbolTable) and self._symbols == other._symbols


class Vocabulary:
    """Entity and relation symbol tables.

    Indices are assigned in order of first appearance, so reloading the same
    file always produces the same encoding.
    """

    def __init__(self, entities: Iterable[str] = (), relations: Iterable[str] = ()):
        self.entity_ids = _SymbolTable(entities)
        self.relation_ids = _SymbolTable(relations)

    @property
    def num_entities(self) -> int:
        return len(self.entity_ids)

    @property
    def num_relations(self) -> int:
        return len(self.relation_ids)

    def is_empty(self) -> bool:
        return not self.entity_ids and not self.relation_ids

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Vocabulary)
            and self.entity_ids == other.entity_ids
            and self.relation_ids == other.relation_ids
        )

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, table in (("entities", self.entity_ids), ("relations", self.relation_ids)):
            with open(directory / f"{name}.dict", "w", encoding="utf-8") as f:
                for i, sym in enumerate(table):
                    f.write(f"{i}\t{sym}\n")

    @classmethod
    def load(cls, directory: str | Path) -> "Vocabulary":
        directory = Path(directory)
        tables = []
        for name in ("entities", "relations"):
            symbols = []
            with open(directory / f"{name}.dict", encoding="utf-8") as f:
                for lineno, line in enumerate(f, 1):
                    line = line.rstrip("\n")
                    if not line:
                        continue
                    idx, sym = line.split("\t", 1)
                    if int(idx) != len(symbols):
                        raise VocabularyError(f"{name}.dict line {lineno}: index {idx} out of order")
                    symbols.append(sym)
            tables.append(symbols)
        return cls(*tables)


def load_triples(path: str | Path, vocab: Vocabulary | None = None) -> tuple[list[Triple], Vocabulary]:
    """Read a tab-separated ``head relation tail`` file.

    With ``vocab`` empty or None a fresh vocabulary is built from the file.
    With a populated ``vocab`` the encoding is fixed and unknown symbols raise
    :class:`VocabularyError`.
    """
    grow = vocab is None or vocab.is_empty()
    if vocab is None:
        vocab = Vocabulary()
    triples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise TripleParseError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}"
                )
            h, r, t = fields
            if grow:
                triples.append(Triple(vocab.entity_ids.add(h), vocab.relation_ids.add(r), vocab.entity_ids.add(t)))
                continue
            for sym, table, kind in ((h, vocab.entity_ids, "entity"), (r, vocab.relation_ids, "relation"),
                                     (t, vocab.entity_ids, "entity")):
                if sym not in table:
                    raise VocabularyError(f"{path}:{lineno}: unknown {kind} symbol {sym!r}")
            triples.append(Triple(vocab.entity_ids.index(h), vocab.relation_ids.index(r), vocab.entity_ids.index(t)))
    return triples, vocab


def write_triples(path: str | Path, triples: Iterable[Triple], vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for h, r, t in triples:
            f.write(f"{vocab.entity_ids.symbol(h)}\t{vocab.relation_ids.symbol(r)}\t{vocab.entity_ids.symbol(t)}\n")


def compute_corruption_stats(train: Iterable[Triple]) -> dict[int, tuple[float, float]]:
    """Per-relation (tails-per-head, heads-per-tail) averages."""
    pairs: dict[int, set] = {}
    for h, r, t in train:
        pairs.setdefault(r, set()).add((h, t))
    stats = {}
    for r, ps in pairs.items():
        heads = {h for h, _ in ps}
        tails = {t for _, t in ps}
        stats[r] = (len(ps) / len(heads), len(ps) / len(tails))
    return stats


def triple_keys(triples, num_entities: int, num_relations: int) -> np.ndarray:
    """Encode triples as unique int64 keys ``(h * R + r) * E + t``."""
    arr = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    return (arr[:, 0] * num_relations + arr[:, 1]) * num_entities + arr[:, 2]


@dataclass(frozen=True)
class TripleStore:
    vocab: Vocabulary
    train: list[Triple]
    valid: list[Triple]
    test: list[Triple]
    known_set: frozenset = field(init=False, repr=False)
    corruption_stats: dict = field(init=False, repr=False)

    def __post_init__(self):
        known = frozenset(Triple(*t) for split in (self.train, self.valid, self.test) for t in split)
        object.__setattr__(self, "known_set", known)
        object.__setattr__(self, "corruption_stats", compute_corruption_stats(self.train) if self.train else {})
        keys = np.sort(triple_keys(list(known), self.num_entities, max(self.num_relations, 1)))
        object.__setattr__(self, "_known_keys", keys)

    @property
    def num_entities(self) -> int:
        return self.vocab.num_entities

    @property
    def num_relations(self) -> int:
        return self.vocab.num_relations

    @classmethod
    def from_dir(cls, directory: str | Path) -> "TripleStore":
        directory = Path(directory)
        train, vocab = load_triples(directory / "train.txt")
        valid, _ = load_triples(directory / "valid.txt", vocab)
        test, _ = load_triples(directory / "test.txt", vocab)
        return cls(vocab, train, valid, test)

    def write_dir(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in SPLITS:
            write_triples(directory / f"{name}.txt", getattr(self, name), self.vocab)

    def split_array(self, name: str) -> np.ndarray:
        return np.asarray(getattr(self, name), dtype=np.int64).reshape(-1, 3)

    def is_known(self, triples) -> np.ndarray:
        """Vectorized membership test against ``known_set``."""
        keys = triple_keys(triples, self.num_entities, max(self.num_relations, 1))
        known = self._known_keys
        if known.size == 0:
            return np.zeros(keys.shape, dtype=bool)
        pos = np.searchsorted(known, keys)
        pos[pos == known.size] = 0
        return known[pos] == keys

    def head_probability(self, relation: int) -> float:
        """Bernoulli probability of replacing the head; 0.5 for relations unseen in train."""
        stats = self.corruption_stats.get(relation)
        if stats is None:
            return 0.5
        tph, hpt = stats
        return tph / (tph + hpt)


def corrupt_triple(t: Triple, stats: dict, rng: np.random.Generator, store: TripleStore) -> Triple:
    """Replace the head or the tail of ``t`` by a uniform entity, avoiding known triples.

    The side is drawn once with P(head) = tph / (tph + hpt); only the
    replacement entity is redrawn on collision.
    """
    h, r, tail = t
    if r in stats:
        tph, hpt = stats[r]
        p_head = tph / (tph + hpt)
    else:
        p_head = 0.5
    corrupt_head = rng.random() < p_head
    num_entities = store.num_entities
    for _ in range(MAX_CORRUPTION_ATTEMPTS):
        e = int(rng.integers(num_entities))
        cand = Triple(e, r, tail) if corrupt_head else Triple(h, r, e)
        if cand not in store.known_set:
            return cand
    raise SamplingExhaustedError(
        f"no unknown corruption of {tuple(t)} after {MAX_CORRUPTION_ATTEMPTS} draws (E={num_entities})"
    )


def corrupt_batch(positives: np.ndarray, rng: np.random.Generator, store: TripleStore) -> np.ndarray:
    """Vectorized :func:`corrupt_triple` over an (m, 3) array.

    Same distribution as the scalar version: one Bernoulli side draw per row,
    then uniform replacements redrawn until the row leaves ``known_set``.
    """
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 3)
    m = positives.shape[0]
    if m == 0:
        return positives.copy()
    p_head = np.array([store.head_probability(r) for r in range(store.num_relations)])
    head_side = rng.random(m) < p_head[positives[:, 1]]
    col = np.where(head_side, 0, 2)
    neg = positives.copy()
    pending = np.arange(m)
    for _ in range(MAX_CORRUPTION_ATTEMPTS):
        neg[pending, col[pending]] = rng.integers(store.num_entities, size=pending.size)
        pending = pending[store.is_known(neg[pending])]
        if pending.size == 0:
            return neg
    bad = positives[pending[0]]
    raise SamplingExhaustedError(
        f"no unknown corruption of {tuple(bad)} after {MAX_CORRUPTION_ATTEMPTS} draws (E={store.num_entities})"
    )


def tokenize(text: str, stopwords: frozenset | set = frozenset()) -> list[str]:
    return [w for w in _TOKEN_RE.split(text.lower()) if len(w) >= 2 and w not in stopwords]


def load_stopwords(path: str | Path | None = None) -> frozenset:
    """Built-in English list, or one word per line from ``path``."""
    if path is None:
        return frozenset(ENGLISH_STOP_WORDS)
    with open(path, encoding="utf-8") as f:
        return frozenset(line.strip().lower() for line in f if line.strip())


@dataclass
class DescriptionCorpus:
    """Tokenized entity descriptions.

    ``docs[e]`` is the token list of entity ``e`` (empty when undescribed).
    ``doc_freq`` counts how many entities mention each word.
    """

    docs: list[list[str]]
    stopwords: frozenset
    skipped_lines: int = 0
    doc_freq: dict[str, int] = field(init=False)

    def __post_init__(self):
        df: dict[str, int] = {}
        for words in self.docs:
            for w in set(words):
                df[w] = df.get(w, 0) + 1
        self.doc_freq = df

    @property
    def num_described(self) -> int:
        return sum(1 for d in self.docs if d)

    @property
    def coverage(self) -> float:
        return self.num_described / len(self.docs) if self.docs else 0.0

    def word_set(self, entity: int) -> set[str]:
        return set(self.docs[entity])


def load_descriptions(path: str | Path, vocab: Vocabulary, stopwords: frozenset | None = None) -> DescriptionCorpus:
    if stopwords is None:
        stopwords = load_stopwords()
    docs: list[list[str]] = [[] for _ in range(vocab.num_entities)]
    skipped = 0
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            sym, _, text = line.partition("\t")
            idx = vocab.entity_ids.get(sym)
            if idx is None:
                skipped += 1
                continue
            docs[idx].extend(tokenize(text, stopwords))
    if skipped:
        logger.warning("skipped %d description lines for unknown entities", skipped)
    return DescriptionCorpus(docs, stopwords, skipped)
