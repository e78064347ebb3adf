"""Grounding latent features in entity descriptions.

Builds word/category co-occurrence counts from inferred entity codes, ranks
significant words per category, measures feature co-activation, and
retrieves entities for a free-text query with a naive-Bayes sentence code.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from ksr.data import DescriptionCorpus
from ksr.model import KsrModel, SemanticCode, entity_codes

logger = logging.getLogger(__name__)

DEFAULT_MIN_DF = 5
DEFAULT_EPSILON = 1.0


@dataclass
class WordCategoryTable:
    """``counts[j, i, c]`` = number of described entities containing word j whose code has category c at feature i."""

    counts: np.ndarray  # (W, n, d) int64
    words: list[str]
    doc_freq: np.ndarray  # (W,)
    epsilon: float = DEFAULT_EPSILON
    word_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.word_index = {w: j for j, w in enumerate(self.words)}

    @property
    def num_features(self) -> int:
        return self.counts.shape[1]

    @property
    def num_categories(self) -> int:
        return self.counts.shape[2]

    def conditional(self, j: int) -> np.ndarray:
        """Smoothed P(z_i = c | w_j), shape (n, d)."""
        c = self.counts[j] + self.epsilon
        return c / c.sum(axis=-1, keepdims=True)


def build_word_category_table(m: KsrModel, corpus: DescriptionCorpus, min_df: int = DEFAULT_MIN_DF,
                              epsilon: float = DEFAULT_EPSILON) -> WordCategoryTable:
    if corpus.num_described == 0:
        raise ValueError("description corpus is empty")
    if len(corpus.docs) != m.num_entities:
        raise ValueError(f"corpus covers {len(corpus.docs)} entities, model has {m.num_entities}")
    words = sorted(w for w, df in corpus.doc_freq.items() if df >= min_df)
    index = {w: j for j, w in enumerate(words)}
    n, d = m.config.n, m.config.d
    counts = np.zeros((len(words), n, d), dtype=np.int64)
    codes = entity_codes(m)
    features = np.arange(n)
    for e, doc in enumerate(corpus.docs):
        for w in set(doc):
            j = index.get(w)
            if j is not None:
                counts[j, features, codes[e]] += 1
    doc_freq = np.array([corpus.doc_freq[w] for w in words], dtype=np.int64)
    return WordCategoryTable(counts, words, doc_freq, epsilon)


def significant_words(table: WordCategoryTable, feature: int, category: int, k: int) -> list[tuple[str, float]]:
    """Top-k words by smoothed purity P(z_feature = category | w); ties by higher df, then alphabetically."""
    eps = table.epsilon
    sub = table.counts[:, feature, :]
    purity = (sub[:, category] + eps) / (sub.sum(axis=-1) + eps * table.num_categories)
    order = sorted(range(len(table.words)), key=lambda j: (-purity[j], -table.doc_freq[j], table.words[j]))
    return [(table.words[j], float(purity[j])) for j in order[:max(k, 0)]]


def significant_words_tsv(table: WordCategoryTable, k: int = 8) -> str:
    lines = ["feature\tcategory\trank\tword\tscore"]
    for i in range(table.num_features):
        for c in range(table.num_categories):
            for rank, (w, s) in enumerate(significant_words(table, i, c, k), 1):
                lines.append(f"{i}\t{c}\t{rank}\t{w}\t{s:.6f}")
    return "\n".join(lines) + "\n"


@dataclass
class FeatureCorrelation:
    matrix: np.ndarray  # (n, n) cosine-normalized co-occurrence
    raw: np.ndarray  # (n, n) co-occurrence counts
    designated: np.ndarray  # (n,) marked category per feature
    labels: list[str]

    def to_tsv(self) -> str:
        lines = ["\t" + "\t".join(self.labels)]
        for label, row in zip(self.labels, self.matrix):
            lines.append(label + "\t" + "\t".join(f"{v:.6f}" for v in row))
        return "\n".join(lines) + "\n"


def default_designated(codes: np.ndarray, d: int) -> np.ndarray:
    """Per feature, the least frequent category among those that occur (lowest index on ties)."""
    out = np.zeros(codes.shape[1], dtype=np.int64)
    for i in range(codes.shape[1]):
        freq = np.bincount(codes[:, i], minlength=d).astype(float)
        freq[freq == 0] = np.inf
        out[i] = int(np.argmin(freq))
    return out


def feature_correlation(codes, designated=None, d: int | None = None,
                        labels: list[str] | None = None) -> FeatureCorrelation:
    codes = np.array([list(c) for c in codes], dtype=np.int64) if not isinstance(codes, np.ndarray) else codes
    n = codes.shape[1]
    if designated is None:
        designated = default_designated(codes, int(codes.max()) + 1 if d is None else d)
    designated = np.asarray(designated, dtype=np.int64)
    hits = (codes == designated[None, :]).astype(np.int64)
    raw = hits.T @ hits
    diag = np.diag(raw).astype(float)
    norm = np.sqrt(np.outer(diag, diag))
    matrix = np.divide(raw, norm, out=np.zeros((n, n)), where=norm > 0)
    for i in np.flatnonzero(diag == 0):
        logger.warning("feature %d never takes its designated category %d", i, designated[i])
    labels = labels or [f"f{i}" for i in range(n)]
    return FeatureCorrelation(matrix, raw, designated, labels)


@dataclass
class SentenceCode:
    probs: np.ndarray  # (n, d), rows sum to 1
    degenerate: bool = False
    matched_words: int = 0

    def code(self) -> SemanticCode:
        return SemanticCode(tuple(int(c) for c in np.argmax(self.probs, axis=-1)))


def sentence_code(words: list[str], table: WordCategoryTable) -> SentenceCode:
    """Naive-Bayes product of per-word smoothed conditionals, normalized per feature.

    Out-of-vocabulary words are skipped; with none left the rows are uniform
    and the result is flagged degenerate.
    """
    n, d = table.num_features, table.num_categories
    logp = np.zeros((n, d))
    matched = 0
    for w in words:
        j = table.word_index.get(w)
        if j is None:
            continue
        logp += np.log(table.conditional(j))
        matched += 1
    if matched == 0:
        return SentenceCode(np.full((n, d), 1.0 / d), degenerate=True, matched_words=0)
    return SentenceCode(softmax(logp, axis=-1), matched_words=matched)


@dataclass
class RetrievalResult:
    hits: list[tuple[int, float]]
    degenerate: bool = False


def cosine_similarities(reps: np.ndarray, query: np.ndarray) -> np.ndarray:
    denom = np.linalg.norm(reps, axis=1) * np.linalg.norm(query)
    return np.divide(reps @ query, denom, out=np.zeros(reps.shape[0]), where=denom > 0)


def retrieve_entities(words: list[str], m: KsrModel, table: WordCategoryTable, k: int) -> RetrievalResult:
    sc = sentence_code(words, table)
    if sc.degenerate or k <= 0:
        return RetrievalResult([], degenerate=sc.degenerate)
    reps = m.entity_probs().reshape(m.num_entities, -1)
    sims = cosine_similarities(reps, sc.probs.ravel())
    order = np.lexsort((np.arange(sims.size), -sims))[:k]
    return RetrievalResult([(int(e), float(sims[e])) for e in order])
