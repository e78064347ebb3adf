"""Deterministic two-cluster toy knowledge graph used by tests and demos.

Entities are split into two planted clusters A and B. Four relations link
clusters by membership alone: ``AA`` (A to A), ``BB``, ``AB`` and ``BA``.
Every membership-consistent pair, self loops included, is a fact, so after
filtering the true answer competes only with the wrong cluster and every
negative sample crosses clusters.

Run ``python -m ksr.toy DIR`` to write the dataset to disk.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ksr.data import DescriptionCorpus, Triple, TripleStore, Vocabulary, load_stopwords, tokenize

RELATIONS = {"AA": (0, 0), "BB": (1, 1), "AB": (0, 1), "BA": (1, 0)}
SIGNATURES = ("harbor", "orchard")
FILLER = ("alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet",
          "kilo", "lima", "mike", "november", "oscar", "papa", "quebec", "romeo", "sierra", "tango")


@dataclass
class ToyKG:
    store: TripleStore
    clusters: np.ndarray  # planted cluster (0 = A, 1 = B) per entity index
    descriptions: dict[str, str]  # entity symbol -> text
    labels: dict[str, str]  # entity symbol -> planted type

    def corpus(self) -> DescriptionCorpus:
        stop = load_stopwords()
        docs = [tokenize(self.descriptions.get(sym, ""), stop) for sym in self.store.vocab.entity_ids]
        return DescriptionCorpus(docs, stop)

    def label_sets(self) -> dict[int, set[str]]:
        ids = self.store.vocab.entity_ids
        return {ids.index(sym): {typ} for sym, typ in self.labels.items()}

    def write_dir(self, directory: str | Path) -> None:
        directory = Path(directory)
        self.store.write_dir(directory)
        with open(directory / "descriptions.txt", "w", encoding="utf-8") as f:
            for sym, text in self.descriptions.items():
                f.write(f"{sym}\t{text}\n")
        with open(directory / "labels.txt", "w", encoding="utf-8") as f:
            for sym, typ in self.labels.items():
                f.write(f"{sym}\t{typ}\n")


def make_toy_kg(num_entities: int = 200, num_valid: int = 200, num_test: int = 200, seed: int = 0,
                filler_words: int = 6) -> ToyKG:
    rng = np.random.default_rng(seed)
    clusters = np.zeros(num_entities, dtype=np.int64)
    clusters[rng.permutation(num_entities)[num_entities // 2:]] = 1
    names = [f"/toy/e{i:03d}" for i in range(num_entities)]
    members = [np.flatnonzero(clusters == c) for c in (0, 1)]

    facts = []
    for rel, (ch, ct) in RELATIONS.items():
        for h in members[ch]:
            for t in members[ct]:
                facts.append((names[h], rel, names[t]))
    order = rng.permutation(len(facts))
    facts = [facts[i] for i in order]

    # Entities enter the vocabulary in name order so index == planted entity id.
    vocab = Vocabulary(names, list(RELATIONS))
    enc = [Triple(vocab.entity_ids.index(h), vocab.relation_ids.index(r), vocab.entity_ids.index(t))
           for h, r, t in facts]
    test = enc[:num_test]
    valid = enc[num_test:num_test + num_valid]
    train = enc[num_test + num_valid:]
    store = TripleStore(vocab, train, valid, test)

    descriptions = {}
    labels = {}
    for i, sym in enumerate(names):
        words = list(rng.choice(FILLER, size=filler_words, replace=False))
        words.insert(int(rng.integers(len(words) + 1)), SIGNATURES[clusters[i]])
        descriptions[sym] = "The entity " + " ".join(words) + "."
        labels[sym] = ("type_a", "type_b")[clusters[i]]
    return ToyKG(store, clusters, descriptions, labels)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: python -m ksr.toy OUTDIR", file=sys.stderr)
        return 2
    make_toy_kg().write_dir(argv[0])
    return 0


if __name__ == "__main__":
    sys.exit(main())
