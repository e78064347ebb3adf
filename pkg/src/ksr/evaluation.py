"""Link prediction and entity classification protocols."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from ksr import _kernels
from ksr.data import TripleStore
from ksr.model import KsrModel

logger = logging.getLogger(__name__)

FRACTIONS = (0.25, 0.50, 0.75)

# scorer(heads, relation, tails) -> scores; heads/tails are broadcast index arrays
Scorer = Callable[[np.ndarray, int, np.ndarray], np.ndarray]


def model_scorer(m: KsrModel) -> Scorer:
    def scorer(heads, relation, tails):
        heads, tails = np.broadcast_arrays(np.asarray(heads, dtype=np.int64), np.asarray(tails, dtype=np.int64))
        rels = np.full(heads.shape, relation, dtype=np.int64)
        return _kernels.score_many(m.entity_logits, m.rel_subj_logits, m.rel_obj_logits, m.rel_feat_logits,
                                   np.ascontiguousarray(heads), rels, np.ascontiguousarray(tails),
                                   m.config.sigma)
    return scorer


def oracle_scorer(truths) -> Scorer:
    """Scores +inf for triples in ``truths`` and 0 elsewhere; a perfect-model test hook."""
    truths = {tuple(int(x) for x in t) for t in truths}

    def scorer(heads, relation, tails):
        heads, tails = np.broadcast_arrays(np.asarray(heads), np.asarray(tails))
        return np.array([np.inf if (int(h), relation, int(t)) in truths else 0.0
                         for h, t in zip(heads, tails)])
    return scorer


def _rank_from_scores(scores: np.ndarray, truth: int, mask: np.ndarray | None) -> int:
    s_true = scores[truth]
    above = scores >= s_true
    above[truth] = False
    if mask is not None:
        above &= ~mask
    return 1 + int(np.count_nonzero(above))


def _known_mask(store: TripleStore, h, r, t, side: str) -> np.ndarray:
    candidates = np.arange(store.num_entities)
    trip = np.empty((store.num_entities, 3), dtype=np.int64)
    trip[:, 1] = r
    if side == "head":
        trip[:, 0] = candidates
        trip[:, 2] = t
    else:
        trip[:, 0] = h
        trip[:, 2] = candidates
    return store.is_known(trip)


def rank_entities(m: KsrModel | None, query, filtered: bool, store: TripleStore,
                  scorer: Scorer | None = None) -> int:
    """Rank of the true entity among all E completions of a one-hole query.

    ``query`` is ``(h, r, t, side)``: the true triple and which side
    (``"head"`` or ``"tail"``) is the hole. Ties with the truth count against it.
    """
    h, r, t, side = query
    if scorer is None:
        scorer = model_scorer(m)
    candidates = np.arange(store.num_entities)
    if side == "head":
        scores = scorer(candidates, r, np.int64(t))
        truth = h
    elif side == "tail":
        scores = scorer(np.int64(h), r, candidates)
        truth = t
    else:
        raise ValueError(f"side must be 'head' or 'tail', got {side!r}")
    mask = _known_mask(store, h, r, t, side) if filtered else None
    return _rank_from_scores(np.asarray(scores, dtype=float), truth, mask)


@dataclass
class LinkPredictionReport:
    mrr_head_filtered: float
    mrr_tail_filtered: float
    hits10_raw: float
    hits10_filtered: float
    num_queries: int
    per_relation: dict = field(default_factory=dict)

    @property
    def mrr_filtered(self) -> float:
        return 0.5 * (self.mrr_head_filtered + self.mrr_tail_filtered)

    def to_keyvalue(self) -> str:
        keys = ("mrr_head_filtered", "mrr_tail_filtered", "hits10_raw", "hits10_filtered", "num_queries")
        return "\n".join(f"{k}={getattr(self, k)}" for k in keys) + "\n"

    def to_table(self, title: str = "KSR") -> str:
        lines = [
            f"{'':<12}| {'MRR (Filter)':^17} | {'HITS@10(%)':^15}",
            f"{'Method':<12}| {'Head':>7} {'Tail':>8} | {'Raw':>6} {'Filter':>7}",
            f"{title:<12}| {100 * self.mrr_head_filtered:7.1f} {100 * self.mrr_tail_filtered:8.1f} | "
            f"{100 * self.hits10_raw:6.1f} {100 * self.hits10_filtered:7.1f}",
        ]
        return "\n".join(lines) + "\n"


def _query_ranks(store, scorer, h, r, t):
    """(head raw, head filtered, tail raw, tail filtered) ranks for one test triple."""
    out = []
    candidates = np.arange(store.num_entities)
    for side in ("head", "tail"):
        if side == "head":
            scores = np.asarray(scorer(candidates, r, np.int64(t)), dtype=float)
            truth = h
        else:
            scores = np.asarray(scorer(np.int64(h), r, candidates), dtype=float)
            truth = t
        mask = _known_mask(store, h, r, t, side)
        out.append(_rank_from_scores(scores, truth, None))
        out.append(_rank_from_scores(scores, truth, mask))
    return out


def link_prediction(m: KsrModel | None, store: TripleStore, split: str = "test",
                    scorer: Scorer | None = None) -> LinkPredictionReport:
    triples = getattr(store, split)
    if not triples:
        raise ValueError(f"{split} split is empty")
    if scorer is None:
        scorer = model_scorer(m)
    ranks = np.array([_query_ranks(store, scorer, h, r, t) for h, r, t in triples], dtype=np.int64)
    head_raw, head_f, tail_raw, tail_f = ranks.T
    rels = np.array([r for _, r, _ in triples])
    per_relation = {}
    for r in np.unique(rels):
        sel = rels == r
        per_relation[int(r)] = dict(
            count=int(sel.sum()),
            mrr_head_filtered=float(np.mean(1.0 / head_f[sel])),
            mrr_tail_filtered=float(np.mean(1.0 / tail_f[sel])),
            hits10_filtered=float(np.mean(np.concatenate([head_f[sel], tail_f[sel]]) <= 10)),
        )
    return LinkPredictionReport(
        mrr_head_filtered=float(np.mean(1.0 / head_f)),
        mrr_tail_filtered=float(np.mean(1.0 / tail_f)),
        hits10_raw=float(np.mean(np.concatenate([head_raw, tail_raw]) <= 10)),
        hits10_filtered=float(np.mean(np.concatenate([head_f, tail_f]) <= 10)),
        num_queries=2 * len(triples),
        per_relation=per_relation,
    )


def filtered_mrr(m: KsrModel, store: TripleStore, split: str = "valid") -> float:
    """Direction-averaged filtered MRR; the trainer's model-selection metric."""
    return link_prediction(m, store, split).mrr_filtered


@dataclass
class ClassificationReport:
    accuracy_at: dict = field(default_factory=dict)
    skipped_types: dict = field(default_factory=dict)
    trials: int = 0

    def to_keyvalue(self) -> str:
        lines = [f"T@{round(100 * f)}={acc}" for f, acc in sorted(self.accuracy_at.items())]
        lines += [f"skipped_types@{round(100 * f)}={n}" for f, n in sorted(self.skipped_types.items())]
        return "\n".join(lines) + "\n"

    def to_table(self, title: str = "KSR") -> str:
        fracs = sorted(self.accuracy_at)
        head = f"{'Metrics':<12}|" + "|".join(f" T@{round(100 * f):<4}" for f in fracs)
        row = f"{title:<12}|" + "|".join(f" {100 * self.accuracy_at[f]:5.1f}" for f in fracs)
        return head + "\n" + row + "\n"


def entity_features(m: KsrModel) -> np.ndarray:
    """Flattened per-entity category distributions, shape (E, n * d)."""
    probs = m.entity_probs()
    return probs.reshape(probs.shape[0], -1)


def load_labels(path, vocab) -> dict[int, set[str]]:
    """``entity<TAB>type`` lines; repeated entities accumulate types. Unknown entities are skipped."""
    labels: dict[int, set[str]] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            sym, _, typ = line.partition("\t")
            idx = vocab.entity_ids.get(sym)
            if idx is not None and typ:
                labels.setdefault(idx, set()).add(typ)
    return labels


def _classify_once(features, entities, labels, fraction, rng):
    from sklearn.linear_model import LogisticRegression

    order = rng.permutation(len(entities))
    n_train = max(1, int(round(fraction * len(entities))))
    train_e = entities[order[:n_train]]
    test_e = entities[order[n_train:]]
    if test_e.size == 0:
        return None, 0
    types = sorted({t for e in entities for t in labels[e]})
    decision = []
    kept = []
    skipped = 0
    for typ in types:
        y = np.array([typ in labels[e] for e in train_e])
        if y.sum() < 2 or y.all():
            skipped += 1
            continue
        clf = LogisticRegression(C=10.0, max_iter=1000)
        clf.fit(features[train_e], y)
        decision.append(clf.decision_function(features[test_e]))
        kept.append(typ)
    if not kept:
        return None, skipped
    pred = np.argmax(np.vstack(decision), axis=0)
    correct = sum(kept[p] in labels[e] for p, e in zip(pred, test_e))
    return correct / test_e.size, skipped


def entity_classification(m: KsrModel | None, labels: Mapping[int, set], fraction: float, trials: int,
                          rng: np.random.Generator, features: np.ndarray | None = None) -> tuple[float, int]:
    """Mean one-vs-rest accuracy when ``fraction`` of labeled entities train the classifier.

    Returns ``(accuracy, skipped)`` where ``skipped`` counts types dropped for
    having fewer than two training examples, summed over trials.
    """
    if features is None:
        features = entity_features(m)
    entities = np.array(sorted(e for e, ts in labels.items() if ts))
    accs = []
    skipped = 0
    for _ in range(trials):
        acc, sk = _classify_once(features, entities, labels, fraction, rng)
        skipped += sk
        if acc is not None:
            accs.append(acc)
    return (float(np.mean(accs)) if accs else float("nan")), skipped


def classification_report(m: KsrModel | None, labels, fractions=FRACTIONS, trials: int = 10,
                          seed: int = 0, features: np.ndarray | None = None) -> ClassificationReport:
    report = ClassificationReport(trials=trials)
    for frac in fractions:
        rng = np.random.default_rng([seed, round(1000 * frac)])
        acc, skipped = entity_classification(m, labels, frac, trials, rng, features=features)
        report.accuracy_at[frac] = acc
        report.skipped_types[frac] = skipped
    return report
