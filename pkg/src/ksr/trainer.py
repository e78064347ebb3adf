"""Margin-based SGD over golden and corrupted triples."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ksr import _kernels
from ksr.data import TripleStore, corrupt_batch
from ksr.evaluation import filtered_mrr
from ksr.model import ConfigError, KsrModel, ModelConfig, init_model, save_model

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.01
    gamma: float = 2.5
    sigma: float = 0.04
    epochs: int = 2000
    negatives_per_positive: int = 1
    eval_every: int = 10
    patience: int = 5
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if not self.gamma >= 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")
        for name in ("negatives_per_positive", "eval_every", "patience", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    valid_mrr: list[tuple[int, float]] = field(default_factory=list)
    best_epoch: int = 0
    epoch_seconds: list[float] = field(default_factory=list)
    model_path: str | None = None
    mode: str = "sequential"

    def to_keyvalue(self) -> str:
        lines = [f"mode={self.mode}", f"epochs_run={len(self.losses)}", f"best_epoch={self.best_epoch}",
                 f"model_path={self.model_path}"]
        lines += [f"loss.{i + 1}={v!r}" for i, v in enumerate(self.losses)]
        lines += [f"valid_mrr.{e}={v!r}" for e, v in self.valid_mrr]
        lines += [f"seconds.{i + 1}={v:.6f}" for i, v in enumerate(self.epoch_seconds)]
        return "\n".join(lines) + "\n"


def _epoch_pairs(train: np.ndarray, store: TripleStore, k: int, rng: np.random.Generator):
    pos = train[rng.permutation(train.shape[0])]
    if k > 1:
        pos = np.repeat(pos, k, axis=0)
    neg = corrupt_batch(pos, rng, store)
    return np.ascontiguousarray(pos), np.ascontiguousarray(neg)


def run_epoch(m: KsrModel, pos: np.ndarray, neg: np.ndarray, tconfig: TrainConfig) -> np.ndarray:
    """One pass of hinge-loss SGD over aligned pairs; returns per-pair losses."""
    losses = np.zeros(pos.shape[0])
    args = (m.entity_logits, m.rel_subj_logits, m.rel_obj_logits, m.rel_feat_logits, pos, neg,
            float(tconfig.alpha), float(tconfig.gamma), float(m.config.sigma), losses)
    if tconfig.workers == 1:
        bad = _kernels.sgd_epoch(*args)
    else:
        bad = _kernels.sgd_epoch_hogwild(*args, tconfig.workers)
    if bad >= 0:
        raise TrainingError(f"non-finite loss at step {bad} for pair {tuple(pos[bad])} / {tuple(neg[bad])}")
    return losses


def fit(store: TripleStore, mconfig: ModelConfig, tconfig: TrainConfig,
        out_dir: str | Path | None = None, model: KsrModel | None = None) -> tuple[KsrModel, TrainReport]:
    """Train a model on ``store.train`` and return the best validation checkpoint.

    Validation filtered MRR is computed every ``eval_every`` epochs and after
    the last epoch; training stops early after ``patience`` checks without
    improvement. When ``out_dir`` is given, each checkpoint is written as
    ``epoch-XXXX.ksr`` and the best one is copied to ``best.ksr``.
    """
    if not store.train:
        raise TrainingError("train split is empty")
    if mconfig.sigma != tconfig.sigma:
        raise ConfigError(f"model sigma {mconfig.sigma} != training sigma {tconfig.sigma}")
    rng = np.random.default_rng(tconfig.seed)
    if model is None:
        model = init_model(mconfig, store.num_entities, store.num_relations)
    report = TrainReport(mode="sequential" if tconfig.workers == 1 else f"hogwild/{tconfig.workers}")
    if tconfig.workers > 1:
        import numba
        numba.set_num_threads(min(tconfig.workers, numba.config.NUMBA_NUM_THREADS))
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    train = store.split_array("train")
    best = model.copy()
    best_mrr = -math.inf
    stale = 0
    for epoch in range(1, tconfig.epochs + 1):
        t0 = time.perf_counter()
        pos, neg = _epoch_pairs(train, store, tconfig.negatives_per_positive, rng)
        try:
            losses = run_epoch(model, pos, neg, tconfig)
        except TrainingError as exc:
            raise TrainingError(f"epoch {epoch}: {exc}") from None
        report.losses.append(float(losses.mean()))
        report.epoch_seconds.append(time.perf_counter() - t0)
        if epoch % tconfig.eval_every and epoch != tconfig.epochs:
            continue
        if not store.valid:
            best, report.best_epoch = model.copy(), epoch
            continue
        mrr = filtered_mrr(model, store, "valid")
        report.valid_mrr.append((epoch, mrr))
        logger.info("epoch %d loss %.4f valid mrr %.4f", epoch, report.losses[-1], mrr)
        if out_dir is not None:
            save_model(model, out_dir / f"epoch-{epoch:04d}.ksr")
        if mrr > best_mrr:
            best_mrr, best, report.best_epoch, stale = mrr, model.copy(), epoch, 0
        else:
            stale += 1
            if stale >= tconfig.patience:
                logger.info("early stop at epoch %d (best %d)", epoch, report.best_epoch)
                break
    best.meta.update(best_epoch=report.best_epoch, mode=report.mode)
    if out_dir is not None:
        report.model_path = str(save_model(best, out_dir / "best.ksr"))
    return best, report


def epoch_throughput_probe(store: TripleStore, mconfig: ModelConfig, steps: int = 20000,
                           repeats: int = 5, seed: int = 0) -> float:
    """Steady-state training triples per second for a model of the given shape.

    The margin is set high enough that every pair takes the full update, and
    the fastest of ``repeats`` timed passes is used.
    """
    rng = np.random.default_rng(seed)
    model = init_model(mconfig, store.num_entities, store.num_relations, rng)
    train = store.split_array("train")
    idx = rng.integers(train.shape[0], size=steps)
    pos = np.ascontiguousarray(train[idx])
    neg = corrupt_batch(pos, rng, store)
    tconfig = TrainConfig(alpha=1e-6, gamma=1e6, sigma=mconfig.sigma, epochs=1)
    run_epoch(model.copy(), pos[:10], neg[:10], tconfig)  # compile
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        run_epoch(model, pos, neg, tconfig)
        best = min(best, time.perf_counter() - t0)
    return steps / best


def config_dict(mconfig: ModelConfig, tconfig: TrainConfig) -> dict:
    return {**{f"model.{k}": v for k, v in asdict(mconfig).items()}, **asdict(tconfig)}
