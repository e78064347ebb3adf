"""Command-line entry point: ``ksr <command> [options]``."""

from __future__ import annotations

import argparse
import hashlib
import logging
import subprocess
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from scipy.special import softmax

from ksr import __version__
from ksr.data import SPLITS, TripleStore, Vocabulary, load_descriptions, load_stopwords, load_triples, tokenize
from ksr.model import ModelConfig, infer_entity_code, infer_relation_code, load_model, save_model
from ksr.trainer import TrainConfig

logger = logging.getLogger("ksr")


class UsageError(Exception):
    """Bad arguments or configuration; exit status 2."""


# key -> (type, default). Flags override config-file values, which override these.
RUN_KEYS = {
    "data": (str, None),
    "out": (str, None),
    "model": (str, None),
    "descriptions": (str, None),
    "labels": (str, None),
    "stopwords": (str, None),
    "n": (int, ModelConfig.n),
    "d": (int, ModelConfig.d),
    "sigma": (float, TrainConfig.sigma),
    "alpha": (float, TrainConfig.alpha),
    "gamma": (float, TrainConfig.gamma),
    "epochs": (int, TrainConfig.epochs),
    "negatives_per_positive": (int, TrainConfig.negatives_per_positive),
    "eval_every": (int, TrainConfig.eval_every),
    "patience": (int, TrainConfig.patience),
    "workers": (int, TrainConfig.workers),
    "seed": (int, TrainConfig.seed),
}


def read_config_file(path: str | Path) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment. Unknown keys are an error."""
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            if key not in RUN_KEYS:
                raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
            kind = RUN_KEYS[key][0]
            value = value.strip()
            try:
                values[key] = None if value in ("", "None") else kind(value)
            except ValueError:
                raise UsageError(f"{path}:{lineno}: bad value for {key}: {value!r}") from None
    return values


def resolve_run_config(args: argparse.Namespace) -> dict:
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    resolved = {}
    for key, (_, default) in RUN_KEYS.items():
        flag = getattr(args, key, None)
        resolved[key] = flag if flag is not None else file_values.get(key, default)
    return resolved


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def build_id() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(path: Path, cfg: dict, data_dir: Path, mode: str) -> None:
    lines = [f"# ksr run manifest; reuse with: ksr train --config {path.name}",
             f"# build={build_id()}", f"# mode={mode}"]
    for name in SPLITS:
        lines.append(f"# sha256.{name}={_sha256(data_dir / f'{name}.txt')}")
    lines += [f"{key}={'' if cfg[key] is None else cfg[key]!s}" for key in RUN_KEYS]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k for k in missing))


def _load_vocab(cfg: dict) -> Vocabulary:
    model_dir = Path(cfg["model"]).parent
    if (model_dir / "entities.dict").exists():
        return Vocabulary.load(model_dir)
    if cfg.get("data"):
        return load_triples(Path(cfg["data"]) / "train.txt")[1]
    raise UsageError(f"no entities.dict next to {cfg['model']}; pass --data to rebuild the vocabulary")


def _load_checked_model(cfg: dict, vocab: Vocabulary):
    m = load_model(cfg["model"])
    if m.num_entities != vocab.num_entities or m.num_relations != vocab.num_relations:
        raise ValueError(f"model has E={m.num_entities}, R={m.num_relations} but vocabulary has "
                         f"E={vocab.num_entities}, R={vocab.num_relations}")
    return m


def cmd_train(args, out):
    from ksr.trainer import fit

    cfg = resolve_run_config(args)
    _require(cfg, "data", "out")
    data_dir, out_dir = Path(cfg["data"]), Path(cfg["out"])
    try:
        mconfig = ModelConfig(n=cfg["n"], d=cfg["d"], sigma=cfg["sigma"], seed=cfg["seed"])
        tconfig = TrainConfig(**{f.name: cfg[f.name] for f in fields(TrainConfig)})
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    store = TripleStore.from_dir(data_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store.vocab.save(out_dir)
    mode = "sequential" if tconfig.workers == 1 else f"hogwild/{tconfig.workers}"
    write_manifest(out_dir / "manifest.txt", cfg, data_dir, mode)
    model, report = fit(store, mconfig, tconfig, out_dir=out_dir / "checkpoints")
    save_model(model, out_dir / "model.ksr", provenance={"build": build_id(), "best_epoch": report.best_epoch})
    report.model_path = str(out_dir / "model.ksr")
    (out_dir / "train_report.txt").write_text(report.to_keyvalue(), encoding="utf-8")
    print(f"model={report.model_path}", file=out)
    print(f"epochs_run={len(report.losses)}", file=out)
    print(f"best_epoch={report.best_epoch}", file=out)
    if report.losses:
        print(f"final_loss={report.losses[-1]!r}", file=out)
    return 0


def cmd_eval_lp(args, out):
    from ksr.evaluation import link_prediction, oracle_scorer

    cfg = resolve_run_config(args)
    _require(cfg, "model", "data")
    store = TripleStore.from_dir(cfg["data"])
    scorer = None
    model = None
    if args.oracle_scorer:
        scorer = oracle_scorer(getattr(store, args.split))
    else:
        model = _load_checked_model(cfg, store.vocab)
    report = link_prediction(model, store, args.split, scorer=scorer)
    out.write(report.to_keyvalue())
    out.write("\n" + report.to_table())
    return 0


def cmd_eval_ec(args, out):
    from ksr.evaluation import classification_report, load_labels

    cfg = resolve_run_config(args)
    _require(cfg, "model", "labels")
    vocab = _load_vocab(cfg)
    model = _load_checked_model(cfg, vocab)
    try:
        fractions = [int(x) / 100 for x in args.fractions.split(",")]
    except ValueError:
        raise UsageError(f"bad --fractions {args.fractions!r}") from None
    labels = load_labels(cfg["labels"], vocab)
    report = classification_report(model, labels, fractions, args.trials, seed=cfg["seed"])
    out.write(report.to_keyvalue())
    out.write("\n" + report.to_table())
    return 0


def _table_for(cfg, args):
    from ksr.semantics import build_word_category_table

    _require(cfg, "model", "descriptions")
    vocab = _load_vocab(cfg)
    model = _load_checked_model(cfg, vocab)
    stop = load_stopwords(cfg.get("stopwords"))
    corpus = load_descriptions(cfg["descriptions"], vocab, stop)
    table = build_word_category_table(model, corpus, min_df=args.min_df)
    return vocab, model, stop, table


def cmd_analyze(args, out):
    from ksr.model import entity_codes
    from ksr.semantics import feature_correlation, significant_words_tsv

    cfg = resolve_run_config(args)
    vocab, model, _, table = _table_for(cfg, args)
    designated = None
    if args.designated:
        designated = [int(x) for x in args.designated.split(",")]
        if len(designated) != model.config.n:
            raise UsageError(f"--designated needs {model.config.n} comma-separated categories")
    words_tsv = significant_words_tsv(table, args.top_k)
    corr_tsv = feature_correlation(entity_codes(model), designated, d=model.config.d).to_tsv()
    if cfg.get("out"):
        out_dir = Path(cfg["out"])
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "significant_words.tsv").write_text(words_tsv, encoding="utf-8")
        (out_dir / "feature_correlation.tsv").write_text(corr_tsv, encoding="utf-8")
    out.write("# significant words\n" + words_tsv + "\n# feature correlation\n" + corr_tsv)
    return 0


def cmd_retrieve(args, out):
    from ksr.semantics import retrieve_entities

    cfg = resolve_run_config(args)
    vocab, model, stop, table = _table_for(cfg, args)
    result = retrieve_entities(tokenize(args.query, stop), model, table, args.k)
    if result.degenerate:
        print("# degenerate query: no in-vocabulary words", file=out)
    for rank, (e, sim) in enumerate(result.hits, 1):
        print(f"{rank}\t{vocab.entity_ids.symbol(e)}\t{sim:.6f}", file=out)
    return 0


def cmd_inspect(args, out):
    cfg = resolve_run_config(args)
    _require(cfg, "model")
    model = load_model(cfg["model"])
    if args.entity is None and args.relation is None:
        c = model.config
        print(f"n={c.n}\nd={c.d}\nsigma={c.sigma}\nseed={c.seed}\n"
              f"entities={model.num_entities}\nrelations={model.num_relations}", file=out)
        return 0
    vocab = _load_vocab(cfg) if (args.entity and not args.entity.isdigit()) or \
        (args.relation and not args.relation.isdigit()) else None

    def lookup(sym, table, kind):
        if sym.isdigit():
            return int(sym)
        if sym not in table:
            raise KeyError(f"unknown {kind} {sym!r}")
        return table.index(sym)

    if args.entity is not None:
        e = lookup(args.entity, vocab.entity_ids if vocab else None, "entity")
        code = infer_entity_code(model, e)
        dists = softmax(model.entity_logits[e], axis=-1)
        print(f"entity={args.entity}", file=out)
    else:
        r = lookup(args.relation, vocab.relation_ids if vocab else None, "relation")
        code = infer_relation_code(model, r)
        joint = softmax(model.rel_subj_logits[r], axis=-1) * softmax(model.rel_obj_logits[r], axis=-1)
        dists = joint / joint.sum(axis=-1, keepdims=True)
        print(f"relation={args.relation}", file=out)
    print("code=" + ",".join(map(str, code)), file=out)
    with np.printoptions(precision=4, suppress=True):
        for i, row in enumerate(dists):
            print(f"feature {i}\t" + "\t".join(f"{p:.4f}" for p in row), file=out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file (flags take precedence)")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="ksr", description=__doc__)
    parser.add_argument("--version", action="version", version=f"ksr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="fit a model")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--n", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--negatives", dest="negatives_per_positive", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--patience", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-lp", parents=[common], help="link prediction")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--oracle-scorer", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_eval_lp)

    p = sub.add_parser("eval-ec", parents=[common], help="entity classification")
    p.add_argument("--model")
    p.add_argument("--labels")
    p.add_argument("--data", help="rebuild the vocabulary from DATA/train.txt")
    p.add_argument("--fractions", default="25,50,75")
    p.add_argument("--trials", type=int, default=10)
    p.set_defaults(func=cmd_eval_ec)

    for name, func, helptext in (("analyze", cmd_analyze, "significant words and feature correlation"),
                                 ("retrieve", cmd_retrieve, "rank entities for a text query")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--model")
        p.add_argument("--descriptions")
        p.add_argument("--data", help="rebuild the vocabulary from DATA/train.txt")
        p.add_argument("--stopwords")
        p.add_argument("--min-df", type=int, default=5)
        if name == "analyze":
            p.add_argument("--top-k", type=int, default=8)
            p.add_argument("--designated", help="comma-separated marked category per feature")
            p.add_argument("--out")
        else:
            p.add_argument("--query", required=True)
            p.add_argument("--k", type=int, default=5)
        p.set_defaults(func=func)

    p = sub.add_parser("inspect", parents=[common], help="print semantic codes")
    p.add_argument("--model")
    p.add_argument("--data", help="rebuild the vocabulary from DATA/train.txt")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--entity", help="entity symbol or index")
    g.add_argument("--relation", help="relation symbol or index")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, out)
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"ksr {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, LookupError, ArithmeticError, RuntimeError) as exc:
        print(f"ksr {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
