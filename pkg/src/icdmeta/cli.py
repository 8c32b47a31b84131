"""Command-line entry point: ``icdmeta <subcommand> ...`` (or ``python -m icdmeta``).

Every subcommand accepts ``--config <file>``, a flat ``key = value`` file.
Keys may be bare field names or carry the pipeline prefixes (``caml_``,
``meta_``, ``sgns_``, ``tab_``).  Explicit command-line flags win.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from . import caml, pipeline, tabular
from .config import apply_config, read_flat_config
from .corpus import SgnsConfig, SyntheticSpec, generate_synthetic, map_icd9_to_icd10, \
    preprocess, read_bags, read_corpus, read_events, train_sgns, write_synthetic
from .data import LabelSpace, documents_from_records, label_matrix, read_codes, read_jsonl, \
    read_label_csv, read_predictions, write_predictions
from .embed_core import load_embeddings, save_embeddings
from .meta import MetaConfig, combine
from .metrics import evaluate
from .postprocess import apply_steps


class CliError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(message)
        self.stage = stage


def _config(args) -> dict:
    return read_flat_config(args.config) if getattr(args, "config", None) else {}


def _section(obj, values: dict, prefix: str, flags: dict):
    obj = apply_config(obj, values)
    obj = apply_config(obj, values, prefix=prefix)
    return apply_config(obj, {k: v for k, v in flags.items() if v is not None})


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


# subcommands -----------------------------------------------------------------

def cmd_postprocess(args):
    cfg = _config(args)
    steps = args.steps or cfg.get("steps", "meandiff")
    comps = args.components if args.components is not None else int(cfg.get("pca_components", 2))
    emb = load_embeddings(args.inp)
    save_embeddings(apply_steps(emb, [s for s in steps.split(",") if s], comps), args.out)


def cmd_meta(args):
    method = {"avg": "averaging", "lle": "locally_linear"}[args.method]
    cfg = _section(MetaConfig(), _config(args), "meta_",
                   {"method": method, "k_neighbors": args.k, "out_dim": args.dim,
                    "sgd_learning_rate": args.lr, "sgd_max_iters": args.iters, "seed": args.seed,
                    "solver": args.solver})
    save_embeddings(combine(load_embeddings(args.src_a), load_embeddings(args.src_b), cfg),
                    args.out)


def _docs(path, labels, split=None):
    return documents_from_records(read_jsonl(path), labels, preprocess, split)


def cmd_caml_train(args):
    cfg = _section(caml.TrainConfig(), _config(args), "caml_",
                   {"learning_rate": args.lr, "max_epochs": args.epochs, "seed": args.seed})
    labels = read_codes(args.labels)
    if args.dev_docs:
        train_docs, dev_docs = _docs(args.docs, labels), _docs(args.dev_docs, labels)
    else:
        records = read_jsonl(args.docs)
        if not any(r.get("split") == "dev" for r in records):
            raise CliError("caml-train", "no dev documents: pass --dev-docs or a split field")
        train_docs = documents_from_records(records, labels, preprocess, "train")
        dev_docs = documents_from_records(records, labels, preprocess, "dev")
    model = caml.init_model(load_embeddings(args.embeddings), labels, cfg.filter_width,
                            cfg.filter_maps, cfg.seed, cfg.dropout, cfg.freeze_embeddings,
                            cfg.max_length)
    model, tlog = caml.train(model, train_docs, dev_docs, cfg)
    caml.save_model(model, args.out)
    if args.log:
        _write_json(dataclasses.asdict(tlog), args.log)
    print(f"best epoch {tlog.best_epoch} dev micro-F1 {tlog.best_dev_micro_f1:.4f}")


def cmd_caml_predict(args):
    model = caml.load_model(args.model)
    write_predictions(caml.predict_documents(model, _docs(args.docs, model.labels, args.split)),
                      args.out)


def _tabular_input(kind, path):
    return read_events(path) if kind == "structured" else read_bags(path)


def cmd_tabular_train(args):
    values = _config(args)
    preset = args.preset or values.get("tab_preset", values.get("preset", "icd10_32"))
    params = _section(dataclasses.replace(tabular.PRESETS[preset]), values, "tab_",
                      {"n_estimators": args.n_estimators})
    seed = args.seed if args.seed is not None else int(values.get("tab_seed", 0))
    labels = read_codes(args.codes)
    mapping = read_label_csv(args.labels)
    ids = sorted(mapping)
    src = _tabular_input(args.kind, args.input)
    if args.kind == "structured":
        spec = tabular.structured_featurizer(src, ids, args.top_items)
        x = tabular.aggregate_structured(src, ids=ids, items=spec["items"])
    else:
        spec = tabular.tfidf_featurizer([src.get(i, []) for i in ids])
        x = tabular.featurize(spec, {i: src.get(i, []) for i in ids})
    model = tabular.train_boosted(x, label_matrix(ids, mapping, labels), params, seed, labels.codes)
    model.featurizer = spec
    tabular.save_boosted(model, args.out)


def cmd_tabular_predict(args):
    model = tabular.load_boosted(args.model)
    kind = model.featurizer["kind"]
    src = _tabular_input("structured" if kind == "structured" else "bags", args.input)
    if args.ids:
        ids = sorted(read_label_csv(args.ids))
        spec = dict(model.featurizer, ids=ids)
        x = tabular.featurize(spec, src) if kind == "structured" else \
            tabular.featurize(spec, {i: src.get(i, []) for i in ids})
    else:
        x = tabular.featurize(model, src)
    write_predictions(tabular.predict_boosted(model, x), args.out)


def cmd_ensemble(args):
    values = _config(args)
    folds = args.folds or int(values.get("ens_folds", 5))
    seed = args.seed if args.seed is not None else int(values.get("ens_seed", 0))
    preds = [read_predictions(p) for p in args.preds.split(",") if p]
    labels = LabelSpace(tuple(preds[0].codes))
    mapping = read_label_csv(args.labels)
    truth = {i: labels.encode(mapping.get(i, [])) for i in preds[0].ids}
    report = pipeline.run_ensemble(preds, truth, folds, seed, args.k,
                                   args.features or values.get("ens_features", "same_label"),
                                   [p for p in args.preds.split(",") if p])
    oof = report.pop("out_of_fold")
    if args.oof:
        write_predictions(oof, args.oof)
    _write_json(report, args.report)
    for metric, text in report["formatted"].items():
        print(f"{metric}: {text}")


def cmd_evaluate(args):
    pred = read_predictions(args.pred)
    mapping = read_label_csv(args.labels)
    y = label_matrix(pred.ids, mapping, LabelSpace(tuple(pred.codes)))
    _write_json(evaluate(pred.probs, y, args.k, args.threshold).to_dict(), args.out)


def cmd_corpus_synth(args):
    values = read_flat_config(args.spec) if args.spec else {}
    values.update(_config(args))
    spec = apply_config(SyntheticSpec(), values)
    spec = apply_config(spec, values, prefix="synth_")
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    paths = write_synthetic(generate_synthetic(spec), args.out_dir)
    for name in sorted(paths):
        print(paths[name])


def cmd_corpus_sgns(args):
    cfg = _section(SgnsConfig(), _config(args), "sgns_",
                   {"dim": args.dim, "epochs": args.epochs, "seed": args.seed})
    save_embeddings(train_sgns(read_corpus(args.inp), cfg), args.out)


def cmd_corpus_map(args):
    for code in args.codes:
        print(f"{code}\t{map_icd9_to_icd10(code) or '-'}")


def _pipeline_cfg(args):
    overrides = {}
    if args.variant:
        overrides["variant"] = args.variant
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    for item in args.set or []:
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    return pipeline.load_pipeline_config(args.config, overrides)


def cmd_run(args):
    manifest = pipeline.run_variant(_pipeline_cfg(args))
    print(json.dumps(manifest["metrics"]["test"], sort_keys=True))


def cmd_run_multimodal(args):
    cfg = _pipeline_cfg(args)
    if args.no_text:
        cfg.text_model = False
    manifest = pipeline.run_multimodal(cfg)
    for metric, text in manifest["metrics"]["aggregate"]["formatted"].items():
        print(f"{metric}: {text}")


# parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="icdmeta", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("postprocess", parents=[common], help="MeanDiff / PCADiff")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", help="comma list of meandiff,pcadiff")
    s.add_argument("--components", type=int)
    s.set_defaults(func=cmd_postprocess, stage="postprocess")

    s = sub.add_parser("meta", parents=[common], help="combine two embedding sources")
    s.add_argument("--method", choices=("avg", "lle"), required=True)
    s.add_argument("--src-a", required=True)
    s.add_argument("--src-b", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--k", type=int)
    s.add_argument("--dim", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--iters", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--solver", choices=("sgd", "exact"))
    s.set_defaults(func=cmd_meta, stage="meta")

    s = sub.add_parser("caml", parents=[common], help="per-label attention CNN")
    csub = s.add_subparsers(dest="action", required=True)
    t = csub.add_parser("train", parents=[common])
    t.add_argument("--docs", required=True)
    t.add_argument("--dev-docs")
    t.add_argument("--labels", required=True, help="code list, one per line")
    t.add_argument("--embeddings", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="write the per-epoch training log as JSON")
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_caml_train, stage="caml-train")
    t = csub.add_parser("predict", parents=[common])
    t.add_argument("--model", required=True)
    t.add_argument("--docs", required=True)
    t.add_argument("--split", help="only documents whose split field matches")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_caml_predict, stage="caml-predict")

    s = sub.add_parser("tabular", parents=[common], help="boosted trees on events or token bags")
    tsub = s.add_subparsers(dest="action", required=True)
    t = tsub.add_parser("train", parents=[common])
    t.add_argument("--kind", choices=("structured", "prescriptions", "labexams"), required=True)
    t.add_argument("--input", required=True, help="event CSV or token-bag CSV")
    t.add_argument("--labels", required=True, help="admission_id,code1|code2 CSV of training ids")
    t.add_argument("--codes", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--preset", choices=sorted(tabular.PRESETS))
    t.add_argument("--n-estimators", type=int)
    t.add_argument("--top-items", type=int, default=tabular.TOP_ITEMS)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_tabular_train, stage="tabular-train")
    t = tsub.add_parser("predict", parents=[common])
    t.add_argument("--model", required=True)
    t.add_argument("--input", required=True)
    t.add_argument("--ids", help="label CSV or JSONL whose ids are scored")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_tabular_predict, stage="tabular-predict")

    s = sub.add_parser("ensemble", parents=[common], help="stacked logistic regression, k-fold CV")
    s.add_argument("--preds", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--folds", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--k", type=int, default=8)
    s.add_argument("--features", choices=("same_label", "all_labels"))
    s.add_argument("--report")
    s.add_argument("--oof", help="write out-of-fold stacked predictions")
    s.set_defaults(func=cmd_ensemble, stage="ensemble")

    s = sub.add_parser("evaluate", parents=[common], help="F1 / AUC / P@k report")
    s.add_argument("--pred", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--k", type=int, default=8)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate, stage="evaluate")

    s = sub.add_parser("corpus", parents=[common], help="synthetic data, SGNS, ICD mapping")
    csub = s.add_subparsers(dest="action", required=True)
    t = csub.add_parser("synth", parents=[common])
    t.add_argument("--spec")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_corpus_synth, stage="corpus-synth")
    t = csub.add_parser("sgns", parents=[common])
    t.add_argument("--in", dest="inp", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--dim", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_corpus_sgns, stage="corpus-sgns")
    t = csub.add_parser("map", parents=[common])
    t.add_argument("codes", nargs="+")
    t.set_defaults(func=cmd_corpus_map, stage="corpus-map")

    for name, func, stage in (("run", cmd_run, "run"),
                              ("run-multimodal", cmd_run_multimodal, "run-multimodal")):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--variant", choices=sorted(pipeline.VARIANTS))
        s.add_argument("--output-dir")
        s.add_argument("--set", action="append", metavar="KEY=VALUE")
        if name == "run-multimodal":
            s.add_argument("--no-text", action="store_true", help="stack the tabular models only")
        s.set_defaults(func=func, stage=stage)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except pipeline.StageError as exc:
        print(f"error [{exc.stage}]: {type(exc.cause).__name__}: {exc.cause}", file=sys.stderr)
        return 2
    except CliError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"error [{args.stage}]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
