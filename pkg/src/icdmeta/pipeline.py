"""End-to-end runs: embedding variants and the stacked multimodal model.

Every stage writes named artifacts under the output directory and records
a cache entry keyed by the stage parameters and the content hashes of its
inputs.  Re-running with unchanged inputs skips the stage.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__, caml, ensemble, tabular
from .config import apply_config, read_flat_config, to_flat
from .corpus import SgnsConfig, preprocess, read_bags, read_corpus, read_events, train_sgns
from .data import LabelSpace, documents_from_records, read_codes, read_jsonl, \
    read_predictions, write_predictions
from .embed_core import load_embeddings, save_embeddings
from .meta import MetaConfig, combine
from .metrics import evaluate
from .postprocess import apply_steps

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "ICDMETA_OUTPUT_ROOT"

# variant -> (post-processing steps applied to each source, meta method or None)
VARIANTS = {
    "baseline": ((), None),
    "meandiff": (("meandiff",), None),
    "meandiff_pcadiff": (("meandiff", "pcadiff"), None),
    "avg": ((), "averaging"),
    "lle": ((), "locally_linear"),
    "meandiff_avg": (("meandiff",), "averaging"),
    "meandiff_pcadiff_avg": (("meandiff", "pcadiff"), "averaging"),
    "meandiff_lle": (("meandiff",), "locally_linear"),
    "meandiff_pcadiff_lle": (("meandiff", "pcadiff"), "locally_linear"),
}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    variant: str = "baseline"
    output_dir: str = "runs"
    data_dir: str = ""               # directory laid out like `corpus synth` output
    train_docs: str = ""
    dev_docs: str = ""
    test_docs: str = ""
    codes: str = ""
    source_a_corpus: str = ""
    source_b_corpus: str = ""
    source_a_vectors: str = ""       # pretrained vectors skip the SGNS stage
    source_b_vectors: str = ""
    events: str = ""
    prescriptions: str = ""
    labexams: str = ""
    pca_components: int = 2
    eval_k: int = 8
    text_model: bool = True          # include the CNN in the multimodal stack
    tab_preset: str = "icd10_32"
    tab_seed: int = 0
    tab_top_items: int = 100
    ens_folds: int = 5
    ens_seed: int = 0
    ens_features: str = "same_label"
    sgns: SgnsConfig = field(default_factory=SgnsConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    caml: caml.TrainConfig = field(default_factory=caml.TrainConfig)
    boost: tabular.BoostingParams | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if self.boost is None:
            self.boost = dataclasses.replace(tabular.PRESETS[self.tab_preset])
        if self.data_dir:
            defaults = {"train_docs": "train.jsonl", "dev_docs": "dev.jsonl",
                        "test_docs": "test.jsonl", "codes": "codes.txt",
                        "source_a_corpus": "source_a.txt", "source_b_corpus": "source_b.txt",
                        "events": "events.csv", "prescriptions": "prescriptions.csv",
                        "labexams": "labexams.csv"}
            for key, name in defaults.items():
                if not getattr(self, key):
                    setattr(self, key, os.path.join(self.data_dir, name))

    def flat(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
               if f.name not in ("sgns", "meta", "caml", "boost")}
        out.update(to_flat(self.sgns, "sgns_"))
        out.update(to_flat(self.meta, "meta_"))
        out.update(to_flat(self.caml, "caml_"))
        out.update(to_flat(self.boost, "tab_"))
        return out


_NESTED = {"sgns_": ("sgns", SgnsConfig), "meta_": ("meta", MetaConfig),
           "caml_": ("caml", caml.TrainConfig), "tab_": ("boost", tabular.BoostingParams)}


def config_from_dict(values: dict) -> PipelineConfig:
    top = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    scalar = {}
    nested = {k: {} for k in _NESTED}
    for key, value in values.items():
        for prefix in _NESTED:
            name = key[len(prefix):]
            cls = _NESTED[prefix][1]
            if key.startswith(prefix) and name in {f.name for f in dataclasses.fields(cls)}:
                nested[prefix][key] = value
                break
        else:
            if key not in top or key in ("sgns", "meta", "caml", "boost"):
                raise KeyError(f"unknown config key {key!r}")
            scalar[key] = value
    base = PipelineConfig()
    cfg = apply_config(base, scalar)
    if "tab_preset" in scalar:
        cfg.boost = dataclasses.replace(tabular.PRESETS[cfg.tab_preset])
    for prefix, (attr, _) in _NESTED.items():
        setattr(cfg, attr, apply_config(getattr(cfg, attr), nested[prefix], prefix=prefix))
    env_root = os.environ.get(OUTPUT_ROOT_ENV)
    if env_root:
        cfg.output_dir = os.path.join(env_root, cfg.output_dir) \
            if not os.path.isabs(cfg.output_dir) else cfg.output_dir
    return PipelineConfig(**{f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)})


def load_pipeline_config(path, overrides: dict | None = None) -> PipelineConfig:
    values = read_flat_config(path) if path else {}
    values.update(overrides or {})
    return config_from_dict(values)


# stage runner --------------------------------------------------------------

def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class StageRunner:
    def __init__(self, root: str, manifest: dict):
        self.root = root
        self.manifest = manifest
        os.makedirs(os.path.join(root, ".stages"), exist_ok=True)

    def rel(self, path) -> str:
        return os.path.relpath(path, self.root)

    def run(self, name: str, inputs: list, params: dict, outputs: list, fn):
        key_src = json.dumps({"stage": name, "params": params, "version": __version__,
                              "inputs": [file_hash(p) for p in inputs]},
                             sort_keys=True, default=str)
        key = hashlib.sha256(key_src.encode("utf-8")).hexdigest()
        record_path = os.path.join(self.root, ".stages", name.replace("/", "__") + ".json")
        entry = {"name": name, "key": key}
        t0 = time.perf_counter()
        cached = False
        if os.path.exists(record_path):
            with open(record_path) as fh:
                rec = json.load(fh)
            cached = rec.get("key") == key and all(
                os.path.exists(p) and file_hash(p) == rec["outputs"].get(self.rel(p))
                for p in outputs)
        if not cached:
            for p in outputs:
                os.makedirs(os.path.dirname(p), exist_ok=True)
            try:
                fn()
            except Exception as exc:
                entry.update(status="failed", error=f"{type(exc).__name__}: {exc}",
                             seconds=time.perf_counter() - t0)
                self.manifest["stages"].append(entry)
                raise StageError(name, exc) from exc
            with open(record_path, "w") as fh:
                json.dump({"key": key, "outputs": {self.rel(p): file_hash(p) for p in outputs}},
                          fh, sort_keys=True)
        hashes = {self.rel(p): file_hash(p) for p in outputs}
        entry.update(status="cached" if cached else "run", seconds=time.perf_counter() - t0,
                     outputs=hashes)
        self.manifest["stages"].append(entry)
        self.manifest["artifacts"].update(hashes)
        return cached


def _new_manifest(cfg: PipelineConfig, kind: str) -> dict:
    return {"kind": kind, "config": cfg.flat(), "stages": [], "artifacts": {}, "metrics": {}}


def _write_json(obj, path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def _write_manifest(manifest, path):
    manifest["artifact_digest"] = hashlib.sha256(
        json.dumps(manifest["artifacts"], sort_keys=True).encode()).hexdigest()
    _write_json(manifest, path)


def _check_inputs(manifest, paths):
    missing = [p for p in paths if p and not os.path.exists(p)]
    if missing:
        exc = FileNotFoundError(f"missing input(s): {', '.join(missing)}")
        manifest["stages"].append({"name": "inputs", "status": "failed", "error": str(exc)})
        raise StageError("inputs", exc)


def _load_split(path, labels: LabelSpace):
    return documents_from_records(read_jsonl(path), labels, preprocess)


def _sgns_stage(runner, cfg, which):
    corpus = getattr(cfg, f"source_{which}_corpus")
    pretrained = getattr(cfg, f"source_{which}_vectors")
    if pretrained:
        return pretrained
    out = os.path.join(cfg.output_dir, "embeddings", f"source_{which}.vec")

    def fn():
        save_embeddings(train_sgns(read_corpus(corpus), cfg.sgns, source_id=f"source_{which}"),
                        out)
    runner.run(f"sgns-{which}", [corpus], dataclasses.asdict(cfg.sgns), [out], fn)
    return out


def _pp_stage(runner, cfg, which, path, steps):
    if not steps:
        return path
    tag = "_".join(steps)
    out = os.path.join(cfg.output_dir, "embeddings", f"source_{which}.{tag}.vec")

    def fn():
        save_embeddings(apply_steps(load_embeddings(path), steps, cfg.pca_components), out)
    runner.run(f"postprocess-{which}-{tag}", [path],
               {"steps": list(steps), "components": cfg.pca_components}, [out], fn)
    return out


def run_variant(cfg: PipelineConfig) -> dict:
    """Embeddings for the variant, then CAML train/predict and evaluation."""
    steps, method = VARIANTS[cfg.variant]
    vdir = os.path.join(cfg.output_dir, cfg.variant)
    manifest = _new_manifest(cfg, "variant")
    runner = StageRunner(cfg.output_dir, manifest)
    manifest_path = os.path.join(vdir, "manifest.json")
    try:
        _check_inputs(manifest, [cfg.codes, cfg.train_docs, cfg.dev_docs, cfg.test_docs,
                                 cfg.source_a_vectors or cfg.source_a_corpus]
                      + ([cfg.source_b_vectors or cfg.source_b_corpus] if method else []))
        labels = read_codes(cfg.codes)
        vec_a = _pp_stage(runner, cfg, "a", _sgns_stage(runner, cfg, "a"), steps)
        final = vec_a
        if method is not None:
            vec_b = _pp_stage(runner, cfg, "b", _sgns_stage(runner, cfg, "b"), steps)
            tag = "_".join(steps + ("avg" if method == "averaging" else "lle",))
            final = os.path.join(cfg.output_dir, "embeddings", f"meta.{tag}.vec")
            meta_cfg = dataclasses.replace(cfg.meta, method=method)

            def meta_fn():
                save_embeddings(combine(load_embeddings(vec_a), load_embeddings(vec_b), meta_cfg),
                                final)
            params = {"method": method} if method == "averaging" else dataclasses.asdict(meta_cfg)
            runner.run(f"meta-{tag}", [vec_a, vec_b], params, [final], meta_fn)

        model_path = os.path.join(vdir, "caml.bin")
        log_path = os.path.join(vdir, "train_log.json")

        def train_fn():
            train_docs = _load_split(cfg.train_docs, labels)
            dev_docs = _load_split(cfg.dev_docs, labels)
            model = caml.init_model(load_embeddings(final), labels, cfg.caml.filter_width,
                                    cfg.caml.filter_maps, cfg.caml.seed, cfg.caml.dropout,
                                    cfg.caml.freeze_embeddings, cfg.caml.max_length)
            model, tlog = caml.train(model, train_docs, dev_docs, cfg.caml)
            caml.save_model(model, model_path)
            _write_json(dataclasses.asdict(tlog), log_path)
        runner.run(f"{cfg.variant}/caml-train",
                   [final, cfg.train_docs, cfg.dev_docs, cfg.codes],
                   dataclasses.asdict(cfg.caml), [model_path, log_path], train_fn)

        pred_path = os.path.join(vdir, "pred_test.csv")

        def predict_fn():
            model = caml.load_model(model_path)
            write_predictions(caml.predict_documents(model, _load_split(cfg.test_docs, labels)),
                              pred_path)
        runner.run(f"{cfg.variant}/caml-predict", [model_path, cfg.test_docs], {}, [pred_path],
                   predict_fn)

        report_path = os.path.join(vdir, "report.json")

        def eval_fn():
            _write_json(_evaluate_predictions(pred_path, cfg.test_docs, labels, cfg.eval_k),
                        report_path)
        runner.run(f"{cfg.variant}/evaluate", [pred_path, cfg.test_docs],
                   {"k": cfg.eval_k}, [report_path], eval_fn)
        with open(report_path) as fh:
            manifest["metrics"]["test"] = json.load(fh)
        manifest["predictions"] = os.path.relpath(pred_path, cfg.output_dir)
    except StageError as exc:
        manifest["error"] = str(exc)
        _write_manifest(manifest, manifest_path)
        raise
    _write_manifest(manifest, manifest_path)
    return manifest


def _evaluate_predictions(pred_path, docs_path, labels: LabelSpace, k: int) -> dict:
    pred = read_predictions(pred_path)
    truth = {str(r["id"]): labels.encode(r.get("labels", [])) for r in read_jsonl(docs_path)}
    y = np.stack([truth[i] for i in pred.ids])
    return evaluate(pred.probs, y, k).to_dict()


TABULAR_MODELS = ("structured", "prescriptions", "labexams")


def _tabular_stage(runner, cfg, kind, labels, train_ids, test_ids, train_y, out_dir):
    src = {"structured": cfg.events, "prescriptions": cfg.prescriptions,
           "labexams": cfg.labexams}[kind]
    model_path = os.path.join(out_dir, f"{kind}.gbt")
    pred_path = os.path.join(out_dir, f"pred_{kind}.csv")

    def fn():
        if kind == "structured":
            events = read_events(src)
            spec = tabular.structured_featurizer(events, train_ids, cfg.tab_top_items)
            x_train = tabular.aggregate_structured(events, ids=train_ids, items=spec["items"])
            x_test = tabular.aggregate_structured(events, ids=test_ids, items=spec["items"])
        else:
            bags = read_bags(src)
            spec = tabular.tfidf_featurizer([bags.get(i, []) for i in train_ids])
            x_train = tabular.featurize(spec, {i: bags.get(i, []) for i in train_ids})
            x_test = tabular.featurize(spec, {i: bags.get(i, []) for i in test_ids})
        model = tabular.train_boosted(x_train, train_y, cfg.boost, cfg.tab_seed, labels.codes)
        model.featurizer = spec
        tabular.save_boosted(model, model_path)
        write_predictions(tabular.predict_boosted(model, x_test), pred_path)
    params = {"kind": kind, "boost": dataclasses.asdict(cfg.boost), "seed": cfg.tab_seed,
              "top_items": cfg.tab_top_items}
    runner.run(f"tabular-{kind}", [src, cfg.train_docs, cfg.test_docs, cfg.codes], params,
               [model_path, pred_path], fn)
    return pred_path


def run_multimodal(cfg: PipelineConfig) -> dict:
    """Three tabular base models (+ the CNN) stacked by 5-fold logistic regression."""
    name = f"multimodal-{cfg.variant}" if cfg.text_model else "multimodal-structured"
    mdir = os.path.join(cfg.output_dir, name)
    manifest = _new_manifest(cfg, "multimodal")
    manifest_path = os.path.join(mdir, "manifest.json")
    runner = StageRunner(cfg.output_dir, manifest)
    try:
        _check_inputs(manifest, [cfg.codes, cfg.train_docs, cfg.test_docs, cfg.events,
                                 cfg.prescriptions, cfg.labexams])
        labels = read_codes(cfg.codes)
        train_recs, test_recs = read_jsonl(cfg.train_docs), read_jsonl(cfg.test_docs)
        train_ids = [str(r["id"]) for r in train_recs]
        test_ids = [str(r["id"]) for r in test_recs]
        train_y = np.stack([labels.encode(r.get("labels", [])) for r in train_recs])
        test_truth = {str(r["id"]): labels.encode(r.get("labels", [])) for r in test_recs}

        preds, sources = [], []
        if cfg.text_model:
            text = run_variant(cfg)
            manifest["stages"].extend(text["stages"])
            manifest["artifacts"].update(text["artifacts"])
            preds.append(os.path.join(cfg.output_dir, text["predictions"]))
            sources.append(f"caml-{cfg.variant}")
        for kind in TABULAR_MODELS:
            preds.append(_tabular_stage(runner, cfg, kind, labels, train_ids, test_ids, train_y,
                                        mdir))
            sources.append(f"xgb-{kind}")

        report_path = os.path.join(mdir, "ensemble_report.json")
        oof_path = os.path.join(mdir, "pred_ensemble_oof.csv")

        def ens_fn():
            report = run_ensemble([read_predictions(p) for p in preds], test_truth,
                                  cfg.ens_folds, cfg.ens_seed, cfg.eval_k, cfg.ens_features,
                                  sources)
            write_predictions(report.pop("out_of_fold"), oof_path)
            _write_json(report, report_path)
        runner.run(f"{name}/ensemble", preds + [cfg.test_docs],
                   {"folds": cfg.ens_folds, "seed": cfg.ens_seed, "k": cfg.eval_k,
                    "features": cfg.ens_features, "sources": sources},
                   [report_path, oof_path], ens_fn)
        with open(report_path) as fh:
            report = json.load(fh)
        manifest["metrics"] = {"folds": report["folds"],
                               "aggregate": {"mean": report["mean"], "std": report["std"],
                                             "formatted": report["formatted"]},
                               "base_models": report["base_models"],
                               "feature_width": report["feature_width"]}
    except StageError as exc:
        manifest["error"] = str(exc)
        _write_manifest(manifest, manifest_path)
        raise
    _write_manifest(manifest, manifest_path)
    return manifest


def run_ensemble(predictions, truth: dict, n_folds=5, seed=0, k=8, features="same_label",
                 sources=None) -> dict:
    data = ensemble.stack(predictions, truth, n_folds, seed, features, sources)
    report = ensemble.evaluate_cv(data, k=min(k, len(data.codes)))
    report["feature_width"] = int(data.features.shape[2])
    return report
