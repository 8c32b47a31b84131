"""Base models for structured and bag-of-terms inputs.

Featurisers turn admissions into a :class:`FeatureTable`: per-item
aggregates of numeric measurements, or TF-IDF weights of term bags.  A
second-order gradient-boosted tree ensemble on the logistic loss is then
fitted one-vs-rest per label with exact greedy split search.
"""

from __future__ import annotations

import io
import json
import math
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import LabelSpace, PredictionMatrix

TOP_ITEMS = 100
STATS = ("mean", "std", "min", "max", "count", "present")


@dataclass
class FeatureTable:
    ids: list
    columns: list
    values: np.ndarray

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.values = np.asarray(self.values, dtype=np.float64).reshape(len(self.ids),
                                                                        len(self.columns))
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature table contains non-finite values")

    def reindex(self, ids) -> "FeatureTable":
        pos = {d: i for i, d in enumerate(self.ids)}
        return FeatureTable(list(ids), self.columns, self.values[[pos[d] for d in ids]])


# TF-IDF ----------------------------------------------------------------------

@dataclass
class TfidfVocabulary:
    terms: list
    df: np.ndarray
    n_docs: int
    idf: np.ndarray = field(init=False)
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.df = np.asarray(self.df, dtype=np.float64)
        self.idf = np.log((1.0 + self.n_docs) / (1.0 + self.df)) + 1.0
        self.index = {t: i for i, t in enumerate(self.terms)}


def fit_tfidf(bags) -> TfidfVocabulary:
    bags = list(bags)
    if not bags:
        raise ValueError("cannot fit TF-IDF on an empty corpus")
    df = Counter()
    for bag in bags:
        df.update(set(bag))
    terms = sorted(df)
    return TfidfVocabulary(terms, np.array([df[t] for t in terms], dtype=np.float64), len(bags))


def transform_tfidf(vocab: TfidfVocabulary, bag) -> dict:
    """Sparse ``{term index: weight}``; raw counts times idf, L2-normalised."""
    counts = Counter(t for t in bag if t in vocab.index)
    weights = {vocab.index[t]: c * vocab.idf[vocab.index[t]] for t, c in counts.items()}
    norm = math.sqrt(sum(w * w for w in weights.values()))
    if norm == 0:
        return {}
    return {i: w / norm for i, w in sorted(weights.items())}


def tfidf_table(vocab: TfidfVocabulary, bags: dict, ids=None) -> FeatureTable:
    ids = list(bags) if ids is None else list(ids)
    x = np.zeros((len(ids), len(vocab.terms)))
    for r, key in enumerate(ids):
        for i, w in transform_tfidf(vocab, bags.get(key, [])).items():
            x[r, i] = w
    return FeatureTable(ids, [f"tfidf:{t}" for t in vocab.terms], x)


# structured aggregation ------------------------------------------------------

def top_items(events, train_ids=None, limit: int = TOP_ITEMS) -> list:
    """Most frequent item ids (by event count), ties by item id."""
    keep = None if train_ids is None else set(train_ids)
    counts = Counter(item for adm, item, _ in events if keep is None or adm in keep)
    return [item for item, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))][:limit]


def aggregate_structured(events, ids=None, items=None, train_ids=None,
                         limit: int = TOP_ITEMS) -> FeatureTable:
    """Per admission and item: mean, population std, min, max, count, presence.

    Missing items get count 0, presence 0 and zeroed statistics.
    """
    events = list(events)
    if items is None:
        items = top_items(events, train_ids, limit)
    if ids is None:
        ids = sorted({adm for adm, _, _ in events})
    ids = [str(i) for i in ids]
    row = {a: i for i, a in enumerate(ids)}
    col = {it: j for j, it in enumerate(items)}
    groups: dict = {}
    for adm, item, value in events:
        if adm in row and item in col:
            groups.setdefault((row[adm], col[item]), []).append(float(value))
    x = np.zeros((len(ids), len(items) * len(STATS)))
    for (r, j), vals in groups.items():
        v = np.array(vals)
        x[r, j * len(STATS):(j + 1) * len(STATS)] = (v.mean(), v.std(), v.min(), v.max(),
                                                     len(v), 1.0)
    columns = [f"{it}:{s}" for it in items for s in STATS]
    return FeatureTable(ids, columns, x)


# boosted trees -----------------------------------------------------------------

@dataclass
class BoostingParams:
    n_estimators: int = 2000
    max_depth: int = 5
    learning_rate: float = 0.15
    gamma: float = 0.86
    subsample: float = 0.66
    colsample_bytree: float = 0.85
    min_child_weight: float = 5.0
    reg_lambda: float = 1.0

    def __post_init__(self):
        if self.n_estimators < 0 or self.max_depth < 0:
            raise ValueError("n_estimators and max_depth must be non-negative")
        if not (0 < self.subsample <= 1 and 0 < self.colsample_bytree <= 1):
            raise ValueError("subsample and colsample_bytree must be in (0, 1]")
        if self.learning_rate <= 0 or self.gamma < 0 or self.min_child_weight < 0:
            raise ValueError("learning_rate > 0, gamma >= 0, min_child_weight >= 0 required")


# tuned values for the 32-code (ICD-10) and 50-code (ICD-9) settings
PRESETS = {
    "icd10_32": BoostingParams(2000, 5, 0.15, 0.86, 0.66, 0.85, 5.0),
    "icd9_50": BoostingParams(2000, 7, 0.19, 0.78, 0.67, 0.98, 4.0),
}


@dataclass
class Tree:
    """Flat arrays; leaves have feature -1 and carry ``value``."""
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray
    depth: int = 0

    def predict(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(len(x), dtype=np.int64)
        active = self.feature[node] >= 0
        while np.any(active):
            idx = np.flatnonzero(active)
            f = self.feature[node[idx]]
            go_left = x[idx, f] < self.threshold[node[idx]]
            node[idx] = np.where(go_left, self.left[node[idx]], self.right[node[idx]])
            active = self.feature[node] >= 0
        return self.value[node]


@dataclass
class LabelForest:
    base_logit: float
    trees: list


@dataclass
class BoostedForest:
    columns: list
    codes: tuple
    params: BoostingParams
    forests: list
    featurizer: dict = field(default_factory=dict)
    history: list = field(default_factory=list)   # per label: training log-loss per round


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _best_split(x, g, h, cols, lam, mcw):
    """Exact greedy search; returns (gain, feature, threshold) or None.

    ``gain`` excludes the ``gamma`` penalty.
    """
    G, H = g.sum(), h.sum()
    parent = G * G / (H + lam)
    xs = x[:, cols]
    order = np.argsort(xs, axis=0, kind="stable")
    sx = np.take_along_axis(xs, order, axis=0)
    gl = np.cumsum(g[order], axis=0)[:-1]
    hl = np.cumsum(h[order], axis=0)[:-1]
    gr, hr = G - gl, H - hl
    gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent)
    valid = (sx[1:] > sx[:-1]) & (hl >= mcw) & (hr >= mcw)
    if not np.any(valid):
        return None
    gain = np.where(valid, gain, -np.inf)
    flat = int(np.argmax(gain.T.ravel()))        # first best in (feature, position) order
    j, pos = divmod(flat, gain.shape[0])
    thr = 0.5 * (sx[pos, j] + sx[pos + 1, j])
    if not thr > sx[pos, j]:                     # midpoint rounded onto the lower value
        thr = sx[pos + 1, j]
    return float(gain[pos, j]), int(cols[j]), float(thr)


def _grow_tree(x, g, h, rows, cols, p: BoostingParams) -> Tree:
    feature, threshold, left, right, value, gains = [], [], [], [], [], []
    lam = p.reg_lambda

    def new_node():
        for arr, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1),
                       (value, 0.0), (gains, 0.0)):
            arr.append(v)
        return len(feature) - 1

    root = new_node()
    stack = [(root, rows, 0)]
    max_depth = 0
    while stack:
        node, idx, depth = stack.pop()
        gs, hs = g[idx], h[idx]
        G, H = gs.sum(), hs.sum()
        value[node] = -p.learning_rate * G / (H + lam)
        max_depth = max(max_depth, depth)
        if depth >= p.max_depth or len(idx) < 2 or H < p.min_child_weight:
            continue
        found = _best_split(x[idx], gs, hs, cols, lam, p.min_child_weight)
        if found is None:
            continue
        gain, f, thr = found
        if gain - p.gamma <= 0:
            continue
        mask = x[idx, f] < thr
        l, r = new_node(), new_node()
        feature[node], threshold[node], left[node], right[node] = f, thr, l, r
        gains[node] = gain - p.gamma
        stack.append((r, idx[~mask], depth + 1))
        stack.append((l, idx[mask], depth + 1))
    return Tree(np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, np.int64),
                np.array(right, np.int64), np.array(value), np.array(gains), max_depth)


def _logloss(y, z):
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def fit_label(x, y, p: BoostingParams, rng, history=None) -> LabelForest:
    n, m = x.shape
    rate = float(np.mean(y)) if n else 0.5
    if rate <= 0.0 or rate >= 1.0:
        eps = 1e-6
        return LabelForest(math.log(max(rate, eps) / max(1 - rate, eps)), [])
    base = math.log(rate / (1 - rate))
    z = np.full(n, base)
    trees = []
    if history is not None:
        history.append(_logloss(y, z))
    n_cols = max(1, int(round(p.colsample_bytree * m)))
    n_rows = max(1, int(round(p.subsample * n)))
    for _ in range(p.n_estimators):
        prob = _sigmoid(z)
        g = prob - y
        h = prob * (1.0 - prob)
        rows = np.arange(n) if n_rows == n else np.sort(rng.choice(n, n_rows, replace=False))
        cols = np.arange(m) if n_cols == m else np.sort(rng.choice(m, n_cols, replace=False))
        tree = _grow_tree(x, g, h, rows, cols, p)
        trees.append(tree)
        z = z + tree.predict(x)
        if history is not None:
            history.append(_logloss(y, z))
    return LabelForest(base, trees)


def train_boosted(features: FeatureTable, labels, hyper: BoostingParams = BoostingParams(),
                  seed: int = 0, codes=None) -> BoostedForest:
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if len(y) != len(features.ids):
        raise ValueError(f"{len(y)} label rows for {len(features.ids)} feature rows")
    codes = tuple(codes) if codes is not None else tuple(str(i) for i in range(y.shape[1]))
    forests, history = [], []
    for l in range(y.shape[1]):
        rng = np.random.default_rng([seed, l])
        hist: list = []
        forests.append(fit_label(features.values, y[:, l], hyper, rng, hist))
        history.append(hist)
    return BoostedForest(list(features.columns), codes, hyper, forests, history=history)


def raw_scores(model: BoostedForest, x: np.ndarray) -> np.ndarray:
    out = np.empty((len(x), len(model.forests)))
    for l, forest in enumerate(model.forests):
        z = np.full(len(x), forest.base_logit)
        for tree in forest.trees:
            z += tree.predict(x)
        out[:, l] = z
    return out


def predict_boosted(model: BoostedForest, features: FeatureTable) -> PredictionMatrix:
    if list(features.columns) != list(model.columns):
        raise ValueError("feature columns do not match the training schema")
    return PredictionMatrix(features.ids, model.codes, _sigmoid(raw_scores(model, features.values)))


# featurisers stored alongside the forest ----------------------------------------

def featurize(model_or_spec, source) -> FeatureTable:
    """Apply a stored featuriser spec to events (``structured``) or bags (``tfidf``)."""
    spec = model_or_spec.featurizer if isinstance(model_or_spec, BoostedForest) else model_or_spec
    kind = spec.get("kind")
    if kind == "structured":
        ids = spec.get("ids") or sorted({a for a, _, _ in source})
        return aggregate_structured(source, ids=ids, items=spec["items"])
    if kind == "tfidf":
        vocab = TfidfVocabulary(spec["terms"], np.array(spec["df"]), spec["n_docs"])
        return tfidf_table(vocab, source)
    raise ValueError(f"unknown featurizer kind {kind!r}")


def structured_featurizer(events, train_ids=None, limit: int = TOP_ITEMS) -> dict:
    return {"kind": "structured", "items": top_items(events, train_ids, limit)}


def tfidf_featurizer(bags) -> dict:
    v = fit_tfidf(bags)
    return {"kind": "tfidf", "terms": list(v.terms), "df": v.df.tolist(), "n_docs": v.n_docs}


# model file ----------------------------------------------------------------------
#   8s  magic b"ICDGBT\0\0"
#   <I  version (1)
#   <I  metadata length, then UTF-8 JSON: columns, codes, params, featurizer
#   per label: <d base logit, <I tree count; per tree: <I node count then
#     node arrays feature (<i8), threshold (<f8), left (<i8), right (<i8), value (<f8), gain (<f8)
MAGIC = b"ICDGBT\0\0"
VERSION = 1


def save_boosted(model: BoostedForest, path) -> None:
    meta = json.dumps({"columns": model.columns, "codes": list(model.codes),
                       "params": asdict(model.params), "featurizer": model.featurizer},
                      sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(meta)))
    buf.write(meta)
    for forest in model.forests:
        buf.write(struct.pack("<dI", forest.base_logit, len(forest.trees)))
        for t in forest.trees:
            buf.write(struct.pack("<I", len(t.feature)))
            for arr, dt in ((t.feature, "<i8"), (t.threshold, "<f8"), (t.left, "<i8"),
                            (t.right, "<i8"), (t.value, "<f8"), (t.gain, "<f8")):
                buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_boosted(path) -> BoostedForest:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a boosted-forest model")
    version, mlen = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    pos = 16
    meta = json.loads(raw[pos:pos + mlen].decode("utf-8"))
    pos += mlen
    forests = []
    for _ in meta["codes"]:
        base, n_trees = struct.unpack_from("<dI", raw, pos)
        pos += 12
        trees = []
        for _ in range(n_trees):
            (n,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            arrs = []
            for dt in ("<i8", "<f8", "<i8", "<i8", "<f8", "<f8"):
                arrs.append(np.frombuffer(raw, dtype=dt, count=n, offset=pos).copy())
                pos += 8 * n
            arrs[0] = arrs[0].astype(np.int64)
            trees.append(Tree(*arrs))
        forests.append(LabelForest(base, trees))
    return BoostedForest(meta["columns"], tuple(meta["codes"]), BoostingParams(**meta["params"]),
                         forests, meta["featurizer"])
