"""Convolutional encoder with per-label attention for multi-label coding.

Forward pass for a document of N tokens with embeddings X (N x d_e)::

    H   = tanh(conv(X; W_c) + b_c)          N x d_c, "same" zero padding
    A   = softmax_rows(U H^T)               L x N
    V   = A H                               L x d_c
    y^  = sigmoid(rowsum(alpha * V) + b)    L

Gradients are written out by hand in :func:`_backward`; the finite
difference test in ``tests/test_caml.py`` is the reference for them.
"""

from __future__ import annotations

import copy
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import LabeledDocumentSet, LabelSpace, PredictionMatrix
from .embed_core import EmbeddingSet, Vocabulary
from .metrics import f1_scores

log = logging.getLogger(__name__)

PARAM_NAMES = ("embeddings", "conv_w", "conv_b", "attention", "output_w", "output_b")
CLAMP = 1e-12


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 16
    dropout: float = 0.5
    filter_width: int = 4
    filter_maps: int = 50
    max_epochs: int = 100
    patience: int = 3
    seed: int = 0
    optimizer: str = "adam"          # or "sgd"
    freeze_embeddings: bool = False
    max_length: int = 2500
    threshold: float = 0.5

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        for name in ("learning_rate", "batch_size", "filter_width", "filter_maps",
                     "max_epochs", "patience", "max_length"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class CamlModel:
    vocab: Vocabulary
    labels: LabelSpace
    params: dict
    dropout: float = 0.5
    freeze_embeddings: bool = False
    max_length: int = 2500

    @property
    def filter_width(self) -> int:
        return self.params["conv_w"].shape[0]

    @property
    def oov_index(self) -> int:
        return len(self.vocab)

    def token_ids(self, tokens) -> np.ndarray:
        oov = self.oov_index
        ids = [self.vocab.index.get(t, oov) for t in tokens[:self.max_length]]
        return np.array(ids or [oov], dtype=np.int64)


def _xavier(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_model(embeddings: EmbeddingSet, labels: LabelSpace, filter_width: int = 4,
               filter_maps: int = 50, seed: int = 0, dropout: float = 0.5,
               freeze_embeddings: bool = False, max_length: int = 2500) -> CamlModel:
    """Model whose embedding table is the given set plus one zero OOV row."""
    rng = np.random.default_rng(seed)
    d_e, n_labels = embeddings.dim, len(labels)
    table = np.vstack([embeddings.matrix, np.zeros((1, d_e))])
    params = {
        "embeddings": table,
        "conv_w": _xavier(rng, (filter_width, d_e, filter_maps),
                          filter_width * d_e, filter_maps),
        "conv_b": np.zeros(filter_maps),
        "attention": _xavier(rng, (n_labels, filter_maps), filter_maps, n_labels),
        "output_w": _xavier(rng, (n_labels, filter_maps), filter_maps, n_labels),
        "output_b": np.zeros(n_labels),
    }
    return CamlModel(embeddings.vocab, labels, params, dropout, freeze_embeddings, max_length)


def _pad(k: int) -> tuple[int, int]:
    left = (k - 1) // 2
    return left, k - 1 - left


def _windows(params, ids):
    e = params["embeddings"]
    k = params["conv_w"].shape[0]
    left, right = _pad(k)
    x = np.zeros((len(ids) + k - 1, e.shape[1]))
    x[left:left + len(ids)] = e[ids]
    return sliding_window_view(x, k, axis=0).transpose(0, 2, 1).reshape(len(ids), -1)


def _encode(params, ids):
    k, d_e, d_c = params["conv_w"].shape
    win = _windows(params, ids)
    return np.tanh(win @ params["conv_w"].reshape(k * d_e, d_c) + params["conv_b"]), win


def _softmax_rows(s):
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def _attend(params, h):
    a = _softmax_rows(params["attention"] @ h.T)
    return a, a @ h


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                    np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def encode(model: CamlModel, tokens) -> np.ndarray:
    return _encode(model.params, model.token_ids(tokens))[0]


def attend(model: CamlModel, h: np.ndarray):
    return _attend(model.params, np.asarray(h, dtype=np.float64))


def predict(model: CamlModel, tokens) -> np.ndarray:
    p = model.params
    h, _ = _encode(p, model.token_ids(tokens))
    _, v = _attend(p, h)
    return _sigmoid((p["output_w"] * v).sum(axis=1) + p["output_b"])


def loss(predictions, targets) -> float:
    p = np.clip(np.asarray(predictions, dtype=np.float64), CLAMP, 1.0 - CLAMP)
    y = np.asarray(targets, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum())


def _logit_loss(z, y):
    """Binary cross-entropy from logits, numerically stable."""
    return float((np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).sum())


def _forward(params, ids, y, drop_mask=None):
    h, win = _encode(params, ids)
    hd = h if drop_mask is None else h * drop_mask
    a, v = _attend(params, hd)
    z = (params["output_w"] * v).sum(axis=1) + params["output_b"]
    cache = dict(ids=ids, win=win, h=h, hd=hd, a=a, v=v, z=z, mask=drop_mask)
    return _logit_loss(z, y), cache


def _backward(params, cache, y, with_embeddings=True):
    k, d_e, d_c = params["conv_w"].shape
    h, hd, a, v, z = cache["h"], cache["hd"], cache["a"], cache["v"], cache["z"]
    dz = _sigmoid(z) - y                                  # (L,)
    g = {"output_b": dz, "output_w": dz[:, None] * v}
    dv = dz[:, None] * params["output_w"]                 # (L, d_c)
    da = dv @ hd.T                                        # (L, N)
    dhd = a.T @ dv                                        # (N, d_c)
    ds = a * (da - (da * a).sum(axis=1, keepdims=True))   # softmax backward
    g["attention"] = ds @ hd
    dhd += ds.T @ params["attention"]
    dh = dhd if cache["mask"] is None else dhd * cache["mask"]
    dpre = dh * (1.0 - h * h)
    g["conv_b"] = dpre.sum(axis=0)
    g["conv_w"] = (cache["win"].T @ dpre).reshape(k, d_e, d_c)
    if with_embeddings:
        ids = cache["ids"]
        n = len(ids)
        left, _ = _pad(k)
        dwin = (dpre @ params["conv_w"].reshape(k * d_e, d_c).T).reshape(n, k, d_e)
        dx = np.zeros((n + k - 1, d_e))
        for j in range(k):
            dx[j:j + n] += dwin[:, j]
        demb = np.zeros_like(params["embeddings"])
        np.add.at(demb, ids, dx[left:left + n])
        g["embeddings"] = demb
    return g


def loss_and_grad(model: CamlModel, docs_ids, targets, drop_masks=None,
                  with_embeddings=True):
    """Summed loss and gradients over a batch of (token-id array, target) pairs."""
    total = 0.0
    grads = {name: np.zeros_like(model.params[name]) for name in PARAM_NAMES}
    for i, (ids, y) in enumerate(zip(docs_ids, targets)):
        mask = None if drop_masks is None else drop_masks[i]
        value, cache = _forward(model.params, ids, np.asarray(y, dtype=np.float64), mask)
        total += value
        for name, gval in _backward(model.params, cache, np.asarray(y, dtype=np.float64),
                                    with_embeddings).items():
            grads[name] += gval
    return total, grads


class Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, names):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in names:
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * grads[k]
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * grads[k] ** 2
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class Sgd:
    def __init__(self, params: dict, lr: float):
        self.lr = lr

    def step(self, params: dict, grads: dict, names):
        for k in names:
            params[k] -= self.lr * grads[k]


class EarlyStopper:
    """Tracks the best score; ``update`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, epoch: int, score: float) -> bool:
        if score > self.best:
            self.best, self.best_epoch, self.bad_epochs = score, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_dev_micro_f1: float = float("nan")
    stopped_epoch: int = -1


def predict_matrix(model: CamlModel, docs: LabeledDocumentSet) -> np.ndarray:
    if not docs.documents:
        return np.zeros((0, len(model.labels)))
    return np.stack([predict(model, d.tokens) for d in docs.documents])


def predict_documents(model: CamlModel, docs: LabeledDocumentSet) -> PredictionMatrix:
    return PredictionMatrix(docs.ids, model.labels.codes, predict_matrix(model, docs))


def train(model: CamlModel, train_docs: LabeledDocumentSet, dev_docs: LabeledDocumentSet,
          cfg: TrainConfig):
    """Minibatch training with dev micro-F1 early stopping.

    Returns a new model holding the best-dev parameters and a :class:`TrainLog`.
    """
    if not train_docs.documents or not dev_docs.documents:
        raise ValueError("train and dev splits must both be non-empty")
    model = copy.deepcopy(model)
    model.dropout = cfg.dropout
    model.freeze_embeddings = cfg.freeze_embeddings
    model.max_length = cfg.max_length
    rng = np.random.default_rng(cfg.seed)
    names = [n for n in PARAM_NAMES if not (n == "embeddings" and cfg.freeze_embeddings)]
    opt = Adam(model.params, cfg.learning_rate) if cfg.optimizer == "adam" else \
        Sgd(model.params, cfg.learning_rate)
    ids = [model.token_ids(d.tokens) for d in train_docs.documents]
    ys = [d.labels.astype(np.float64) for d in train_docs.documents]
    dev_truth = dev_docs.label_matrix()
    d_c = model.params["conv_w"].shape[2]
    keep = 1.0 - cfg.dropout

    stopper = EarlyStopper(cfg.patience)
    best_params = copy.deepcopy(model.params)
    tlog = TrainLog()
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(ids))
        epoch_loss = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            masks = None
            if cfg.dropout > 0:
                masks = [(rng.random((len(ids[i]), d_c)) < keep) / keep for i in batch]
            value, grads = loss_and_grad(model, [ids[i] for i in batch], [ys[i] for i in batch],
                                         masks, with_embeddings=not cfg.freeze_embeddings)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"loss became {value} at epoch {epoch}, batch starting {lo}")
            epoch_loss += value
            opt.step(model.params, grads, names)
        dev_f1, _ = f1_scores(predict_matrix(model, dev_docs), dev_truth, cfg.threshold)
        tlog.epochs.append({"epoch": epoch, "train_loss": epoch_loss / len(ids),
                            "dev_micro_f1": dev_f1})
        log.info("epoch %d loss %.5f dev micro-F1 %.4f", epoch, epoch_loss / len(ids), dev_f1)
        stop = stopper.update(epoch, dev_f1)
        if stopper.best_epoch == epoch:
            best_params = copy.deepcopy(model.params)
        tlog.stopped_epoch = epoch
        if stop:
            break
    model.params = best_params
    tlog.best_epoch = stopper.best_epoch
    tlog.best_dev_micro_f1 = stopper.best
    return model, tlog


# checkpoint format ---------------------------------------------------------
#   8s   magic b"ICDCAML\0"
#   <I   version (1)
#   <6I  n_vocab (without OOV row), d_e, filter_width, d_c, n_labels, flags (bit 0: frozen)
#   <d   dropout
#   <I   max_length
#   n_vocab tokens then n_labels codes, each <I byte length + UTF-8 bytes
#   float64 little-endian, row-major: embeddings (n_vocab+1, d_e), conv_w (k, d_e, d_c),
#   conv_b (d_c), attention (L, d_c), output_w (L, d_c), output_b (L)
MAGIC = b"ICDCAML\0"
VERSION = 1


def _write_str(fh, s: str):
    b = s.encode("utf-8")
    fh.write(struct.pack("<I", len(b)))
    fh.write(b)


def _read_str(fh) -> str:
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


def save_model(model: CamlModel, path) -> None:
    p = model.params
    k, d_e, d_c = p["conv_w"].shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<6I", len(model.vocab), d_e, k, d_c, len(model.labels),
                             int(model.freeze_embeddings)))
        fh.write(struct.pack("<d", model.dropout))
        fh.write(struct.pack("<I", model.max_length))
        for t in model.vocab.tokens:
            _write_str(fh, t)
        for c in model.labels.codes:
            _write_str(fh, c)
        for name in PARAM_NAMES:
            fh.write(np.ascontiguousarray(p[name], dtype="<f8").tobytes())


def load_model(path) -> CamlModel:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a CAML checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        n_vocab, d_e, k, d_c, n_labels, flags = struct.unpack("<6I", fh.read(24))
        (dropout,) = struct.unpack("<d", fh.read(8))
        (max_length,) = struct.unpack("<I", fh.read(4))
        tokens = tuple(_read_str(fh) for _ in range(n_vocab))
        codes = tuple(_read_str(fh) for _ in range(n_labels))
        shapes = {"embeddings": (n_vocab + 1, d_e), "conv_w": (k, d_e, d_c), "conv_b": (d_c,),
                  "attention": (n_labels, d_c), "output_w": (n_labels, d_c),
                  "output_b": (n_labels,)}
        params = {}
        for name in PARAM_NAMES:
            count = int(np.prod(shapes[name]))
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"{path}: truncated while reading {name}")
            params[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shapes[name])
    return CamlModel(Vocabulary(tokens), LabelSpace(codes), params, dropout, bool(flags & 1),
                     max_length)
