"""Meta-embeddings from two sources: averaging and the locally linear method.

The locally linear route has two steps.  First every shared word is
reconstructed from its nearest neighbours in both sources, with one weight
per neighbour shared across the sources in which that neighbour appears.
Then the normalised weights define a sparse matrix ``W'`` and the output
coordinates are the bottom eigenvectors of ``(I - W')^T (I - W')``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .balltree import BallTree
from .embed_core import EmbeddingSet, Vocabulary, common_vocabulary
from .postprocess import _fix_signs

log = logging.getLogger(__name__)

DENSE_EIGEN_LIMIT = 2000


class EigenConvergenceError(RuntimeError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


@dataclass
class MetaConfig:
    method: str = "locally_linear"   # or "averaging"
    k_neighbors: int = 1200
    out_dim: int = 200
    sgd_learning_rate: float = 0.01
    sgd_max_iters: int = 100
    seed: int = 0
    solver: str = "sgd"              # "sgd" or "exact" (per-word least squares)
    tol: float = 1e-6                # relative-improvement early stop
    eigen_solver: str = "auto"       # "auto", "dense" or "lanczos"

    def __post_init__(self):
        if self.method not in ("averaging", "locally_linear"):
            raise ValueError(f"unknown meta-embedding method {self.method!r}")
        if self.solver not in ("sgd", "exact"):
            raise ValueError(f"unknown solver {self.solver!r}")
        for name in ("k_neighbors", "out_dim", "sgd_max_iters"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.sgd_learning_rate <= 0:
            raise ValueError("sgd_learning_rate must be positive")


@dataclass(frozen=True)
class NeighborGraph:
    vocab: Vocabulary
    indices: np.ndarray    # (2, n, k) indices into vocab
    distances: np.ndarray  # (2, n, k)

    @property
    def k(self) -> int:
        return self.indices.shape[2]

    def neighbors(self, source: int, word: int) -> np.ndarray:
        return self.indices[source, word]


@dataclass
class ReconstructionWeights:
    """Per target word: the union of its neighbour sets and one weight each.

    Rows are padded to the largest union size; ``mask`` marks real entries.
    ``counts`` holds the number of sources in which the neighbour occurs.
    """
    vocab: Vocabulary
    neighbors: np.ndarray    # (n, K) int, -1 padded
    mask: np.ndarray         # (n, K) bool
    membership: np.ndarray   # (2, n, K) bool
    raw: np.ndarray          # (n, K) learned weights
    normalized: np.ndarray   # (n, K) rows sum to 1
    history: list = field(default_factory=list)

    @property
    def counts(self) -> np.ndarray:
        return self.membership.sum(axis=0)

    def dense(self, which: str = "normalized") -> np.ndarray:
        n = len(self.vocab)
        w = np.zeros((n, n))
        vals = getattr(self, which)
        rows, cols = np.nonzero(self.mask)
        w[rows, self.neighbors[rows, cols]] = vals[rows, cols]
        return w

    def projection_matrix(self) -> scipy.sparse.csr_matrix:
        """Row-stochastic ``W'``: normalised weights times source counts, renormalised."""
        n = len(self.vocab)
        scaled = self.normalized * self.counts
        sums = scaled.sum(axis=1)
        bad = np.abs(sums) < 1e-12
        if np.any(bad):
            log.warning("%d words have degenerate weight sums; using count-proportional weights",
                        int(bad.sum()))
            c = self.counts.astype(np.float64)
            scaled[bad] = c[bad]
            sums[bad] = c[bad].sum(axis=1)
        vals = scaled / sums[:, None]
        rows, cols = np.nonzero(self.mask)
        return scipy.sparse.csr_matrix((vals[rows, cols], (rows, self.neighbors[rows, cols])),
                                       shape=(n, n))


def average_meta(a: EmbeddingSet, b: EmbeddingSet) -> EmbeddingSet:
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    vocab = common_vocabulary(a, b)
    if len(vocab) == 0:
        raise ValueError("sources share no vocabulary")
    m = (a.restrict(vocab).matrix + b.restrict(vocab).matrix) / 2.0
    return EmbeddingSet(vocab, m, "avg")


def _shared(a: EmbeddingSet, b: EmbeddingSet):
    vocab = common_vocabulary(a, b)
    return vocab, a.restrict(vocab).matrix, b.restrict(vocab).matrix


def build_neighbor_graph(a: EmbeddingSet, b: EmbeddingSet, k: int) -> NeighborGraph:
    vocab, xa, xb = _shared(a, b)
    n = len(vocab)
    if k < 1 or k >= n:
        raise ValueError(f"k={k} must be in [1, {n - 1}] for {n} shared words")
    idx = np.empty((2, n, k), dtype=np.int64)
    dist = np.empty((2, n, k))
    for s, x in enumerate((xa, xb)):
        tree = BallTree(x)
        for v in range(n):
            idx[s, v], dist[s, v] = tree.query(x[v], k, exclude=v)
    return NeighborGraph(vocab, idx, dist)


def _union_neighbors(graph: NeighborGraph):
    n = len(graph.vocab)
    unions = [np.union1d(graph.indices[0, v], graph.indices[1, v]) for v in range(n)]
    width = max(len(u) for u in unions)
    nbr = np.full((n, width), -1, dtype=np.int64)
    mask = np.zeros((n, width), dtype=bool)
    member = np.zeros((2, n, width), dtype=bool)
    for v, u in enumerate(unions):
        nbr[v, :len(u)] = u
        mask[v, :len(u)] = True
        for s in range(2):
            member[s, v, :len(u)] = np.isin(u, graph.indices[s, v])
    return nbr, mask, member


def _gram_blocks(words, nbr, member, sources):
    """Quadratic form pieces of each word's reconstruction error.

    For target v the error is ``c - 2 w.b + w^T G w`` with
    ``G = sum_s U_s^T U_s`` over the neighbours present in source s.
    """
    safe = np.where(nbr[words] >= 0, nbr[words], 0)
    G = 0.0
    b = 0.0
    c = 0.0
    for s, x in enumerate(sources):
        u = x[safe] * member[s, words][..., None]      # (m, K, d)
        t = x[words]                                   # (m, d)
        G = G + np.einsum("mkd,mjd->mkj", u, u)
        b = b + np.einsum("mkd,md->mk", u, t)
        c = c + np.einsum("md,md->m", t, t)
    return G, b, c


def _quad(G, b, c, w):
    return c - 2.0 * np.einsum("mk,mk->m", w, b) + np.einsum("mk,mkj,mj->m", w, G, w)


def reconstruction_objective(weights: ReconstructionWeights, a: EmbeddingSet, b: EmbeddingSet,
                             which: str = "raw") -> float:
    """Sum over sources and words of the squared reconstruction residual."""
    vocab, xa, xb = _shared(a, b)
    w = getattr(weights, which)
    total = 0.0
    safe = np.where(weights.mask, weights.neighbors, 0)
    for s, x in enumerate((xa, xb)):
        coef = w * weights.membership[s]
        recon = np.einsum("nk,nkd->nd", coef, x[safe])
        total += float(((x - recon) ** 2).sum())
    return total


def _chunk_size(width: int, dim: int, budget: int = 32_000_000) -> int:
    per_word = 8 * width * (width + 2 * dim + 4)
    return max(1, budget // max(per_word, 1))


def learn_reconstruction_weights(graph: NeighborGraph, a: EmbeddingSet, b: EmbeddingSet,
                                 cfg: MetaConfig) -> ReconstructionWeights:
    """Fit the neighbour weights by per-word block gradient descent.

    The objective separates over target words, so each word's weight block
    is optimised independently; a block step that would increase that
    word's error is rejected and its step size halved.  ``history`` holds
    the full objective before the first and after every iteration.
    """
    vocab, xa, xb = _shared(a, b)
    if vocab.tokens != graph.vocab.tokens:
        raise ValueError("graph was not built from these sources")
    nbr, mask, member = _union_neighbors(graph)
    n, width = nbr.shape
    rng = np.random.default_rng(cfg.seed)
    raw = np.zeros((n, width))
    raw[mask] = rng.random(int(mask.sum()))

    iters = cfg.sgd_max_iters
    history = np.zeros(iters + 1)
    chunk = _chunk_size(width, max(a.dim, b.dim))
    for lo in range(0, n, chunk):
        words = np.arange(lo, min(n, lo + chunk))
        G, bb, c = _gram_blocks(words, nbr, member, (xa, xb))
        w = raw[words]
        if cfg.solver == "exact":
            history[0] += _quad(G, bb, c, w).sum()
            for j in range(len(words)):
                m = mask[words[j]]
                sol, *_ = np.linalg.lstsq(G[j][np.ix_(m, m)], bb[j][m], rcond=None)
                w[j, m] = sol
            history[1:] += _quad(G, bb, c, w).sum()
            raw[words] = w
            continue
        step = np.full(len(words), cfg.sgd_learning_rate)
        cur = _quad(G, bb, c, w)
        history[0] += cur.sum()
        last = 0
        for it in range(1, iters + 1):
            grad = 2.0 * (np.einsum("mkj,mj->mk", G, w) - bb)
            cand = w - step[:, None] * grad
            new = _quad(G, bb, c, cand)
            ok = new <= cur
            w[ok] = cand[ok]
            before = cur.sum()
            cur = np.where(ok, new, cur)
            step[~ok] *= 0.5
            history[it] += cur.sum()
            last = it
            after = cur.sum()
            if np.all(ok) and (before - after) <= cfg.tol * max(abs(before), 1e-300):
                break
        history[last + 1:] += cur.sum()
        raw[words] = w
    raw[~mask] = 0.0

    sums = raw.sum(axis=1)
    normalized = np.zeros_like(raw)
    good = np.abs(sums) >= 1e-12
    normalized[good] = raw[good] / sums[good, None]
    uniform = mask / mask.sum(axis=1, keepdims=True)
    normalized[~good] = uniform[~good]
    return ReconstructionWeights(vocab, nbr, mask, member, raw, normalized,
                                 history=history.tolist())


def projection_matrix_m(weights: ReconstructionWeights):
    wp = weights.projection_matrix()
    eye = scipy.sparse.identity(wp.shape[0], format="csr")
    d = eye - wp
    return (d.T @ d).tocsr()


def meta_eigenpairs(weights: ReconstructionWeights, count: int, solver: str = "auto"):
    """The ``count`` smallest eigenpairs of M, ascending."""
    m = projection_matrix_m(weights)
    n = m.shape[0]
    if count > n:
        raise ValueError(f"cannot take {count} eigenvectors of a {n}x{n} matrix")
    if solver == "auto":
        solver = "dense" if n < DENSE_EIGEN_LIMIT else "lanczos"
    if solver == "dense":
        vals, vecs = scipy.linalg.eigh(m.toarray(), subset_by_index=[0, count - 1])
    elif solver == "lanczos":
        if count >= n - 1:
            raise ValueError("Lanczos path needs count < n - 1")
        try:
            vals, vecs = scipy.sparse.linalg.eigsh(m, k=count, sigma=-1e-3, which="LM",
                                                   tol=1e-9, maxiter=10 * n,
                                                   v0=np.ones(n) / np.sqrt(n))
        except scipy.sparse.linalg.ArpackNoConvergence as exc:
            res = [float(np.linalg.norm(m @ v - lam * v))
                   for lam, v in zip(exc.eigenvalues, exc.eigenvectors.T)]
            raise EigenConvergenceError(f"eigensolver did not converge: residuals {res}",
                                        res) from exc
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
    else:
        raise ValueError(f"unknown eigen solver {solver!r}")
    return vals, vecs


def project_meta(weights: ReconstructionWeights, cfg: MetaConfig) -> EmbeddingSet:
    """Bottom eigenvectors of M (the constant one dropped) as coordinates.

    Eigenvectors are unit-norm and sign-fixed; no rescaling is applied.
    """
    n = len(weights.vocab)
    if cfg.out_dim + 1 > n:
        raise ValueError(f"out_dim + 1 = {cfg.out_dim + 1} exceeds {n} shared words")
    _, vecs = meta_eigenpairs(weights, cfg.out_dim + 1, cfg.eigen_solver)
    coords = _fix_signs(vecs[:, 1:].T).T
    return EmbeddingSet(weights.vocab, coords, "lle")


def locally_linear_meta(a: EmbeddingSet, b: EmbeddingSet, cfg: MetaConfig) -> EmbeddingSet:
    graph = build_neighbor_graph(a, b, cfg.k_neighbors)
    weights = learn_reconstruction_weights(graph, a, b, cfg)
    log.info("reconstruction objective %.6g -> %.6g", weights.history[0], weights.history[-1])
    return project_meta(weights, cfg)


def combine(a: EmbeddingSet, b: EmbeddingSet, cfg: MetaConfig) -> EmbeddingSet:
    if cfg.method == "averaging":
        return average_meta(a, b)
    return locally_linear_meta(a, b, cfg)
