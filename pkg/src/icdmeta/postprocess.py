"""Mean removal and top principal-component removal for word vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embed_core import EmbeddingSet

DEFAULT_COMPONENTS = 2
CENTERED_TOL = 1e-6


@dataclass(frozen=True)
class PcaBasis:
    components: np.ndarray          # (l, d), orthonormal rows
    explained_variance: np.ndarray  # (l,), non-increasing

    @property
    def n_components(self) -> int:
        return self.components.shape[0]


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude coordinate is positive."""
    vectors = np.array(vectors, dtype=np.float64, copy=True)
    if vectors.size == 0:
        return vectors
    pivots = np.argmax(np.abs(vectors), axis=1)
    signs = np.sign(vectors[np.arange(len(vectors)), pivots])
    signs[signs == 0] = 1.0
    return vectors * signs[:, None]


def mean_diff(emb: EmbeddingSet) -> EmbeddingSet:
    if len(emb) == 0:
        raise ValueError("mean_diff needs at least one vector")
    x = emb.matrix
    return emb.with_matrix(x - x.mean(axis=0))


def _check_components(emb: EmbeddingSet, num_components: int) -> None:
    if num_components < 0 or num_components > min(len(emb), emb.dim):
        raise ValueError(
            f"num_components={num_components} out of range for a {len(emb)}x{emb.dim} set")
    if len(emb) and np.max(np.abs(emb.matrix.mean(axis=0))) >= CENTERED_TOL:
        raise ValueError("input is not mean-centered; apply mean_diff first")


def fit_pca(emb: EmbeddingSet, num_components: int = DEFAULT_COMPONENTS) -> PcaBasis:
    _check_components(emb, num_components)
    if num_components == 0:
        return PcaBasis(np.zeros((0, emb.dim)), np.zeros(0))
    _, s, vt = np.linalg.svd(emb.matrix, full_matrices=False)
    comps = _fix_signs(vt[:num_components])
    var = s[:num_components] ** 2 / len(emb)
    return PcaBasis(comps, var)


def pca_diff(emb: EmbeddingSet, num_components: int = DEFAULT_COMPONENTS,
             basis: PcaBasis | None = None) -> EmbeddingSet:
    """Project the (centered) vectors off the top principal directions."""
    if basis is None:
        basis = fit_pca(emb, num_components)
    u = basis.components
    x = emb.matrix
    return emb.with_matrix(x - (x @ u.T) @ u)


def mean_pca_diff(emb: EmbeddingSet, num_components: int = DEFAULT_COMPONENTS) -> EmbeddingSet:
    if len(emb) <= num_components:
        raise ValueError(
            f"need more than {num_components} vectors to remove {num_components} components")
    return pca_diff(mean_diff(emb), num_components)


STEPS = {"meandiff", "pcadiff"}


def apply_steps(emb: EmbeddingSet, steps, num_components: int = DEFAULT_COMPONENTS) -> EmbeddingSet:
    """Run a sequence of named steps (``meandiff``, ``pcadiff``) in order."""
    for step in steps:
        if step == "meandiff":
            emb = mean_diff(emb)
        elif step == "pcadiff":
            if len(emb) <= num_components:
                raise ValueError(
                    f"need more than {num_components} vectors to remove {num_components} components")
            emb = pca_diff(emb, num_components)
        else:
            raise ValueError(f"unknown post-processing step {step!r}; choose from {sorted(STEPS)}")
    return emb
