"""Representation analyses.

Pairwise cosine-distance matrices over hidden states, classical
multidimensional scaling via a hand-rolled cyclic Jacobi eigensolver (exact
at the 7x7 sizes used here), scree-knee detection, community cluster
separation, and per-position accuracy tables.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .environment import HUB_COMMUNITY, N_TOKENS, community_of, token_symbol

log = logging.getLogger(__name__)

TOKEN_COMMUNITIES = tuple(community_of(t) for t in range(N_TOKENS))


def token_mean_hiddens(snapshot) -> np.ndarray:
    """Mean hidden state per input token, shape (7, hidden_dim).

    `snapshot` is any object with aligned `tokens` and `hiddens` attributes.
    Raises if some token never occurs.
    """
    tokens = np.asarray(snapshot.tokens)
    hiddens = np.asarray(snapshot.hiddens, dtype=np.float64)
    means = np.zeros((N_TOKENS, hiddens.shape[1]))
    for t in range(N_TOKENS):
        rows = hiddens[tokens == t]
        if len(rows) == 0:
            raise ValueError(f"no hidden states recorded for token {token_symbol(t)!r}")
        means[t] = rows.mean(axis=0)
    return means


def cosine_distance_matrix(vectors: np.ndarray) -> np.ndarray:
    """Symmetric cosine-distance matrix with an exactly zero diagonal."""
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    safe = np.where(norms < 1e-12, 1.0, norms)
    unit = v / safe[:, None]
    d = 1.0 - unit @ unit.T
    d[norms < 1e-12, :] = 1.0
    d[:, norms < 1e-12] = 1.0
    d = np.maximum(d, 0.0)
    d = (d + d.T) / 2.0
    np.fill_diagonal(d, 0.0)
    return d


def jacobi_eigh(
    a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100
) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Sweeps until the largest off-diagonal magnitude drops below `tol`.
    Returns (eigenvalues descending, eigenvectors as columns).
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("matrix must be square")
    if not np.allclose(a, a.T, atol=1e-10):
        raise ValueError("matrix must be symmetric")
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.abs(a - np.diag(np.diag(a))).max() if n > 1 else 0.0
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < tol * 1e-3:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = c
                rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    else:
        log.warning("jacobi_eigh: %d sweeps without reaching tol=%g", max_sweeps, tol)
    values = np.diag(a).copy()
    order = np.argsort(values)[::-1]
    return values[order], v[:, order]


@dataclass
class Embedding:
    """Classical-MDS result: coordinates plus the full eigenvalue spectrum."""

    points: np.ndarray          # (n, k_effective)
    eigenvalues: np.ndarray     # all n eigenvalues, descending
    requested_dim: int
    truncated: bool             # fewer positive eigenvalues than requested dims


def classical_mds(d: np.ndarray, k: int = 2) -> Embedding:
    """Embed a distance matrix by double-centering and eigendecomposition.

    Coordinates use only positive-eigenvalue dimensions; negative eigenvalues
    (non-Euclidean input) stay visible in the returned spectrum.
    """
    d = np.asarray(d, dtype=np.float64)
    n = d.shape[0]
    if d.shape != (n, n):
        raise ValueError("distance matrix must be square")
    if np.abs(d - d.T).max() > 1e-12:
        raise ValueError("distance matrix must be symmetric within 1e-12")
    if np.abs(np.diag(d)).max() > 0.0:
        raise ValueError("distance matrix must have an exactly zero diagonal")
    if k < 1:
        raise ValueError("target dimension must be >= 1")
    j = np.eye(n) - np.ones((n, n)) / n
    b = -0.5 * j @ (d * d) @ j
    b = (b + b.T) / 2.0
    values, vectors = jacobi_eigh(b)
    n_positive = int(np.sum(values > 0.0))
    k_eff = min(k, n_positive)
    truncated = k_eff < k
    if truncated:
        log.warning(
            "classical_mds: only %d positive eigenvalues; truncating %d -> %d dims",
            n_positive, k, k_eff,
        )
    points = vectors[:, :k_eff] * np.sqrt(values[:k_eff])
    return Embedding(
        points=points, eigenvalues=values, requested_dim=k, truncated=truncated
    )


def knee(eigenvalues: Sequence[float] | np.ndarray) -> int:
    """Scree knee: the 1-based index maximising the normalised successive gap
    (lambda_k - lambda_{k+1}) / (lambda_1 + 1e-12); ties go to the smallest k."""
    vals = np.asarray(eigenvalues, dtype=np.float64)
    if len(vals) < 2:
        raise ValueError("need at least 2 eigenvalues")
    if vals[0] < 0 or np.any(vals[:-1] < vals[1:] - 1e-12):
        raise ValueError("eigenvalues must be nonnegative-leading and descending")
    gaps = (vals[:-1] - vals[1:]) / (vals[0] + 1e-12)
    return int(np.argmax(gaps)) + 1


def _silhouette(dist: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette over the labelled points (two clusters expected)."""
    scores = []
    for i in range(len(labels)):
        same = (labels == labels[i]) & (np.arange(len(labels)) != i)
        other = labels != labels[i]
        if not same.any() or not other.any():
            scores.append(0.0)
            continue
        a = dist[i, same].mean()
        b = dist[i, other].mean()
        scores.append((b - a) / max(a, b) if max(a, b) > 0 else 0.0)
    return float(np.mean(scores))


def _separable_2d(points: np.ndarray, labels: np.ndarray) -> bool:
    """Exact weak linear separability via candidate lines through point pairs."""
    n = len(points)
    for i in range(n):
        for jdx in range(i + 1, n):
            d = points[jdx] - points[i]
            if np.hypot(d[0], d[1]) < 1e-15:
                continue
            normal = np.array([-d[1], d[0]])
            side = (points - points[i]) @ normal
            a = side[labels == 1]
            b = side[labels == 2]
            if a.min() >= b.max() - 1e-12 or b.min() >= a.max() - 1e-12:
                return True
    return False


@dataclass
class SeparationReport:
    silhouette: float
    separable: bool


def community_separation(
    points: np.ndarray,
    labels: Sequence[int] = TOKEN_COMMUNITIES,
    embedding: np.ndarray | None = None,
) -> SeparationReport:
    """Cluster quality of the two communities among 7 labelled points.

    Silhouette uses cosine distance over `points` (community points only);
    linear separability is checked exactly in the 2D `embedding` (defaults to
    `points`, which must then be two-dimensional).
    """
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    if len(points) != len(labels):
        raise ValueError("points and labels must align")
    comm = labels != HUB_COMMUNITY
    dist = cosine_distance_matrix(points[comm])
    silhouette = _silhouette(dist, labels[comm])
    plane = np.asarray(embedding if embedding is not None else points, dtype=np.float64)
    if plane.shape[1] != 2:
        raise ValueError("separability needs a 2D embedding")
    separable = _separable_2d(plane[comm], labels[comm])
    return SeparationReport(silhouette=silhouette, separable=separable)


def per_position_accuracy(
    predicted: Sequence[int] | np.ndarray,
    actual: Sequence[int] | np.ndarray,
    positions: Sequence[int] | np.ndarray,
) -> list[tuple[int, float, int]]:
    """Accuracy and count per cycle position; rows (position, accuracy, n).

    Positions refer to the token being predicted. Empty input yields an
    empty table.
    """
    predicted = np.asarray(predicted)
    actual = np.asarray(actual)
    positions = np.asarray(positions)
    if not (len(predicted) == len(actual) == len(positions)):
        raise ValueError("inputs must align")
    rows = []
    for pos in sorted(set(int(p) for p in positions)):
        at = positions == pos
        n = int(at.sum())
        acc = float(np.mean(predicted[at] == actual[at]))
        rows.append((pos, acc, n))
    return rows
