"""Per-patch normalization and PCA whitening.

GRBM-style models consume patches normalized to zero mean / unit std
per sample; the mean-covariance model consumes per-sample mean-subtracted
data projected onto a whitened principal subspace retaining a requested
fraction of variance (99% by default).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS_STD = 1e-8
EPS_EIG = 1e-10


def normalize_patch(v: np.ndarray) -> np.ndarray:
    """Subtract the sample mean and divide by the (population) std.

    Flat patches (std below EPS_STD) map to the zero vector.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size < 2:
        raise ValueError("need at least 2 elements to normalize")
    s = v.std()
    if s < EPS_STD:
        return np.zeros_like(v)
    return (v - v.mean()) / s


def normalize_batch(X: np.ndarray) -> np.ndarray:
    """Row-wise normalize_patch."""
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=1, keepdims=True)
    std = X.std(axis=1, keepdims=True)
    out = np.where(std < EPS_STD, 0.0, (X - mean) / np.maximum(std, EPS_STD))
    return out


@dataclass(frozen=True)
class Whitener:
    """Fitted PCA whitening transform with per-sample mean removal.

    `basis` maps a centered d-vector to k whitened coordinates;
    `inv_basis` maps back. `eigenvalues` are the retained covariance
    eigenvalues, descending.
    """

    basis: np.ndarray       # (d, k): columns = eigvecs * eig^-1/2
    inv_basis: np.ndarray   # (k, d): rows = eigvecs^T * eig^1/2
    eigenvalues: np.ndarray  # (k,), descending, positive
    variance_retained: float
    dropped: int = 0        # components discarded for eigenvalues < EPS_EIG

    @property
    def d_in(self) -> int:
        return self.basis.shape[0]

    @property
    def d_keep(self) -> int:
        return self.basis.shape[1]


def fit_whitener(samples: np.ndarray, retain: float = 0.99,
                 n_components: int | None = None) -> Whitener:
    """Fit PCA whitening on per-sample mean-subtracted data.

    Keeps the smallest number of leading components whose eigenvalue mass
    reaches `retain` (or exactly `n_components` when given); components
    with eigenvalues below EPS_EIG are dropped and counted.
    """
    if not 0.0 < retain <= 1.0:
        raise ValueError(f"retain must be in (0, 1], got {retain}")
    X = np.asarray(samples, dtype=np.float64)
    X = X - X.mean(axis=1, keepdims=True)
    cov = X.T @ X / X.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]

    total = eigvals.sum()
    mass = np.cumsum(eigvals) / total
    if n_components is not None:
        k = int(n_components)
    else:
        k = int(np.searchsorted(mass, retain) + 1)
    k = min(k, len(eigvals))

    keep = eigvals[:k]
    valid = keep > EPS_EIG
    dropped = int(k - valid.sum())
    keep = keep[valid]
    vecs = eigvecs[:, :k][:, valid]

    basis = vecs * keep ** -0.5
    inv_basis = (vecs * keep ** 0.5).T
    return Whitener(
        basis=basis,
        inv_basis=inv_basis,
        eigenvalues=keep,
        variance_retained=float(keep.sum() / total),
        dropped=dropped,
    )


def apply_whitener(w: Whitener, v: np.ndarray) -> np.ndarray:
    """Whiten one sample: subtract its own mean, project, scale."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (w.d_in,):
        raise ValueError(f"expected {w.d_in} elements, got shape {v.shape}")
    return (v - v.mean()) @ w.basis


def apply_whitener_batch(w: Whitener, X: np.ndarray) -> np.ndarray:
    """Whiten rows of a matrix."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != w.d_in:
        raise ValueError(f"expected {w.d_in} columns, got {X.shape[1]}")
    return (X - X.mean(axis=1, keepdims=True)) @ w.basis
