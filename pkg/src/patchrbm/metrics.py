"""Distances between descriptors: L1, L2, Bernoulli JSD, Hamming."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from patchrbm.descriptor import BinaryDescriptor

EPS_PROB = 1e-9
KINDS = ("L1", "L2", "JSD", "Hamming")


@dataclass(frozen=True)
class DistanceKind:
    """Distance selection plus the descriptor normalization it pairs with."""

    kind: str
    normalization: str = "none"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distance kind {self.kind!r}")
        if self.normalization not in ("none", "l1", "l2"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.kind in ("JSD", "Hamming") and self.normalization != "none":
            raise ValueError(f"{self.kind} pairs only with raw descriptors")


def _check_lengths(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    return x, y


def l1_distance(x, y) -> float:
    x, y = _check_lengths(x, y)
    return float(np.abs(x - y).sum())


def l2_distance(x, y) -> float:
    x, y = _check_lengths(x, y)
    return float(np.linalg.norm(x - y))


def jsd_bernoulli(p, q) -> float:
    """Sum over units of the Jensen-Shannon divergence between Bernoullis.

    Natural log; each unit contributes a value in [0, ln 2]. Inputs are
    clamped away from {0, 1}.
    """
    p, q = _check_lengths(p, q)
    p = np.clip(p, EPS_PROB, 1.0 - EPS_PROB)
    q = np.clip(q, EPS_PROB, 1.0 - EPS_PROB)
    m = 0.5 * (p + q)

    def kl(u, w):
        return u * np.log(u / w) + (1.0 - u) * np.log((1.0 - u) / (1.0 - w))

    return float(np.sum(0.5 * kl(p, m) + 0.5 * kl(q, m)))


def hamming(x: BinaryDescriptor, y: BinaryDescriptor) -> int:
    if x.width != y.width:
        raise ValueError(f"width mismatch: {x.width} vs {y.width}")
    return int(np.count_nonzero(x.bits ^ y.bits))
