"""Matching benchmark: pair distances, ROC points and the 95% error rate.

The 95% error rate is the percentage of non-matching pairs whose distance
falls at or below the threshold that admits 95% of the true matches. The
threshold is the nearest-rank 95th percentile of the match distances
(ceil(0.95 n)-th smallest); ties on the non-match side count as errors,
which matters in the integer-valued Hamming regime.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from patchrbm.dataset import LabeledPair
from patchrbm.descriptor import BinaryDescriptor, Descriptor, normalize
from patchrbm.metrics import (DistanceKind, hamming, jsd_bernoulli,
                              l1_distance, l2_distance)


@dataclass(frozen=True)
class EvalReport:
    scene: str
    n_pairs: int
    distance_kind: DistanceKind
    threshold_95: float
    error_rate_95: float  # percent
    roc: tuple[tuple[float, float], ...]  # (fpr, tpr) points
    config_fingerprint: str


def error_rate_at_95(match_d, nonmatch_d) -> tuple[float, float]:
    """Threshold admitting 95% of matches, and the non-match error percent."""
    match_d = np.asarray(match_d, dtype=np.float64)
    nonmatch_d = np.asarray(nonmatch_d, dtype=np.float64)
    if match_d.size == 0 or nonmatch_d.size == 0:
        raise ValueError("both distance lists must be non-empty")
    k = math.ceil(0.95 * match_d.size)
    threshold = float(np.sort(match_d)[k - 1])
    rate = 100.0 * float(np.count_nonzero(nonmatch_d <= threshold)) / nonmatch_d.size
    return threshold, rate


def roc_curve(match_d, nonmatch_d) -> list[tuple[float, float]]:
    """One (fpr, tpr) point per distinct threshold, endpoints included."""
    match_d = np.asarray(match_d, dtype=np.float64)
    nonmatch_d = np.asarray(nonmatch_d, dtype=np.float64)
    if match_d.size == 0 or nonmatch_d.size == 0:
        raise ValueError("both distance lists must be non-empty")
    thresholds = np.unique(np.concatenate([match_d, nonmatch_d]))
    points = [(0.0, 0.0)]
    for t in thresholds:
        tpr = float(np.count_nonzero(match_d <= t)) / match_d.size
        fpr = float(np.count_nonzero(nonmatch_d <= t)) / nonmatch_d.size
        points.append((fpr, tpr))
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))
    return points


def _distance_fn(kind: DistanceKind):
    return {
        "L1": lambda a, b: l1_distance(a.values, b.values),
        "L2": lambda a, b: l2_distance(a.values, b.values),
        "JSD": lambda a, b: jsd_bernoulli(a.values, b.values),
        "Hamming": lambda a, b: float(hamming(a, b)),
    }[kind.kind]


def _fingerprint(descriptors: dict, kind: DistanceKind) -> str:
    h = hashlib.sha256()
    h.update(f"{kind.kind}|{kind.normalization}".encode())
    for pid in sorted(descriptors):
        d = descriptors[pid]
        h.update(str(pid).encode())
        if isinstance(d, BinaryDescriptor):
            h.update(d.bits.tobytes())
        else:
            h.update(np.ascontiguousarray(d.values).tobytes())
    return h.hexdigest()[:16]


def evaluate(descriptors: dict, pairs: list[LabeledPair], kind: DistanceKind,
             scene: str = "SYNTH") -> EvalReport:
    """Score labeled pairs under a distance, producing an EvalReport."""
    if not pairs:
        raise ValueError("no pairs to evaluate")
    sample = next(iter(descriptors.values()))
    is_binary = isinstance(sample, BinaryDescriptor)
    if is_binary != (kind.kind == "Hamming"):
        raise ValueError(f"{kind.kind} distance is incompatible with "
                         f"{'binary' if is_binary else 'real'} descriptors")
    if kind.normalization != "none" and not is_binary:
        descriptors = {pid: normalize(d, kind.normalization)
                       for pid, d in descriptors.items()}
    dist = _distance_fn(kind)
    match_d, nonmatch_d = [], []
    for pr in pairs:
        for pid in (pr.a, pr.b):
            if pid not in descriptors:
                raise KeyError(f"no descriptor for patch {pid}")
        d = dist(descriptors[pr.a], descriptors[pr.b])
        (match_d if pr.is_match else nonmatch_d).append(d)
    threshold, rate = error_rate_at_95(match_d, nonmatch_d)
    roc = tuple(roc_curve(match_d, nonmatch_d))
    return EvalReport(
        scene=scene,
        n_pairs=len(pairs),
        distance_kind=kind,
        threshold_95=threshold,
        error_rate_95=rate,
        roc=roc,
        config_fingerprint=_fingerprint(descriptors, kind),
    )


def report_to_text(r: EvalReport) -> str:
    """Key-value header plus the ROC point list."""
    lines = [
        f"scene: {r.scene}",
        f"n_pairs: {r.n_pairs}",
        f"distance: {r.distance_kind.kind}",
        f"normalization: {r.distance_kind.normalization}",
        f"threshold_95: {r.threshold_95:.17g}",
        f"error_rate_95: {r.error_rate_95:.17g}",
        f"fingerprint: {r.config_fingerprint}",
        "roc:",
    ]
    lines += [f"  {fpr:.17g} {tpr:.17g}" for fpr, tpr in r.roc]
    return "\n".join(lines) + "\n"


def grid_row(method: str, train_set: str, test_set: str, r: EvalReport) -> str:
    """Flat table row for assembling result grids."""
    return f"{method}\t{train_set}\t{test_set}\t{r.error_rate_95:.2f}"
