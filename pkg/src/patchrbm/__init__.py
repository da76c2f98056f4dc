"""Unsupervised RBM descriptors for local image patches.

Learns Gaussian RBMs (optionally with a lifetime-sparsity penalty) and
mean-covariance RBMs on 64x64 grayscale patches, turns them into real-valued
or compact binary descriptors, and scores them on the match/non-match
correspondence benchmark via the 95% error rate.
"""

from patchrbm.dataset import (
    LabeledPair,
    Patch,
    PatchSet,
    load_match_pairs,
    load_patch_archive,
    resample_patch,
    synthesize_corpus,
)
from patchrbm.preprocess import Whitener, apply_whitener, fit_whitener, normalize_patch

__all__ = [
    "LabeledPair",
    "Patch",
    "PatchSet",
    "Whitener",
    "apply_whitener",
    "fit_whitener",
    "load_match_pairs",
    "load_patch_archive",
    "normalize_patch",
    "resample_patch",
    "synthesize_corpus",
]

__version__ = "0.1.0"
