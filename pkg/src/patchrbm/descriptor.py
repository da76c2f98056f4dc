"""Patch descriptors from trained models.

Real-valued descriptors are the hidden activations of a model given a
preprocessed patch; compact binary descriptors threshold the covariance
activations at the median activation of the training set.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from patchrbm import grbm, mcrbm
from patchrbm.dataset import Patch, resample_patch
from patchrbm.grbm import MODEL_PATCH_SIDE, GrbmParams
from patchrbm.mcrbm import McrbmParams
from patchrbm.preprocess import Whitener, apply_whitener, normalize_patch

SOURCES = ("grbm", "spgrbm", "mcrbm-cov", "pixel", "external")
NORMALIZATIONS = ("none", "l1", "l2")


@dataclass(frozen=True)
class Descriptor:
    """Real-valued descriptor with provenance and normalization tags."""

    values: np.ndarray
    source: str
    normalization: str = "none"
    degenerate: bool = False

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(vals)):
            raise ValueError("descriptor values must be finite")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class BinaryDescriptor:
    """Fixed-width bitset descriptor; width = covariance-unit count."""

    bits: np.ndarray  # (width,) uint8 in {0, 1}
    threshold_used: float

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.uint8)
        if bits.ndim != 1 or not np.all((bits == 0) | (bits == 1)):
            raise ValueError("bits must be a flat 0/1 vector")
        object.__setattr__(self, "bits", bits)

    @property
    def width(self) -> int:
        return self.bits.size

    def to_hex(self) -> str:
        return np.packbits(self.bits).tobytes().hex()

    @classmethod
    def from_hex(cls, hexstr: str, width: int, threshold: float) -> "BinaryDescriptor":
        raw = np.frombuffer(bytes.fromhex(hexstr), dtype=np.uint8)
        bits = np.unpackbits(raw)[:width]
        return cls(bits=bits, threshold_used=threshold)


def grbm_descriptor(patch: Patch, p: GrbmParams, source: str = "grbm") -> Descriptor:
    """Hidden activations of a (sp)GRBM for one patch."""
    v = normalize_patch(resample_patch(patch, MODEL_PATCH_SIDE))
    return Descriptor(values=grbm.hidden_given_visible(v, p), source=source)


def mcrbm_descriptor(patch: Patch, p: McrbmParams, w: Whitener) -> Descriptor:
    """Covariance-unit activations of an mcRBM (mean units excluded)."""
    v = resample_patch(patch, MODEL_PATCH_SIDE)
    if v.size != w.d_in:
        raise ValueError(f"whitener expects {w.d_in} inputs, patch gives {v.size}")
    vw = apply_whitener(w, v)
    return Descriptor(values=mcrbm.cov_hidden_given_visible(vw, p), source="mcrbm-cov")


def pixel_descriptor(patch: Patch, side: int = MODEL_PATCH_SIDE) -> Descriptor:
    """Raw-pixel baseline: resampled, brightness/contrast normalized."""
    return Descriptor(values=normalize_patch(resample_patch(patch, side)),
                      source="pixel")


def scale_p(p: McrbmParams, factor: float) -> McrbmParams:
    """Copy with the pooling matrix divided by factor (JSD evaluation)."""
    if factor <= 0:
        raise ValueError("scale factor must be positive")
    out = p.copy()
    out.P = out.P / factor
    return out


def fit_binarization_threshold(activations) -> float:
    """Exact median over a stream of activation values/arrays."""
    chunks = []
    for item in activations:
        arr = np.atleast_1d(np.asarray(item, dtype=np.float64)).ravel()
        if arr.size:
            chunks.append(arr)
    if not chunks:
        raise ValueError("empty activation stream")
    return float(np.median(np.concatenate(chunks)))


def binarize(d: Descriptor, threshold: float) -> BinaryDescriptor:
    """Threshold raw activations: bit = 1 iff value strictly above threshold."""
    return BinaryDescriptor(bits=(d.values > threshold).astype(np.uint8),
                            threshold_used=float(threshold))


def normalize(d: Descriptor, scheme: str) -> Descriptor:
    """Rescale so the chosen norm is 1; zero vectors pass through flagged."""
    if scheme not in ("l1", "l2"):
        raise ValueError(f"unknown normalization {scheme!r}")
    norm = np.abs(d.values).sum() if scheme == "l1" else np.linalg.norm(d.values)
    if norm == 0.0:
        return replace(d, normalization=scheme, degenerate=True)
    return replace(d, values=d.values / norm, normalization=scheme)


def write_descriptor_dump(path, descriptors: dict, source: str,
                          normalization: str = "none",
                          threshold: float | None = None) -> None:
    """One record per patch: id then decimal activations or a hex bitset."""
    ids = sorted(descriptors)
    width = None
    for pid in ids:
        d = descriptors[pid]
        w = d.width if isinstance(d, BinaryDescriptor) else len(d)
        if width is None:
            width = w
        elif w != width:
            raise ValueError("descriptors have inconsistent widths")
    thr = "nan" if threshold is None else repr(float(threshold))
    kind = "binary" if ids and isinstance(descriptors[ids[0]], BinaryDescriptor) else "real"
    with open(path, "w") as fh:
        fh.write(f"# kind={kind} source={source} norm={normalization} "
                 f"width={width} threshold={thr}\n")
        for pid in ids:
            d = descriptors[pid]
            if isinstance(d, BinaryDescriptor):
                fh.write(f"{pid} {d.to_hex()}\n")
            else:
                fh.write(f"{pid} " + " ".join(f"{x:.17g}" for x in d.values) + "\n")


def read_descriptor_dump(path) -> tuple[dict, dict]:
    """Inverse of write_descriptor_dump; returns (descriptors, header)."""
    descriptors = {}
    header = {}
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise ValueError(f"{path}: missing header line")
        for token in first[1:].split():
            key, _, value = token.partition("=")
            header[key] = value
        width = int(header["width"])
        threshold = float(header["threshold"])
        binary = header.get("kind") == "binary"
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            pid = int(parts[0])
            if binary:
                descriptors[pid] = BinaryDescriptor.from_hex(parts[1], width, threshold)
            else:
                vals = np.array([float(x) for x in parts[1:]])
                descriptors[pid] = Descriptor(values=vals, source=header["source"],
                                              normalization=header["norm"])
    return descriptors, header
