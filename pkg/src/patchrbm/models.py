"""Trained-model bundles and their container (de)serialization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from patchrbm import descriptor as desc
from patchrbm.container import ContainerError, load_container, save_container
from patchrbm.dataset import Patch
from patchrbm.grbm import GrbmParams
from patchrbm.mcrbm import McrbmParams
from patchrbm.preprocess import Whitener

KINDS = ("grbm", "spgrbm", "mcrbm")


@dataclass
class ModelBundle:
    """Everything needed to turn patches into descriptors reproducibly."""

    kind: str
    grbm: GrbmParams | None = None
    mcrbm: McrbmParams | None = None
    whitener: Whitener | None = None
    threshold: float | None = None
    config: dict | None = None

    def descriptor(self, patch: Patch) -> desc.Descriptor:
        if self.kind in ("grbm", "spgrbm"):
            return desc.grbm_descriptor(patch, self.grbm, source=self.kind)
        return desc.mcrbm_descriptor(patch, self.mcrbm, self.whitener)

    def descriptor_width(self) -> int:
        if self.kind in ("grbm", "spgrbm"):
            return self.grbm.n_hid
        return self.mcrbm.n_cov


def save_model(path, bundle: ModelBundle) -> None:
    if bundle.kind not in KINDS:
        raise ValueError(f"unknown model kind {bundle.kind!r}")
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {"config": bundle.config or {}}
    if bundle.threshold is not None:
        meta["threshold"] = bundle.threshold
    if bundle.kind in ("grbm", "spgrbm"):
        arrays.update(bundle.grbm.arrays())
    else:
        arrays.update(bundle.mcrbm.arrays())
    if bundle.whitener is not None:
        w = bundle.whitener
        arrays["whitener/basis"] = w.basis
        arrays["whitener/inv_basis"] = w.inv_basis
        arrays["whitener/eigenvalues"] = w.eigenvalues
        meta["whitener"] = {"variance_retained": w.variance_retained,
                            "dropped": w.dropped}
    save_container(path, bundle.kind, arrays, meta)


def load_model(path) -> ModelBundle:
    kind, arrays, meta = load_container(path)
    if kind not in KINDS:
        raise ContainerError(f"{path}: unknown model kind {kind!r}")
    whitener = None
    if "whitener/basis" in arrays:
        winfo = meta.get("whitener", {})
        whitener = Whitener(
            basis=arrays["whitener/basis"],
            inv_basis=arrays["whitener/inv_basis"],
            eigenvalues=arrays["whitener/eigenvalues"],
            variance_retained=float(winfo.get("variance_retained", 1.0)),
            dropped=int(winfo.get("dropped", 0)),
        )
    bundle = ModelBundle(kind=kind, whitener=whitener,
                         threshold=meta.get("threshold"),
                         config=meta.get("config", {}))
    if kind in ("grbm", "spgrbm"):
        bundle.grbm = GrbmParams(W=arrays["W"], a=arrays["a"],
                                 b=arrays["b"], z=arrays["z"])
    else:
        bundle.mcrbm = McrbmParams(C=arrays["C"], P=arrays["P"], c=arrays["c"],
                                   W=arrays["W"], a=arrays["a"], b=arrays["b"])
    return bundle
