import numpy as np
import pytest

from patchrbm.container import (MAGIC, ContainerError, load_container,
                                save_container)
from patchrbm.grbm import GrbmParams
from patchrbm.mcrbm import McrbmParams
from patchrbm.models import ModelBundle, load_model, save_model
from patchrbm.preprocess import fit_whitener


def sample_arrays(seed=0):
    rng = np.random.default_rng(seed)
    return {"W": rng.standard_normal((4, 3)), "a": rng.standard_normal(4),
            "b": rng.standard_normal(3), "z": rng.standard_normal(4)}


class TestContainer:
    def test_round_trip_exact(self, tmp_path):
        f = tmp_path / "m.prbm"
        arrays = sample_arrays()
        save_container(f, "grbm", arrays, {"note": 1})
        kind, back, meta = load_container(f)
        assert kind == "grbm"
        assert meta["note"] == 1
        for name, arr in arrays.items():
            assert np.array_equal(back[name], arr)

    def test_save_load_save_byte_identical(self, tmp_path):
        f1 = tmp_path / "a.prbm"
        f2 = tmp_path / "b.prbm"
        save_container(f1, "grbm", sample_arrays(), {"cfg": {"lr": 0.001}})
        kind, arrays, meta = load_container(f1)
        meta.pop("kind")
        save_container(f2, kind, arrays, meta)
        assert f1.read_bytes() == f2.read_bytes()

    def test_magic_enforced(self, tmp_path):
        f = tmp_path / "bad.prbm"
        f.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ContainerError, match="not a model container"):
            load_container(f)

    def test_checksum_detects_flip(self, tmp_path):
        f = tmp_path / "m.prbm"
        save_container(f, "grbm", sample_arrays(), {})
        raw = bytearray(f.read_bytes())
        raw[len(MAGIC) + 10] ^= 0x01
        f.write_bytes(bytes(raw))
        with pytest.raises(ContainerError, match="checksum"):
            load_container(f)

    def test_truncation_detected(self, tmp_path):
        f = tmp_path / "m.prbm"
        save_container(f, "grbm", sample_arrays(), {})
        f.write_bytes(f.read_bytes()[:40])
        with pytest.raises(ContainerError):
            load_container(f)

    def test_empty_arrays_ok(self, tmp_path):
        f = tmp_path / "m.prbm"
        save_container(f, "grbm", {}, {"x": [1, 2]})
        kind, arrays, meta = load_container(f)
        assert arrays == {}
        assert meta["x"] == [1, 2]


class TestModelBundles:
    def test_grbm_bundle_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        p = GrbmParams(W=rng.standard_normal((256, 8)), a=rng.standard_normal(256),
                       b=rng.standard_normal(8), z=rng.standard_normal(256))
        f = tmp_path / "g.prbm"
        save_model(f, ModelBundle(kind="spgrbm", grbm=p, threshold=0.25,
                                  config={"epochs": 10}))
        back = load_model(f)
        assert back.kind == "spgrbm"
        assert back.threshold == 0.25
        assert back.config == {"epochs": 10}
        for name, arr in p.arrays().items():
            assert np.array_equal(getattr(back.grbm, name), arr)

    def test_mcrbm_bundle_with_whitener(self, tmp_path):
        rng = np.random.default_rng(1)
        w = fit_whitener(rng.random((60, 256)), n_components=12)
        p = McrbmParams(C=rng.standard_normal((12, 16)),
                        P=-np.abs(rng.standard_normal((16, 6))),
                        c=rng.standard_normal(6),
                        W=rng.standard_normal((12, 4)),
                        a=rng.standard_normal(12), b=rng.standard_normal(4))
        f = tmp_path / "m.prbm"
        save_model(f, ModelBundle(kind="mcrbm", mcrbm=p, whitener=w))
        back = load_model(f)
        assert back.kind == "mcrbm"
        assert np.array_equal(back.whitener.basis, w.basis)
        assert back.whitener.variance_retained == w.variance_retained
        for name, arr in p.arrays().items():
            assert np.array_equal(getattr(back.mcrbm, name), arr)

    def test_descriptor_dispatch(self, tmp_path):
        from patchrbm.dataset import synthesize_corpus
        rng = np.random.default_rng(2)
        p = GrbmParams(W=rng.normal(0, 0.1, (256, 8)), a=np.zeros(256),
                       b=np.zeros(8), z=np.zeros(256))
        bundle = ModelBundle(kind="grbm", grbm=p)
        pset, _ = synthesize_corpus(seed=0, n_points=2, views_per_point=2)
        d = bundle.descriptor(pset[0])
        assert len(d) == bundle.descriptor_width() == 8

    def test_unknown_kind_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            save_model(tmp_path / "x.prbm", ModelBundle(kind="vae"))
