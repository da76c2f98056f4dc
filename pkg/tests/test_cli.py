import numpy as np
import pytest

from patchrbm.cli import ConfigError, main, read_config
from patchrbm.descriptor import read_descriptor_dump
from patchrbm.dataset import load_match_pairs, load_patch_archive
from patchrbm.models import load_model


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(root), "--seed", "5",
                 "--points", "40", "--views", "2"]) == 0
    return root


@pytest.fixture(scope="module")
def grbm_model(corpus, tmp_path_factory):
    workdir = tmp_path_factory.mktemp("models")
    cfg = workdir / "grbm.cfg"
    cfg.write_text("kind = spgrbm\n"
                   "n_hidden = 16\n"
                   "epochs = 2\n"
                   "batch_size = 32\n"
                   "sparsity_penalty = 0.2  # lifetime sparsity\n")
    model = workdir / "model.prbm"
    assert main(["train", "--config", str(cfg), "--data", str(corpus),
                 "--out", str(model), "--seed", "0"]) == 0
    return model


def pairs_file(corpus):
    return next(corpus.glob("m50_*.txt"))


class TestConfig:
    def test_comments_and_whitespace(self, tmp_path):
        f = tmp_path / "c.cfg"
        f.write_text("# top comment\nkind = grbm\n\nepochs=3   # trailing\n")
        cfg = read_config(f)
        assert cfg == {"kind": "grbm", "epochs": "3"}

    def test_unknown_key_lists_valid(self, tmp_path):
        f = tmp_path / "c.cfg"
        f.write_text("kind = grbm\nlearning_rate = 0.1\n")
        with pytest.raises(ConfigError, match="learning_rate"):
            read_config(f)
        with pytest.raises(ConfigError, match="n_hidden"):
            read_config(f)

    def test_missing_kind_rejected(self, tmp_path):
        f = tmp_path / "c.cfg"
        f.write_text("epochs = 3\n")
        with pytest.raises(ConfigError, match="kind"):
            read_config(f)

    def test_malformed_line_reports_number(self, tmp_path):
        f = tmp_path / "c.cfg"
        f.write_text("kind = grbm\nnot a pair\n")
        with pytest.raises(ConfigError, match=":2"):
            read_config(f)

    def test_kind_specific_keys(self, tmp_path):
        f = tmp_path / "c.cfg"
        f.write_text("kind = grbm\nhmc_step = 0.1\n")  # mcrbm-only key
        with pytest.raises(ConfigError):
            read_config(f)


class TestSynth:
    def test_writes_loadable_archive(self, corpus):
        pset = load_patch_archive(corpus)
        assert len(pset) == 80
        pairs = load_match_pairs(pairs_file(corpus), pset)
        assert pairs


class TestTrain:
    def test_model_and_log_written(self, grbm_model):
        bundle = load_model(grbm_model)
        assert bundle.kind == "spgrbm"
        assert bundle.grbm.W.shape == (256, 16)
        log_lines = (grbm_model.parent / (grbm_model.name + ".log")
                     ).read_text().splitlines()
        import json
        records = [json.loads(line) for line in log_lines]
        assert records[0]["event"] == "start"
        epochs = [r for r in records if r["event"] == "epoch"]
        assert len(epochs) == 2
        assert "reconstruction_error" in epochs[0]

    def test_data_env_fallback(self, corpus, tmp_path, monkeypatch):
        monkeypatch.setenv("PATCHRBM_DATA", str(corpus))
        cfg = tmp_path / "c.cfg"
        cfg.write_text("kind = grbm\nn_hidden = 4\nepochs = 1\nbatch_size = 32\n")
        out = tmp_path / "m.prbm"
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        assert out.exists()

    def test_no_data_dir_errors(self, tmp_path, monkeypatch):
        monkeypatch.delenv("PATCHRBM_DATA", raising=False)
        cfg = tmp_path / "c.cfg"
        cfg.write_text("kind = grbm\n")
        with pytest.raises(SystemExit, match="data"):
            main(["train", "--config", str(cfg), "--out", str(tmp_path / "m")])

    def test_mcrbm_train(self, corpus, tmp_path):
        cfg = tmp_path / "m.cfg"
        cfg.write_text("kind = mcrbm\narch = custom\nn_mean = 4\n"
                       "n_factors = 8\nn_cov = 4\nepochs = 1\n"
                       "batch_size = 32\nretain = 0.9\n")
        out = tmp_path / "mc.prbm"
        assert main(["train", "--config", str(cfg), "--data", str(corpus),
                     "--out", str(out)]) == 0
        bundle = load_model(out)
        assert bundle.kind == "mcrbm"
        assert bundle.whitener is not None
        assert np.all(bundle.mcrbm.P <= 0)


class TestExtractEvaluate:
    def test_extract_dump(self, corpus, grbm_model, tmp_path):
        out = tmp_path / "descs.txt"
        assert main(["extract", "--model", str(grbm_model), "--data", str(corpus),
                     "--out", str(out)]) == 0
        descs, header = read_descriptor_dump(out)
        assert len(descs) == 80
        assert int(header["width"]) == 16

    def test_evaluate_from_model(self, corpus, grbm_model, tmp_path):
        out = tmp_path / "report.txt"
        assert main(["evaluate", "--model", str(grbm_model), "--data", str(corpus),
                     "--pairs", str(pairs_file(corpus)), "--metric", "l1",
                     "--norm", "l1", "--out", str(out)]) == 0
        text = out.read_text()
        assert "error_rate_95:" in text
        assert "roc:" in text

    def test_evaluate_from_dump_matches_model(self, corpus, grbm_model, tmp_path):
        dump = tmp_path / "descs.txt"
        main(["extract", "--model", str(grbm_model), "--data", str(corpus),
              "--out", str(dump)])
        r1 = tmp_path / "r1.txt"
        r2 = tmp_path / "r2.txt"
        main(["evaluate", "--model", str(grbm_model), "--data", str(corpus),
              "--pairs", str(pairs_file(corpus)), "--metric", "l2",
              "--out", str(r1)])
        main(["evaluate", "--dump", str(dump),
              "--pairs", str(pairs_file(corpus)), "--metric", "l2",
              "--out", str(r2)])

        def rate(path):
            for line in path.read_text().splitlines():
                if line.startswith("error_rate_95:"):
                    return line
        assert rate(r1) == rate(r2)

    def test_hamming_without_threshold_fails(self, corpus, grbm_model, tmp_path):
        with pytest.raises(SystemExit, match="binarize"):
            main(["evaluate", "--model", str(grbm_model), "--data", str(corpus),
                  "--pairs", str(pairs_file(corpus)), "--metric", "hamming",
                  "--out", str(tmp_path / "r.txt")])

    def test_binarize_then_hamming(self, corpus, grbm_model, tmp_path):
        assert main(["binarize", "--model", str(grbm_model),
                     "--data", str(corpus)]) == 0
        bundle = load_model(grbm_model)
        assert bundle.threshold is not None
        out = tmp_path / "rh.txt"
        assert main(["evaluate", "--model", str(grbm_model), "--data", str(corpus),
                     "--pairs", str(pairs_file(corpus)), "--metric", "hamming",
                     "--out", str(out)]) == 0
        assert "distance: Hamming" in out.read_text()

    def test_grid_file_appends(self, corpus, grbm_model, tmp_path):
        gf = tmp_path / "grid.tsv"
        for _ in range(2):
            main(["evaluate", "--model", str(grbm_model), "--data", str(corpus),
                  "--pairs", str(pairs_file(corpus)), "--metric", "l1",
                  "--out", str(tmp_path / "r.txt"), "--grid-file", str(gf),
                  "--method", "spgrbm", "--train-set", "SYNTH"])
        assert len(gf.read_text().splitlines()) == 2


class TestExportFilters:
    def test_pgm_written(self, grbm_model, tmp_path):
        out = tmp_path / "filters.pgm"
        assert main(["export-filters", "--model", str(grbm_model),
                     "--out", str(out)]) == 0
        header = out.read_bytes()[:2]
        assert header == b"P5"

    def test_png_written(self, grbm_model, tmp_path):
        out = tmp_path / "filters.png"
        assert main(["export-filters", "--model", str(grbm_model),
                     "--out", str(out)]) == 0
        from PIL import Image
        img = Image.open(out)
        assert img.mode == "L"


class TestGrid:
    def test_table_over_scenes(self, tmp_path):
        root = tmp_path / "data"
        for name, seed in (("sceneA", 1), ("sceneB", 2)):
            main(["synth", "--out", str(root / name), "--seed", str(seed),
                  "--points", "20", "--views", "2"])
        cfg = tmp_path / "g.cfg"
        cfg.write_text("kind = grbm\nn_hidden = 8\nepochs = 1\nbatch_size = 32\n"
                       "scenes = sceneA,sceneB\ntest_scenes = sceneA,sceneB\n"
                       "metric = l1\nnorm = l1\n")
        out = tmp_path / "grid.tsv"
        assert main(["grid", "--config", str(cfg), "--data", str(root),
                     "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        # header + (2 single-scene + 1 joint) x 2 test scenes
        assert len(lines) == 7
        assert lines[0].split("\t") == ["method", "train_set", "test_set", "rate"]
        joint = [l for l in lines[1:] if "sceneA/sceneB" in l]
        assert len(joint) == 2
