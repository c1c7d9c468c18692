import json

import numpy as np
import pytest

from hierlogloss.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_VERIFY, main, resolve_tree
from hierlogloss.compose import SoftmaxClassifier, load_model, save_model
from hierlogloss.datasets import load_dataset
from hierlogloss.learners import fit_softmax_to_posteriors
from hierlogloss.tree import serialize_tree

GEN = ["--classes", "4", "--dim", "3", "--train-n", "400", "--test-n", "300", "--seed", "7", "--sigma", "1.0"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen", "--scenario", "A", *GEN, "--out", str(out)]) == EXIT_OK
    return out


def run(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr()


class TestGen:
    def test_writes_files(self, data_dir):
        assert {p.name for p in data_dir.iterdir()} >= {"train.ds", "test.ds", "spec.json"}
        assert len(load_dataset(data_dir / "train.ds")) == 400

    def test_byte_identical_reruns(self, tmp_path, data_dir):
        assert main(["gen", "--scenario", "A", *GEN, "--out", str(tmp_path)]) == EXIT_OK
        for name in ("train.ds", "test.ds", "spec.json"):
            assert (tmp_path / name).read_bytes() == (data_dir / name).read_bytes()

    def test_calibrates_sigma(self, tmp_path):
        args = ["gen", "--scenario", "B", "--classes", "3", "--dim", "2", "--train-n", "10", "--test-n", "10"]
        assert main([*args, "--out", str(tmp_path)]) == EXIT_OK
        spec = json.loads((tmp_path / "spec.json").read_text())
        assert spec["sigma"] != 1.0 and spec["factors"] is not None

    def test_bad_scenario(self, tmp_path):
        assert main(["gen", "--scenario", "C", "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_missing_mnist(self, tmp_path):
        assert main(["gen", "--mnist-dir", str(tmp_path), "--out", str(tmp_path / "o")]) == EXIT_DATA


class TestTrain:
    @pytest.mark.parametrize("method, tree, count", [("ova", None, 4), ("hierarchical", "cova", 3)])
    def test_scorer_counts(self, tmp_path, data_dir, method, tree, count):
        argv = ["train", "--data", str(data_dir), "--method", method, "--epochs", "2", "--out", str(tmp_path)]
        if tree:
            argv += ["--tree", tree]
        assert main(argv) == EXIT_OK
        assert len(load_model(tmp_path / f"model-{method}.bin").scorers) == count
        manifest = json.loads((tmp_path / f"manifest-{method}.json").read_text())
        assert manifest["config"]["method"] == method and "dataset_digest" in manifest

    def test_leveraged_zero_epochs_matches_softmax(self, tmp_path, data_dir, capsys):
        base = ["--data", str(data_dir), "--epochs", "0", "--baseline-epochs", "3", "--out", str(tmp_path)]
        assert main(["train", "--method", "leveraged", "--tree", "balanced", *base]) == EXIT_OK
        manifest = json.loads((tmp_path / "manifest-leveraged.json").read_text())
        assert manifest["baseline"]["source"] == "trained"
        X = load_dataset(data_dir / "test.ds").features
        lev = load_model(tmp_path / "model-leveraged.bin").predict_proba(X)
        soft = load_model(tmp_path / "model-softmax.bin").predict_proba(X)
        np.testing.assert_allclose(lev, soft, atol=1e-12)
        # a second run reuses the stored baseline
        assert main(["train", "--method", "leveraged", "--tree", "balanced", *base]) == EXIT_OK
        manifest = json.loads((tmp_path / "manifest-leveraged.json").read_text())
        assert manifest["baseline"]["source"] == "loaded"

    def test_manifest_reproduces_model(self, tmp_path, data_dir):
        first = tmp_path / "a"
        argv = ["train", "--data", str(data_dir), "--method", "softmax", "--epochs", "2", "--seed", "3"]
        assert main([*argv, "--out", str(first)]) == EXIT_OK
        second = tmp_path / "b"
        assert main(["train", "--config", str(first / "manifest-softmax.json"), "--out", str(second)]) == EXIT_OK
        assert (first / "model-softmax.bin").read_bytes() == (second / "model-softmax.bin").read_bytes()

    def test_tree_required(self, tmp_path, data_dir):
        argv = ["train", "--data", str(data_dir), "--method", "hierarchical", "--out", str(tmp_path)]
        assert main(argv) == EXIT_CONFIG
        assert main([*argv, "--tree", "(0 1)"]) == EXIT_CONFIG

    def test_config_file_and_override(self, tmp_path, data_dir):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"# softmax run\ndata={data_dir}\nmethod=softmax\nepochs=1\nout={tmp_path / 'x'}\n")
        assert main(["train", "--config", str(cfg)]) == EXIT_OK
        assert main(["train", "--config", str(cfg), "--epochs", "2", "--out", str(tmp_path / "y")]) == EXIT_OK
        cx = json.loads((tmp_path / "x" / "manifest-softmax.json").read_text())["config"]
        cy = json.loads((tmp_path / "y" / "manifest-softmax.json").read_text())["config"]
        assert (cx["epochs"], cy["epochs"]) == (1, 2)

    @pytest.mark.parametrize("line", ["epochs=abc", "bogus=1", "method=tree", "no equals sign"])
    def test_bad_config(self, tmp_path, data_dir, line):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(line + "\n")
        argv = ["train", "--config", str(cfg), "--data", str(data_dir), "--method", "softmax", "--out", str(tmp_path)]
        assert main(argv) == EXIT_CONFIG

    def test_missing_data(self, tmp_path):
        argv = ["train", "--data", str(tmp_path), "--method", "softmax", "--out", str(tmp_path)]
        assert main(argv) == EXIT_DATA


class TestEval:
    def test_perfect_posterior_model(self, tmp_path, data_dir, capsys):
        model = SoftmaxClassifier(fit_softmax_to_posteriors(load_dataset(data_dir / "train.ds")))
        save_model(tmp_path / "m.bin", model)
        code, out = run(capsys, "eval", "--data", str(data_dir), "--model", str(tmp_path / "m.bin"), "--format", "delimited")
        assert code == EXIT_OK
        rows = {line.split("\t")[0]: line.split("\t") for line in out.out.splitlines()}
        header = rows["split"]
        test = dict(zip(header, rows["test"]))
        assert test["regret"] in ("0.0000", "-0.0000")
        assert test["error"] == test["bayes_error"]

    def test_node_breakdown_and_determinism(self, tmp_path, data_dir, capsys):
        argv = ["train", "--data", str(data_dir), "--method", "hierarchical", "--tree", "balanced", "--epochs", "2"]
        assert main([*argv, "--out", str(tmp_path)]) == EXIT_OK
        model = str(tmp_path / "model-hierarchical.bin")
        ev = ["eval", "--data", str(data_dir), "--model", model]
        assert main([*ev, "--report", str(tmp_path / "r1.txt")]) == EXIT_OK
        assert main([*ev, "--report", str(tmp_path / "r2.txt")]) == EXIT_OK
        text = (tmp_path / "r1.txt").read_text()
        assert text == (tmp_path / "r2.txt").read_text()
        assert "per-node binary log-loss (test)" in text and "(ok)" in text
        assert main([*ev, "--units", "bits"]) == EXIT_OK

    def test_shape_mismatch(self, tmp_path, data_dir):
        other = tmp_path / "other"
        assert main(["gen", "--classes", "3", "--dim", "2", "--sigma", "1", "--train-n", "20", "--test-n", "20",
                     "--out", str(other)]) == EXIT_OK
        assert main(["train", "--data", str(other), "--method", "softmax", "--epochs", "1",
                     "--out", str(tmp_path)]) == EXIT_OK
        assert main(["eval", "--data", str(data_dir), "--model", str(tmp_path / "model-softmax.bin")]) == EXIT_DATA


class TestVerify:
    def test_default_suite_passes(self, tmp_path, capsys):
        code, out = run(capsys, "verify", "--trials", "1000", "--report", str(tmp_path / "v1.json"))
        assert code == EXIT_OK
        assert out.out.count("PASS") == 5
        assert main(["verify", "--trials", "1000", "--report", str(tmp_path / "v2.json")]) == EXIT_OK
        assert (tmp_path / "v1.json").read_bytes() == (tmp_path / "v2.json").read_bytes()

    def test_injected_fault_fails(self, capsys):
        code, out = run(capsys, "verify", "--suite", "tree,cova", "--trials", "100", "--inject-fault", "node-offset")
        assert code == EXIT_VERIFY
        assert "FAIL" in out.out

    def test_unknown_suite(self):
        assert main(["verify", "--suite", "nope"]) == EXIT_CONFIG


class TestTreeCommand:
    def test_five_class_tree(self, capsys):
        code, out = run(capsys, "tree", "(((0 1) 2) (3 4))")
        assert code == EXIT_OK
        assert "class 0: 111" in out.out and "depth=3" in out.out

    def test_named_sources(self, capsys):
        assert run(capsys, "tree", "cova", "--classes", "5")[0] == EXIT_OK
        assert run(capsys, "tree", "balanced")[0] == EXIT_CONFIG
        assert run(capsys, "tree", "(0 0)")[0] == EXIT_DATA

    def test_resolve(self, tmp_path):
        assert serialize_tree(resolve_tree("balanced", 5)) == "(((0 1) 2) (3 4))"
        assert resolve_tree("balanced:3,2,1,0", 4).nodes[0].one_branch == {2, 3}
        assert resolve_tree("mnist-curved", 10).nodes[0].one_branch == {0, 2, 6, 8}
        f = tmp_path / "t.txt"
        f.write_text("((0 2) 1)")
        assert resolve_tree(str(f), 3).codewords[1] == "0"
