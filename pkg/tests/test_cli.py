"""End-to-end runs of every ``cpgm`` subcommand on a tiny configuration."""

import csv
import json

import numpy as np
import pytest

from cpgm.cli import main
from cpgm.evaluation import openness

TINY = {
    "cpgm_vae": {"model_kind": "cpgm_vae", "seed": 0,
                 "dataset": {"n_per_class": 30, "heldout": [4, 5]}, "vae": {"epochs": 3}},
    "cpgm_aae": {"model_kind": "cpgm_aae", "seed": 0,
                 "dataset": {"n_per_class": 30, "heldout": [4, 5]}, "aae": {"epochs": 3}},
}


def write_config(tmp_path, raw, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module", params=sorted(TINY))
def trained(request, tmp_path_factory):
    tmp = tmp_path_factory.mktemp(request.param)
    conf = write_config(tmp, TINY[request.param])
    assert main(["train", "--config", conf, "--out", str(tmp / "run")]) == 0
    return request.param, conf, tmp


class TestTrain:
    def test_outputs(self, trained):
        kind, conf, tmp = trained
        rows = read_csv(tmp / "run" / "loss.csv")
        epochs = TINY[kind][kind.split("_")[1]]["epochs"]
        assert len(rows) - 1 == epochs
        assert "train_acc" in rows[0]
        echo = json.loads((tmp / "run" / "config.json").read_text())
        assert echo["model_config"]["num_classes"] == 4
        assert echo["thresholds"]["coverage"] == 0.95

    def test_byte_identical_rerun(self, trained):
        kind, conf, tmp = trained
        assert main(["train", "--config", conf, "--out", str(tmp / "again")]) == 0
        for name in ("model.ckpt", "loss.csv", "config.json"):
            assert (tmp / "again" / name).read_bytes() == (tmp / "run" / name).read_bytes()

    def test_echo_reproduces_run(self, trained):
        kind, conf, tmp = trained
        echo = json.loads((tmp / "run" / "config.json").read_text())
        echo.pop("model_config")
        replay = write_config(tmp, echo, "echo.json")
        assert main(["train", "--config", replay, "--out", str(tmp / "replay")]) == 0
        assert (tmp / "replay" / "model.ckpt").read_bytes() == (tmp / "run" / "model.ckpt").read_bytes()


class TestEval:
    def test_report(self, trained):
        kind, conf, tmp = trained
        out = tmp / "eval"
        args = ["eval", "--config", conf, "--checkpoint", str(tmp / "run" / "model.ckpt"), "--out", str(out)]
        assert main(args) == 0
        report = json.loads((out / "metrics.json").read_text())
        assert {"openness", "macro_f1", "closed_set_accuracy"} <= set(report)
        assert report["openness"] == pytest.approx(openness(4, 7, 4), abs=1e-12)
        rows = read_csv(out / "confusion.csv")
        assert len(rows) - 1 == 5 and all(len(r) - 1 == 5 for r in rows)
        assert (out / "detector.txt").read_text().startswith("thresholds")
        first = (out / "metrics.json").read_bytes()
        assert main(args) == 0
        assert (out / "metrics.json").read_bytes() == first

    def test_train_set_accuracy(self, trained):
        kind, conf, tmp = trained
        out = tmp / "eval_train"
        assert main(["eval", "--config", conf, "--checkpoint", str(tmp / "run" / "model.ckpt"),
                     "--out", str(out), "--on", "train"]) == 0
        final = float(read_csv(tmp / "run" / "loss.csv")[-1][-1])
        acc = json.loads((out / "metrics.json").read_text())["closed_set_accuracy"]
        assert acc >= final - 0.01

    def test_kind_mismatch_exit_2(self, trained, capsys):
        kind, conf, tmp = trained
        other = TINY["cpgm_aae" if kind == "cpgm_vae" else "cpgm_vae"]
        wrong = write_config(tmp, other, "wrong.json")
        code = main(["eval", "--config", wrong, "--checkpoint", str(tmp / "run" / "model.ckpt"),
                     "--out", str(tmp / "x")])
        assert code == 2
        assert "--checkpoint" in capsys.readouterr().err

    def test_architecture_mismatch_exit_2(self, trained):
        kind, conf, tmp = trained
        raw = dict(TINY[kind], ablation_mode="cnn")
        code = main(["eval", "--config", write_config(tmp, raw, "cnn.json"),
                     "--checkpoint", str(tmp / "run" / "model.ckpt"), "--out", str(tmp / "x")])
        assert code == 2


class TestExport:
    def test_columns(self, trained):
        kind, conf, tmp = trained
        out = tmp / "emb"
        assert main(["export-embeddings", "--config", conf, "--out", str(out),
                     "--checkpoint", str(tmp / "run" / "model.ckpt")]) == 0
        rows = read_csv(out / "embeddings.csv")
        dim = 32
        assert all(len(r) == dim + 3 for r in rows)
        assert rows[0][:2] == ["sample_id", "label"] and rows[0][-1] == "recon_error"
        errors = np.array([float(r[-1]) for r in rows[1:]])
        assert np.all(np.isfinite(errors)) and np.all(errors >= 0)
        labels = {int(r[1]) for r in rows[1:]}
        assert labels == {-1, 0, 1, 2, 3}


class TestSweep:
    def test_openness_column(self, tmp_path):
        raw = dict(TINY["cpgm_vae"], sweep={"modes": ["cnn", "full"], "seeds": [0]})
        raw["vae"] = {"epochs": 1}
        out = tmp_path / "sweep"
        assert main(["sweep", "--config", write_config(tmp_path, raw), "--out", str(out)]) == 0
        rows = list(csv.DictReader(open(out / "sweep.csv", newline="")))
        assert len(rows) == 2 * 3
        for row in rows:
            expect = openness(4, 4 + int(row["unknown_count"]), 4)
            assert abs(float(row["openness"]) - expect) < 1e-12
        assert len(json.loads((out / "reports.json").read_text())) == 6


class TestGradcheck:
    @pytest.mark.parametrize("kind", sorted(TINY))
    def test_default_configs_pass(self, kind, tmp_path):
        conf = write_config(tmp_path, {"model_kind": kind})
        out = tmp_path / "gc"
        assert main(["gradcheck", "--config", conf, "--out", str(out), "--coords", "3"]) == 0
        lines = (out / "gradcheck.txt").read_text().splitlines()
        assert lines and all(line.endswith("PASS") for line in lines)


class TestErrors:
    def test_missing_field_exit_2(self, tmp_path, capsys):
        conf = write_config(tmp_path, {"seed": 0})
        assert main(["train", "--config", conf, "--out", str(tmp_path / "o")]) == 2
        assert "model_kind" in capsys.readouterr().err

    def test_bad_json_exit_2(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{")
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 2

    def test_missing_checkpoint_exit_2(self, tmp_path):
        conf = write_config(tmp_path, TINY["cpgm_vae"])
        assert main(["eval", "--config", conf, "--checkpoint", str(tmp_path / "none"),
                     "--out", str(tmp_path / "o")]) == 2

    def test_corrupt_checkpoint_exit_1(self, tmp_path):
        conf = write_config(tmp_path, TINY["cpgm_vae"])
        (tmp_path / "bad.ckpt").write_bytes(b"CPGM0001\x05")
        assert main(["eval", "--config", conf, "--checkpoint", str(tmp_path / "bad.ckpt"),
                     "--out", str(tmp_path / "o")]) == 1

    def test_missing_idx_exit_1(self, tmp_path):
        raw = {"model_kind": "cpgm_vae", "dataset": {"kind": "idx", "images": str(tmp_path / "i"),
               "labels": str(tmp_path / "l"), "known": [0, 1]}}
        assert main(["train", "--config", write_config(tmp_path, raw), "--out", str(tmp_path / "o")]) == 1

    def test_bad_thread_env_exit_2(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CPGM_THREADS", "many")
        conf = write_config(tmp_path, TINY["cpgm_vae"])
        assert main(["train", "--config", conf, "--out", str(tmp_path / "o")]) == 2

    def test_usage_error(self):
        assert main(["frobnicate"]) == 2
