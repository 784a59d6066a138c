import json

import numpy as np
import pytest

from bselect.cli import main
from bselect.data import load_binary
from bselect.reference import load_reference


def write_config(path, out_dir, **sections):
    cfg = {
        "run": {"epochs": 1, "n_candidates": 30, "n_selected": 6, "out_dir": str(out_dir)},
        "selection": {"method": "uniform"},
    }
    for name, body in sections.items():
        cfg.setdefault(name, {}).update(body)
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture()
def dataset_dir(tmp_path):
    out = tmp_path / "data"
    rc = main([
        "gen-data", "--kind", "synthetic", "--out", str(out),
        "--classes", "4", "--per-class", "30", "--dim", "6",
        "--separation", "5.0", "--noise-rate", "0.1", "--seed", "3",
    ])
    assert rc == 0
    return out


class TestGenData:
    def test_synthetic_files(self, dataset_dir):
        train = load_binary(dataset_dir / "train.bsel")
        test = load_binary(dataset_dir / "test.bsel")
        assert train.n == 120 and train.num_classes == 4
        assert train.noise_flags.sum() == 12
        assert test.split == "test"

    def test_csv2bin(self, tmp_path):
        csv = tmp_path / "in.csv"
        csv.write_text("1,0.5,2.0\n0,1.0,-1.0\n1,0.0,0.0\n")
        out = tmp_path / "conv"
        rc = main(["gen-data", "--kind", "csv2bin", "--csv", str(csv), "--out", str(out)])
        assert rc == 0
        ds = load_binary(out / "train.bsel")
        assert ds.n == 3 and ds.num_classes == 2

    def test_missing_csv_is_config_error(self, tmp_path):
        rc = main(["gen-data", "--kind", "csv2bin", "--out", str(tmp_path / "x")])
        assert rc == 2


class TestGenReference:
    def test_prototype(self, dataset_dir, tmp_path):
        out = tmp_path / "ref.txt"
        rc = main([
            "gen-reference", "--dataset", str(dataset_dir / "train.bsel"),
            "--mode", "prototype", "--clean-frac", "0.5", "--tau", "2.0",
            "--seed", "1", "--out", str(out),
        ])
        assert rc == 0
        table = load_reference(out)
        assert table.n == 120 and table.temperature == 2.0

    def test_from_logits(self, dataset_dir, tmp_path):
        logits = np.zeros((120, 4))
        logit_path = tmp_path / "logits.txt"
        np.savetxt(logit_path, logits)
        out = tmp_path / "ref.txt"
        rc = main([
            "gen-reference", "--dataset", str(dataset_dir / "train.bsel"),
            "--mode", "from-logits", "--logits", str(logit_path), "--out", str(out),
        ])
        assert rc == 0
        assert load_reference(out).n == 120

    def test_shape_mismatch_rejected(self, dataset_dir, tmp_path):
        logit_path = tmp_path / "logits.txt"
        np.savetxt(logit_path, np.zeros((5, 4)))
        rc = main([
            "gen-reference", "--dataset", str(dataset_dir / "train.bsel"),
            "--mode", "from-logits", "--logits", str(logit_path),
            "--out", str(tmp_path / "ref.txt"),
        ])
        assert rc == 2


class TestTrain:
    def test_basic_run_and_outputs(self, dataset_dir, tmp_path):
        cfg = write_config(
            tmp_path / "cfg.json", tmp_path / "run",
            data={"train_path": str(dataset_dir / "train.bsel"),
                  "test_path": str(dataset_dir / "test.bsel")},
        )
        rc = main(["train", "--config", str(cfg)])
        assert rc == 0
        for name in ("config.json", "metrics.jsonl", "trace.csv", "checkpoint.json"):
            assert (tmp_path / "run" / name).exists()

    def test_selected_exceeding_candidates_exits_2(self, dataset_dir, tmp_path):
        cfg = write_config(
            tmp_path / "cfg.json", tmp_path / "run",
            run={"n_candidates": 8, "n_selected": 16},
            data={"train_path": str(dataset_dir / "train.bsel")},
        )
        rc = main(["train", "--config", str(cfg)])
        assert rc == 2

    def test_unknown_override_key_exits_2(self, dataset_dir, tmp_path):
        cfg = write_config(
            tmp_path / "cfg.json", tmp_path / "run",
            data={"train_path": str(dataset_dir / "train.bsel")},
        )
        rc = main(["train", "--config", str(cfg), "--override", "selection.bogus=1"])
        assert rc == 2

    def test_determinism_byte_identical(self, dataset_dir, tmp_path):
        ref_out = tmp_path / "ref.txt"
        main([
            "gen-reference", "--dataset", str(dataset_dir / "train.bsel"),
            "--mode", "prototype", "--clean-frac", "0.5", "--out", str(ref_out),
        ])
        blobs = {}
        for tag in ("a", "b"):
            cfg = write_config(
                tmp_path / f"cfg_{tag}.json", tmp_path / f"run_{tag}",
                data={"train_path": str(dataset_dir / "train.bsel"),
                      "test_path": str(dataset_dir / "test.bsel")},
                selection={"method": "bayesian", "mc_samples": 20},
                reference={"path": str(ref_out)},
            )
            assert main(["train", "--config", str(cfg)]) == 0
            blobs[tag] = {
                name: (tmp_path / f"run_{tag}" / name).read_bytes()
                for name in ("metrics.jsonl", "trace.csv")
            }
        assert blobs["a"]["metrics.jsonl"] == blobs["b"]["metrics.jsonl"]
        assert blobs["a"]["trace.csv"] == blobs["b"]["trace.csv"]

    def test_missing_dataset_exits_3(self, tmp_path):
        cfg = write_config(
            tmp_path / "cfg.json", tmp_path / "run",
            data={"train_path": str(tmp_path / "nope.bsel")},
        )
        assert main(["train", "--config", str(cfg)]) == 3


class TestEval:
    def test_pipeline(self, dataset_dir, tmp_path):
        for method in ("uniform", "train_loss"):
            cfg = write_config(
                tmp_path / f"cfg_{method}.json", tmp_path / f"run_{method}",
                run={"epochs": 2, "n_candidates": 30, "n_selected": 6,
                     "out_dir": str(tmp_path / f"run_{method}")},
                data={"train_path": str(dataset_dir / "train.bsel"),
                      "test_path": str(dataset_dir / "test.bsel")},
                selection={"method": method},
            )
            assert main(["train", "--config", str(cfg)]) == 0
        rc = main([
            "eval", "--runs", str(tmp_path / "run_uniform"), str(tmp_path / "run_train_loss"),
            "--targets", "0.5,0.9", "--out", str(tmp_path / "report"),
        ])
        assert rc == 0
        report = (tmp_path / "report" / "report.csv").read_text()
        assert report.startswith("method,target_0.5,target_0.9,final_acc")
        assert "uniform" in report and "train_loss" in report
        assert (tmp_path / "report" / "report.txt").exists()
        series = (tmp_path / "report" / "series_uniform.csv").read_text()
        assert series.startswith("epoch,test_acc")
        assert len(series.strip().split("\n")) == 3  # header + 2 epochs

    def test_missing_run_dir_exits_3(self, tmp_path):
        rc = main(["eval", "--runs", str(tmp_path / "ghost"), "--targets", "0.5"])
        assert rc == 3


class TestCheck:
    def test_small_bounds_suite_passes(self, capsys):
        rc = main(["check", "--suite", "bounds", "--cases", "5", "--seed", "2"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "bounds suite PASS" in out
        assert out.count("  case ") == 5

    def test_ggn_suite_passes(self, capsys):
        rc = main(["check", "--suite", "ggn"])
        assert rc == 0
        assert "ggn suite PASS" in capsys.readouterr().out
