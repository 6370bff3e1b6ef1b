import json
import subprocess
import sys

import pytest

from emit.cli import build_parser, main
from emit.data import load_dataset
from emit.masking import VARIANTS
from emit.metrics import MetricReport
from emit.training import TrainReport
from emit import experiments as ex

TINY = {
    "n_sequences": 40,
    "n_features": 3,
    "min_obs": 5,
    "max_obs": 10,
    "synth_horizon": 12.0,
    "d": 8,
    "m": 1,
    "h_e": 2,
    "max_len": 16,
    "theta": 0.1,
    "alpha_mask": 0.2,
    "pretrain_batch_size": 16,
    "pretrain_lr": 1e-2,
    "pretrain_max_epochs": 2,
    "finetune_lr": 1e-3,
    "finetune_batch_size": 16,
    "finetune_max_epochs": 2,
    "split_train": 0.6,
    "split_validation": 0.2,
    "split_test": 0.2,
    "seed": 0,
}


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


@pytest.fixture
def dataset(tmp_path, cfg):
    out = tmp_path / "data.jsonl"
    assert main(["synth", "--config", cfg, "--out", str(out)]) == 0
    return str(out)


@pytest.fixture
def pretrained(tmp_path, cfg, dataset):
    out = tmp_path / "pre.json"
    assert main(["pretrain", "--config", cfg, "--data", dataset, "--out", str(out)]) == 0
    return str(out)


@pytest.fixture
def finetuned(tmp_path, cfg, dataset, pretrained):
    out = tmp_path / "fin.json"
    assert main(["finetune", "--config", cfg, "--data", dataset, "--checkpoint", pretrained,
                 "--out", str(out)]) == 0
    return str(out)


class TestSubcommands:
    def test_synth(self, dataset):
        data, vocab = load_dataset(dataset)
        assert len(data) == 40
        assert vocab.names == ("x0", "x1", "x2")

    def test_synth_seed_flag(self, tmp_path, cfg, dataset):
        other = tmp_path / "other.jsonl"
        main(["synth", "--config", cfg, "--seed", "5", "--out", str(other)])
        assert other.read_bytes() != open(dataset, "rb").read()

    def test_pretrain_writes_checkpoint_and_report(self, pretrained):
        doc = json.load(open(pretrained))
        assert {"parameters", "model_config", "vocab", "normalization"} <= set(doc)
        assert doc["model_config"]["d"] == 8
        report = TrainReport.from_json(json.load(open(pretrained.replace(".json", ".report.json"))))
        assert report.stage == "pretrain"
        assert report.epochs_run == 2

    def test_flags_override_config(self, tmp_path, cfg, dataset):
        out = tmp_path / "p.json"
        assert main(["pretrain", "--config", cfg, "--data", dataset, "--out", str(out), "--epochs", "1",
                     "--theta", "0.5", "--lambda", "0.25", "--horizon", "3", "--variant", "value-only"]) == 0
        report = json.load(open(tmp_path / "p.report.json"))
        assert report["epochs_run"] == 1
        assert report["config"]["lam"] == 0.25
        assert report["config"]["horizon"] == 3.0
        assert report["config"]["mask"]["theta"] == 0.5
        assert report["config"]["mask"]["variant"] == "value-only"

    def test_finetune_and_evaluate(self, tmp_path, cfg, dataset, finetuned):
        report = json.load(open(finetuned.replace(".json", ".report.json")))
        assert report["stage"] == "finetune"
        assert 0.0 <= report["test_metrics"]["roc_auc"] <= 1.0
        out = tmp_path / "metrics.json"
        assert main(["evaluate", "--checkpoint", finetuned, "--data", dataset, "--out", str(out)]) == 0
        metrics = MetricReport.from_json(json.load(open(out)))
        assert metrics.n_pos + metrics.n_neg == 40
        assert metrics.metadata["version"] == ex.version_string()

    def test_finetune_from_scratch_with_label_fraction(self, tmp_path, cfg, dataset):
        out = tmp_path / "scratch.json"
        assert main(["finetune", "--config", cfg, "--data", dataset, "--out", str(out),
                     "--label-fraction", "0.5"]) == 0
        report = json.load(open(tmp_path / "scratch.report.json"))
        assert report["config"]["from_scratch"]
        assert report["config"]["label_fraction"] == 0.5
        assert report["config"]["train_size"] == 12

    def test_mask_stats(self, tmp_path, cfg, dataset, capsys):
        assert main(["mask-stats", "--config", cfg, "--data", dataset, "--alpha-mask", "0.5"]) == 0
        stats = json.loads(capsys.readouterr().out)
        assert stats["alpha_mask"] == 0.5
        assert stats["positions"] == stats["significant"] + stats["insignificant"] + stats["single_observation"]
        out = tmp_path / "stats.json"
        assert main(["mask-stats", "--config", cfg, "--data", dataset, "--out", str(out)]) == 0
        assert json.load(open(out))["theta"] == 0.1

    def test_sweep_grid_size(self, tmp_path, cfg):
        out = tmp_path / "sweep.json"
        assert main(["sweep", "--config", cfg, "--theta", "0.01", "--alpha-grid", "0:1:0.1",
                     "--out", str(out)]) == 0
        rows = json.load(open(out))
        assert len(rows) == 11
        assert [r["alpha_mask"] for r in rows] == [round(0.1 * i, 10) for i in range(11)]
        assert set(rows[0]) == {"theta", "alpha_mask", "seed", "roc_auc", "pr_auc", "min_re_pr"}

    def test_ablate_shape(self, tmp_path, cfg, capsys):
        out = tmp_path / "ablate.json"
        assert main(["ablate", "--config", cfg, "--seeds", "2", "--out", str(out)]) == 0
        result = json.load(open(out))
        assert len(result["runs"]) == 2 * len(VARIANTS)
        assert set(result["variants"]) == set(VARIANTS)
        for stats in result["variants"].values():
            for metric in ex.METRICS:
                assert set(stats[metric]) == {"mean", "std", "values"}
                assert len(stats[metric]["values"]) == 2
        cmp = result["composite_minus_random"]
        assert 0.0 < cmp["mask_budget"] < 1.0
        assert cmp["mask_budget"] == result["event_mask_rate"]
        assert "composite - random" in capsys.readouterr().out


class TestErrors:
    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code != 0

    def test_unknown_flag(self, cfg):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--config", cfg, "--out", "x", "--bogus"])
        assert exc.value.code != 0

    def test_missing_data_file(self, tmp_path, cfg):
        assert main(["pretrain", "--config", cfg, "--data", str(tmp_path / "nope.jsonl"),
                     "--out", str(tmp_path / "c.json")]) == 2

    def test_malformed_data(self, tmp_path, cfg):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("not json\n")
        assert main(["mask-stats", "--config", cfg, "--data", str(bad)]) == 1

    def test_evaluate_needs_finetune_checkpoint_extras(self, tmp_path, cfg, dataset, pretrained):
        doc = json.load(open(pretrained))
        del doc["vocab"]
        stripped = tmp_path / "stripped.json"
        stripped.write_text(json.dumps(doc))
        assert main(["evaluate", "--checkpoint", str(stripped), "--data", dataset,
                     "--out", str(tmp_path / "m.json")]) == 1

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "emit", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0
        for name in ("synth", "pretrain", "finetune", "evaluate", "mask-stats", "ablate", "sweep"):
            assert name in proc.stdout


class TestConfigResolution:
    def test_prefixed_key_wins(self):
        flat = {"lr": 1.0, "pretrain_lr": 2.0}
        assert ex.pretrain_config(flat).lr == 2.0
        assert ex.finetune_config(flat).lr == 1.0

    def test_override_drops_prefixed_copies(self):
        flat = ex.override({"mask_theta": 0.3, "theta": 0.2}, "theta", 0.7)
        assert ex.mask_config(flat).theta == 0.7

    def test_prefix_only_keys(self):
        flat = {"horizon": 5.0, "train": 0.5}
        assert ex.synthetic_config(flat).horizon == 48.0
        assert ex.pretrain_config(flat).horizon == 5.0
        assert ex.split_spec(flat).train == 0.8

    def test_lambda_alias(self):
        assert ex.pretrain_config({"lambda": 0.3}).lam == 0.3

    def test_parse_grid(self):
        assert ex.parse_grid("0:1:0.1") == [round(0.1 * i, 10) for i in range(11)]
        assert ex.parse_grid("0.1,0.01") == [0.1, 0.01]
        with pytest.raises(ValueError):
            ex.parse_grid("0:1:0")

    def test_precision(self):
        assert ex.precision({}).__name__ == "float64"
        assert ex.precision({"precision": 32}).__name__ == "float32"
        with pytest.raises(ValueError):
            ex.precision({"precision": 16})

    def test_parser_lists_all_subcommands(self):
        text = build_parser().format_help()
        for name in ("synth", "pretrain", "finetune", "evaluate", "mask-stats", "ablate", "sweep"):
            assert name in text
