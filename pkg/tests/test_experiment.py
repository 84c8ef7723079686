import csv
import json
from pathlib import Path

import numpy as np
import pytest

from voxbench import cli, storage
from voxbench.experiment import (
    ConfigError,
    DEFAULT_CONFIG,
    assemble_report,
    run_experiment,
    run_prepare_stages,
    sweep_pretrain_size,
    validate_config,
)
from voxbench.metrics import performance_gap

TINY_RUN_CONFIG = {
    "seed": 11,
    "dataset": {
        "pretrain": {"A": 6},
        "train": {"A": 4, "B": 4},
        "val": {"A": 2, "B": 2},
        "test": {"A": 5, "B": 5},
    },
    "methods": ["simmim"],
    "shots": [2],
    "seeds": [0],
    "pretrain": {"steps": 3, "batch_size": 2},
    "finetune": {"epochs": 3, "eval_every": 2},
    "analysis": {"cka_probes": 5},
}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "exp"
    report_dir = run_experiment(json.loads(json.dumps(TINY_RUN_CONFIG)), out)
    report = json.loads((report_dir / "report.json").read_text())
    return out, report


class TestConfigValidation:
    def test_defaults_fill_in(self):
        cfg = validate_config({})
        assert cfg["encoder_preset"] == "desk"
        assert cfg["methods"] == list(DEFAULT_CONFIG["methods"])

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            validate_config({"banana": 1})

    def test_unknown_method_rejected(self):
        with pytest.raises(ConfigError, match="unknown method"):
            validate_config({"methods": ["simmim", "magic"]})

    def test_unknown_preset_rejected(self):
        with pytest.raises(ConfigError, match="preset"):
            validate_config({"encoder_preset": "huge"})

    def test_unsorted_shots_rejected(self):
        with pytest.raises(ConfigError, match="ascending"):
            validate_config({"shots": [10, 5]})

    def test_empty_seeds_rejected(self):
        with pytest.raises(ConfigError, match="seeds"):
            validate_config({"seeds": []})

    def test_bad_schema_version(self):
        with pytest.raises(ConfigError, match="schema_version"):
            validate_config({"schema_version": 99})

    def test_bad_task(self):
        with pytest.raises(ConfigError, match="task"):
            validate_config({"dataset": {"task": "registration"}})


class TestPipeline:
    def test_report_rows_complete(self, tiny_run):
        _, report = tiny_run
        # (simmim + scratch) x 2 modalities x 1 shots x 1 seed
        assert len(report["results"]) == 4
        methods = {r["method"] for r in report["results"]}
        assert methods == {"simmim", "scratch"}

    def test_gap_values_match_metrics_module(self, tiny_run):
        _, report = tiny_run
        for cell in report["cells"]:
            ref = cell["best_mean_dsc"]
            for row in cell["rows"]:
                assert row["gap_percent"] == pytest.approx(
                    performance_gap(row["mean_dsc"], ref), abs=1e-12
                )
                assert row["gap_percent"] <= 0

    def test_best_reference_is_brute_force_max(self, tiny_run):
        _, report = tiny_run
        for cell in report["cells"]:
            best = max(cell["rows"], key=lambda r: r["mean_dsc"])
            assert cell["best_mean_dsc"] == best["mean_dsc"]

    def test_artifact_tree(self, tiny_run):
        out, _ = tiny_run
        assert (out / "data" / "manifest.json").exists()
        assert (out / "pretrain" / "simmim" / "checkpoint.ckpt").exists()
        assert (out / "pretrain" / "simmim" / "losses.csv").exists()
        ft = out / "finetune" / "simmim" / "A" / "shots_2" / "seed_0"
        assert (ft / "checkpoint.ckpt").exists()
        assert (ft / "record.csv").exists()
        assert (ft / "result.json").exists()
        assert (out / "analysis" / "cka.json").exists()

    def test_cka_rows_have_baselines(self, tiny_run):
        _, report = tiny_run
        assert report["cka"], "cka analysis missing"
        for row in report["cka"]:
            assert len(row["values"]) == len(row["taps"])
            assert len(row["baseline_values"]) == len(row["taps"])

    def test_resume_is_noop(self, tiny_run):
        out, report = tiny_run
        before = (out / "report" / "report.json").read_bytes()
        run_experiment(json.loads(json.dumps(TINY_RUN_CONFIG)), out, resume=True)
        assert (out / "report" / "report.json").read_bytes() == before

    def test_partial_run_refused_without_resume(self, tmp_path):
        cfg, out = run_prepare_stages(
            json.loads(json.dumps(TINY_RUN_CONFIG)), tmp_path / "partial"
        )
        with pytest.raises(RuntimeError, match="partial prior run"):
            run_experiment(json.loads(json.dumps(TINY_RUN_CONFIG)),
                           tmp_path / "partial")

    def test_different_config_refused(self, tiny_run):
        out, _ = tiny_run
        other = json.loads(json.dumps(TINY_RUN_CONFIG))
        other["seed"] = 999
        with pytest.raises(RuntimeError, match="different config"):
            run_experiment(other, out, resume=True)

    def test_plot_csv_matches_report(self, tiny_run):
        out, report = tiny_run
        with open(out / "report" / "plots" / "overall_dsc.csv") as f:
            rows = list(csv.DictReader(f))
        plotted = {
            (r["modality"], r["shots"], r["method"]): float(r["mean_dsc"])
            for r in rows
        }
        for cell in report["cells"]:
            for row in cell["rows"]:
                key = (cell["modality"], str(cell["shots"]), row["method"])
                assert plotted[key] == pytest.approx(row["mean_dsc"], abs=1e-12)

    def test_training_curves_in_results(self, tiny_run):
        _, report = tiny_run
        for r in report["results"]:
            assert len(r["train_loss"]) >= 1
            assert len(r["val_epochs"]) == len(r["val_dsc"])

    def test_report_has_no_absolute_paths(self, tiny_run):
        out, _ = tiny_run
        text = (out / "report" / "report.json").read_text()
        assert str(out) not in text


class TestSweep:
    def test_scratch_only_point(self, tmp_path):
        cfg = json.loads(json.dumps(TINY_RUN_CONFIG))
        cfg["analysis"] = {"cka": False, "cka_probes": 5}
        out = sweep_pretrain_size(cfg, [0], tmp_path / "sweep")
        doc = json.loads((out / "sweep.json").read_text())
        assert doc["sizes"] == [0]
        assert {p["method"] for p in doc["points"]} == {"scratch"}
        assert (out / "sweep_size.png").exists()
        assert (out / "sweep_size.csv").exists()

    def test_unsorted_sizes_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="ascending"):
            sweep_pretrain_size(dict(TINY_RUN_CONFIG), [50, 0], tmp_path / "s")


class TestCLI:
    def test_bad_config_exits_2(self, tmp_path):
        cfg_path = tmp_path / "bad.json"
        cfg_path.write_text(json.dumps({"methods": ["nope"]}))
        rc = cli.main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "o")])
        assert rc == 2

    def test_missing_config_exits_2(self, tmp_path):
        rc = cli.main(["run", "--config", str(tmp_path / "absent.json"),
                       "--out", str(tmp_path / "o")])
        assert rc == 2

    def test_phantom_command(self, tmp_path):
        cfg_path = tmp_path / "data.json"
        cfg_path.write_text(json.dumps({
            "pretrain": {"A": 2}, "train": {"B": 2}, "val": {}, "test": {},
        }))
        rc = cli.main(["phantom", "--config", str(cfg_path),
                       "--out", str(tmp_path / "data")])
        assert rc == 0
        assert (tmp_path / "data" / "manifest.json").exists()

    def test_infer_command(self, tiny_run, tmp_path):
        out, _ = tiny_run
        ckpt = out / "finetune" / "simmim" / "A" / "shots_2" / "seed_0" / "checkpoint.ckpt"
        manifest = json.loads((out / "data" / "manifest.json").read_text())
        vol_name = next(e["volume"] for e in manifest["entries"]
                        if e["split"] == "test" and e["modality"] == "A")
        pred_path = tmp_path / "pred.vox"
        rc = cli.main(["infer", "--checkpoint", str(ckpt),
                       "--volume", str(out / "data" / vol_name),
                       "--out", str(pred_path)])
        assert rc == 0
        labels = storage.load_labels(pred_path)
        assert labels.shape == (32, 32, 32)

    def test_cka_command(self, tiny_run, tmp_path):
        out, _ = tiny_run
        pre = out / "pretrain" / "simmim" / "checkpoint.ckpt"
        ft = out / "finetune" / "simmim" / "A" / "shots_2" / "seed_0" / "checkpoint.ckpt"
        csv_path = tmp_path / "cka.csv"
        rc = cli.main(["cka", "--ckpt-a", str(pre), "--ckpt-b", str(ft),
                       "--probes", str(out / "data"), "--modality", "A",
                       "--count", "5", "--out", str(csv_path)])
        assert rc == 0
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "tap,cka"
        assert len(lines) == 7  # header + patch_embed + 5 desk blocks

    def test_report_command(self, tiny_run):
        out, _ = tiny_run
        rc = cli.main(["report", "--out", str(out)])
        assert rc == 0

    def test_stage_failure_exits_3(self, tmp_path):
        # inference on a non-segmentor checkpoint is a stage failure
        from voxbench.encoder import Encoder, EncoderConfig, save_model_checkpoint

        cfg = EncoderConfig(depths=(1, 1, 1, 1), heads=(2, 2, 2, 2),
                            embed_dim=8, input_shape=(16, 16, 16))
        ckpt = tmp_path / "enc.ckpt"
        save_model_checkpoint(ckpt, Encoder(cfg), cfg)
        rc = cli.main(["infer", "--checkpoint", str(ckpt),
                       "--volume", str(tmp_path / "missing.vox")])
        assert rc == 3

    def test_env_var_output_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("VOXBENCH_OUT", str(tmp_path / "root"))
        cfg_path = tmp_path / "data.json"
        cfg_path.write_text(json.dumps({"pretrain": {"A": 1}}))
        rc = cli.main(["phantom", "--config", str(cfg_path)])
        assert rc == 0
        assert (tmp_path / "root" / "data" / "manifest.json").exists()


class TestParallelJobs:
    def test_two_workers_match_inline(self, tmp_path):
        cfg = json.loads(json.dumps(TINY_RUN_CONFIG))
        cfg["dataset"] = {"pretrain": {"A": 4}, "train": {"A": 3, "B": 3},
                          "val": {"A": 1, "B": 1}, "test": {"A": 5, "B": 5}}
        cfg["pretrain"] = {"steps": 2, "batch_size": 2}
        cfg["finetune"] = {"epochs": 2, "eval_every": 1}
        cfg["analysis"] = {"cka": False, "cka_probes": 4}
        # worker processes pin one torch thread each; match that inline for a
        # bit-identical comparison
        import torch

        n = torch.get_num_threads()
        torch.set_num_threads(1)
        try:
            inline = run_experiment(json.loads(json.dumps(cfg)),
                                    tmp_path / "inline", jobs=1)
            parallel = run_experiment(json.loads(json.dumps(cfg)),
                                      tmp_path / "par", jobs=2)
        finally:
            torch.set_num_threads(n)
        a = json.loads((inline / "report.json").read_text())
        b = json.loads((parallel / "report.json").read_text())
        for ra, rb in zip(a["results"], b["results"]):
            assert ra["method"] == rb["method"]
            assert ra["mean_dsc"] == pytest.approx(rb["mean_dsc"], abs=1e-6)
