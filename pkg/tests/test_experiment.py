"""Experiment grid: config parsing, proxy data, reports, determinism, CLI."""

import json
import xml.etree.ElementTree as ET
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import ks_2samp

from cineclr.classify import FinetuneConfig, TrainCurve
from cineclr.contrastive import PretrainConfig, load_checkpoint
from cineclr.encoder import EncoderConfig
from cineclr.errors import ConfigurationError, InputDataError, ManifestError
from cineclr.experiment import (
    ExperimentConfig, GridConfig, ProxyConfig, config_from_dict, config_hash,
    config_to_dict, dump_config, emit_convergence_plot, emit_tables,
    epochs_to_fraction_of_final, generate_transfer_proxy_dataset, parse_config,
    read_report_csv, run_experiment, write_report_csv,
)
from cineclr.phantom import PhantomConfig, generate_dataset


def tiny_config(**kw):
    base = dict(
        dataset=PhantomConfig(cases_per_class=6, seed=3),
        encoder=EncoderConfig(channels=(4, 8), embed_dim=16),
        pretrain=PretrainConfig(epochs=2),
        finetune=FinetuneConfig(epochs=3),
        proxy=ProxyConfig(n_images=12),
        grid=GridConfig(repeats=1, base_seed=5),
    )
    base.update(kw)
    return ExperimentConfig(**base)


class TestConfig:
    def test_minimal_config_applies_defaults(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"dataset": {"seed": 9}}')
        cfg = parse_config(p)
        assert cfg.dataset.seed == 9
        assert cfg == replace(ExperimentConfig(),
                              dataset=replace(PhantomConfig(), seed=9))

    def test_defaults_echo_round_trip(self, tmp_path):
        cfg = ExperimentConfig()
        p = tmp_path / "dump.json"
        dump_config(cfg, p)
        assert parse_config(p) == cfg
        assert config_from_dict(json.loads(p.read_text())) == cfg

    def test_unknown_keys_rejected_with_path(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"ntxent": {"temperatuer": 0.1}}')
        with pytest.raises(ConfigurationError, match="ntxent.temperatuer"):
            parse_config(p)
        p.write_text('{"nxtent": {}}')
        with pytest.raises(ConfigurationError, match="nxtent"):
            parse_config(p)

    def test_out_of_range_value_names_key(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"ntxent": {"temperature": -1}}')
        with pytest.raises(ConfigurationError, match="ntxent.temperature"):
            parse_config(p)

    def test_missing_file_and_bad_json(self, tmp_path):
        with pytest.raises(ConfigurationError, match="not found"):
            parse_config(tmp_path / "absent.json")
        p = tmp_path / "bad.json"
        p.write_text("{")
        with pytest.raises(ConfigurationError, match="invalid JSON"):
            parse_config(p)

    def test_grid_invariants(self):
        with pytest.raises(ConfigurationError, match="pretrain_modes"):
            GridConfig(pretrain_modes=("imagenet",)).validate()
        with pytest.raises(ConfigurationError, match="repeats"):
            GridConfig(repeats=0).validate()
        with pytest.raises(ConfigurationError):
            GridConfig(pretrain_modes=()).validate()

    def test_hash_tracks_content(self):
        a = ExperimentConfig()
        b = replace(a, dataset=replace(a.dataset, seed=1))
        assert config_hash(a) != config_hash(b)
        assert config_hash(a) == config_hash(ExperimentConfig())


class TestProxyDataset:
    def test_deterministic(self):
        cfg = ProxyConfig(n_images=8, seed=4)
        a = generate_transfer_proxy_dataset(cfg)
        b = generate_transfer_proxy_dataset(cfg)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_format_matches_phantom_frames(self):
        imgs = generate_transfer_proxy_dataset(ProxyConfig(n_images=4))
        for img in imgs:
            assert img.shape == (1, 64, 64) and img.dtype == np.float32
            assert img.min() >= 0.0 and img.max() <= 1.0

    def test_out_of_domain_vs_phantoms(self):
        proxy = generate_transfer_proxy_dataset(ProxyConfig(n_images=30, seed=0))
        ds = generate_dataset(PhantomConfig(cases_per_class=6, seed=0))
        rng = np.random.default_rng(0)
        a = np.concatenate([p.ravel() for p in proxy])
        b = np.concatenate([c.ed_frame.ravel() for c in ds.cases])
        stat, _ = ks_2samp(rng.choice(a, 10_000, replace=False),
                           rng.choice(b, 10_000, replace=False))
        assert stat > 0.1


class TestRunExperiment:
    def test_single_cell_grid_and_determinism(self, tmp_path):
        cfg = tiny_config(grid=GridConfig(pretrain_modes=("none",),
                                          input_modes=("full",), repeats=1))
        a = run_experiment(cfg, tmp_path / "a")
        b = run_experiment(cfg, tmp_path / "b")
        assert len(a.cells) == 1
        assert a.cells[0].macro_auc == b.cells[0].macro_auc
        assert (tmp_path / "a" / "report.csv").read_bytes() == \
            (tmp_path / "b" / "report.csv").read_bytes()

    def test_full_grid_artifacts(self, tmp_path):
        cfg = tiny_config()
        report = run_experiment(cfg, tmp_path)
        assert len(report.cells) == 8        # 4 pretrain modes x 2 input modes
        for name in ("report.csv", "tables.md", "convergence.svg", "run.log"):
            assert (tmp_path / name).is_file()
        assert len(list((tmp_path / "predictions").iterdir())) == 8
        # one checkpoint per pretrained mode (none has no checkpoint)
        assert len(list((tmp_path / "checkpoints").iterdir())) == 3
        ET.parse(tmp_path / "convergence.svg")

    def test_pretraining_computed_once_per_mode(self, tmp_path):
        cfg = tiny_config(grid=GridConfig(pretrain_modes=("full-sscl",),
                                          input_modes=("full", "segmented"),
                                          repeats=1))
        run_experiment(cfg, tmp_path)
        log = (tmp_path / "run.log").read_text()
        assert log.count("pretrained full-sscl") == 1
        assert log.count("reusing full-sscl checkpoint") == 1

    def test_checkpoints_load_back(self, tmp_path):
        cfg = tiny_config(grid=GridConfig(pretrain_modes=("segmented-sscl",),
                                          input_modes=("segmented",), repeats=1))
        run_experiment(cfg, tmp_path)
        path = next((tmp_path / "checkpoints").iterdir())
        params, pcfg = load_checkpoint(path)
        assert pcfg.input_mode == "segmented"
        assert "conv0.w" in params

    def test_report_csv_round_trip(self, tmp_path):
        cfg = tiny_config(grid=GridConfig(pretrain_modes=("none",),
                                          input_modes=("full",), repeats=2))
        report = run_experiment(cfg, tmp_path)
        rows = read_report_csv(tmp_path / "report.csv", report.config_hash)
        assert len(rows) == 2
        for row in rows:
            cell = report.cell(row["pretrain_mode"], row["input_mode"], row["seed"])
            assert row["macro_auc"] == float(f"{cell.macro_auc:.6f}")

    def test_hash_mismatch_is_an_error(self, tmp_path):
        cfg = tiny_config(grid=GridConfig(pretrain_modes=("none",),
                                          input_modes=("full",)))
        run_experiment(cfg, tmp_path)
        with pytest.raises(ManifestError, match="mismatch"):
            read_report_csv(tmp_path / "report.csv", "0" * 16)

    def test_cell_failure_names_cell(self, tmp_path, monkeypatch):
        import cineclr.experiment as exp

        def boom(*a, **kw):
            raise InputDataError("synthetic failure")

        monkeypatch.setattr(exp, "finetune", boom)
        cfg = tiny_config(grid=GridConfig(pretrain_modes=("none",),
                                          input_modes=("full",), repeats=1))
        with pytest.raises(InputDataError, match="cell none/full/seed 0"):
            run_experiment(cfg, tmp_path)


class TestEmission:
    def make_report(self, tmp_path, **grid_kw):
        cfg = tiny_config(grid=GridConfig(**grid_kw))
        return run_experiment(cfg, None)

    def test_single_cell_table_bolds_its_cell(self, tmp_path):
        report = self.make_report(tmp_path, pretrain_modes=("none",),
                                  input_modes=("full",))
        path = emit_tables(report, tmp_path)
        text = path.read_text()
        assert text.count("**") >= 2          # the lone macro cell is bolded
        assert "| class | none |" in text

    def test_tie_bolding(self, tmp_path):
        from cineclr.experiment import _bold_best
        cells = _bold_best({"a": 0.5, "b": 0.5, "c": 0.25})
        assert cells["a"].startswith("**") and cells["b"].startswith("**")
        assert not cells["c"].startswith("**")

    def test_convergence_plot_contents(self, tmp_path):
        flat = TrainCurve(val_macro_auc=[0.7, 0.7, 0.7])
        rising = TrainCurve(val_macro_auc=[0.5, 0.8, 0.9])
        path = emit_convergence_plot([flat, rising], ["flat", "rising"],
                                     tmp_path / "c.svg")
        root = ET.parse(path).getroot()
        ns = "{http://www.w3.org/2000/svg}"
        polys = root.findall(f"{ns}polyline")
        assert len(polys) == 2
        ys = {float(pt.split(",")[1]) for pt in polys[0].get("points").split()}
        assert len(ys) == 1                    # flat curve -> horizontal line
        labels = [t.text for t in root.findall(f"{ns}text")]
        assert "flat" in labels and "rising" in labels

    def test_convergence_plot_rejects_empty(self, tmp_path):
        with pytest.raises(InputDataError):
            emit_convergence_plot([], [], tmp_path / "x.svg")
        with pytest.raises(InputDataError):
            emit_convergence_plot([TrainCurve()], ["empty"], tmp_path / "x.svg")

    def test_epochs_to_fraction(self):
        assert epochs_to_fraction_of_final([0.2, 0.5, 0.82, 0.9]) == 3
        assert epochs_to_fraction_of_final([0.9]) == 1
        with pytest.raises(InputDataError):
            epochs_to_fraction_of_final([])


class TestCLI:
    def run_cli(self, *argv):
        from cineclr.cli import main
        return main(list(argv))

    @pytest.fixture()
    def cfg_file(self, tmp_path):
        cfg = tiny_config(grid=GridConfig(pretrain_modes=("none", "full-sscl"),
                                          input_modes=("full",), repeats=1))
        p = tmp_path / "cfg.json"
        dump_config(cfg, p)
        return p

    def test_gen_phantoms_and_proxy(self, tmp_path, cfg_file):
        assert self.run_cli("gen-phantoms", "--config", str(cfg_file),
                            "--out", str(tmp_path / "ph")) == 0
        assert (tmp_path / "ph" / "manifest.csv").is_file()
        assert self.run_cli("gen-proxy", "--config", str(cfg_file),
                            "--out", str(tmp_path / "px")) == 0
        assert len(list((tmp_path / "px").glob("*.cmrt"))) == 12

    def test_experiment_and_report(self, tmp_path, cfg_file):
        out = tmp_path / "exp"
        assert self.run_cli("experiment", "--config", str(cfg_file),
                            "--out", str(out)) == 0
        assert (out / "report.csv").is_file()
        assert self.run_cli("report", "--config", str(cfg_file),
                            "--out", str(out)) == 0

    def test_pretrain_finetune_evaluate(self, tmp_path, cfg_file):
        assert self.run_cli("pretrain", "--config", str(cfg_file),
                            "--out", str(tmp_path)) == 0
        ckpt = tmp_path / "full-sscl.clrw"
        assert ckpt.is_file()
        assert self.run_cli("finetune", "--config", str(cfg_file),
                            "--checkpoint", str(ckpt), "--out", str(tmp_path)) == 0
        clf = tmp_path / "classifier.clrw"
        assert clf.is_file()
        assert self.run_cli("evaluate", "--config", str(cfg_file),
                            "--checkpoint", str(clf)) == 0

    def test_bad_config_is_a_clean_error(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text('{"ntxent": {"temperature": -3}}')
        assert self.run_cli("experiment", "--config", str(p)) == 2
        assert "ntxent.temperature" in capsys.readouterr().err
