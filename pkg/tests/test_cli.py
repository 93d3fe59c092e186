import dataclasses
from pathlib import Path

import pytest

from sltmpc.cli import main
from sltmpc.config import ConfigError, config_hash, dump_config, load_config, load_config_text

CONFIG_PATH = Path(__file__).resolve().parents[1] / "configs" / "default.cfg"


@pytest.fixture()
def fast_config(tmp_path, cfg):
    """Preset trimmed for quick subcommand smoke runs."""
    quick = dataclasses.replace(cfg, steps=6, grid_spacing=0.5)
    path = tmp_path / "quick.cfg"
    path.write_text(dump_config(quick))
    return path


class TestConfigRoundTrip:
    def test_load_dump_idempotent(self):
        cfg1 = load_config(CONFIG_PATH)
        text1 = dump_config(cfg1)
        cfg2 = load_config_text(text1)
        assert dump_config(cfg2) == text1
        assert config_hash(cfg1) == config_hash(cfg2)

    def test_hash_tracks_content(self, cfg):
        other = dataclasses.replace(cfg, seed=cfg.seed + 1)
        assert config_hash(other) != config_hash(cfg)

    def test_general_hrep_sets_roundtrip(self):
        text = dump_config(load_config(CONFIG_PATH)).replace(
            "x_lower = -1.5 -1.5\nx_upper = 0.5 1.5\n",
            "x_normals = 1 0; -1 0; 0 1; 0 -1\nx_offsets = 0.5 1.5 1.5 1.5\n")
        cfg = load_config_text(text)
        assert not cfg.x_set.is_box
        assert dump_config(load_config_text(dump_config(cfg))) == dump_config(cfg)


class TestConfigSchemaErrors:
    def test_missing_section_named(self):
        with pytest.raises(ConfigError, match="model"):
            load_config_text("[mpc]\nhorizon = 8\n")

    def test_bad_matrix_named(self):
        text = CONFIG_PATH.read_text().replace("a = 1.05 0.25; 0 1", "a = fish")
        with pytest.raises(ConfigError, match="model.a"):
            load_config_text(text)

    def test_bad_horizon_named(self):
        text = CONFIG_PATH.read_text().replace("horizon = 8", "horizon = 1")
        with pytest.raises(ConfigError, match="horizon"):
            load_config_text(text)

    def test_bad_schedule_named(self):
        text = CONFIG_PATH.read_text().replace("schedule = 5", "schedule = sometimes")
        with pytest.raises(ConfigError, match="schedule"):
            load_config_text(text)

    def test_both_representations_rejected(self):
        text = CONFIG_PATH.read_text().replace(
            "x_lower = -1.5 -1.5",
            "x_normals = 1 0; -1 0; 0 1; 0 -1\nx_offsets = 1 1 1 1\nx_lower = -1.5 -1.5")
        with pytest.raises(ConfigError, match="x_"):
            load_config_text(text)


class TestExitCodes:
    def test_missing_config_file(self, tmp_path, capsys):
        rc = main(["simulate", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)])
        assert rc == 2
        assert "config error" in capsys.readouterr().err

    def test_malformed_config(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("[model]\na = x\n")
        rc = main(["simulate", "--config", str(bad), "--out", str(tmp_path)])
        assert rc == 2
        assert "model.a" in capsys.readouterr().err

    def test_infeasible_start_state(self, tmp_path, cfg, capsys):
        hostile = dataclasses.replace(cfg, x0=cfg.x0 * 0 + 5.0, steps=3)
        path = tmp_path / "hostile.cfg"
        path.write_text(dump_config(hostile))
        rc = main(["simulate", "--config", str(path), "--out", str(tmp_path)])
        assert rc == 3


class TestSubcommands:
    def test_simulate_writes_outputs(self, fast_config, tmp_path, capsys):
        out = tmp_path / "out"
        rc = main(["simulate", "--config", str(fast_config), "--out", str(out)])
        assert rc == 0
        assert (out / "trajectory.csv").exists()
        assert (out / "tubes.csv").exists()  # snapshot steps 1 and 5 within 6 steps

    def test_simulate_seed_override(self, fast_config, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["simulate", "--config", str(fast_config), "--out", str(out1),
                     "--seed", "3"]) == 0
        assert main(["simulate", "--config", str(fast_config), "--out", str(out2),
                     "--seed", "3"]) == 0
        t1 = (out1 / "trajectory.csv").read_text()
        t2 = (out2 / "trajectory.csv").read_text()
        # Identical except wall-clock solve times.
        strip = lambda t: ["," .join(c for i, c in enumerate(r.split(",")) if i != 10)
                           for r in t.splitlines()]
        assert strip(t1) == strip(t2)

    def test_roa_writes_csv(self, fast_config, tmp_path):
        out = tmp_path / "roa_out"
        rc = main(["roa", "--config", str(fast_config), "--out", str(out)])
        assert rc == 0
        text = (out / "roa.csv").read_text()
        assert "fixed_tube_baseline" in text and "full_sltmpc" in text

    def test_bench_writes_csv(self, fast_config, tmp_path):
        out = tmp_path / "bench_out"
        rc = main(["bench", "--config", str(fast_config), "--out", str(out),
                   "--repeats", "30"])
        assert rc == 0
        assert (out / "bench.csv").exists()

    def test_tubes_writes_csv(self, fast_config, tmp_path):
        out = tmp_path / "tubes_out"
        rc = main(["tubes", "--config", str(fast_config), "--out", str(out)])
        assert rc == 0
        text = (out / "tubes.csv").read_text()
        assert text.splitlines()[1] == "entry_id,step_i,vertex_index,vx1,vx2"

    def test_verify_passes_on_preset(self, fast_config, tmp_path, capsys):
        rc = main(["verify", "--config", str(fast_config), "--out", str(tmp_path)])
        captured = capsys.readouterr().out
        assert rc == 0
        assert "FAIL" not in captured
        assert captured.count("PASS") >= 12
