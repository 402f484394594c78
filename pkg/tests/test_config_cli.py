import json
from dataclasses import replace

import numpy as np
import pytest

from parslab import cli_runner
from parslab.cli_runner import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_DIMENSION,
    EXIT_DIVERGED,
    EXIT_ENV,
    EXIT_INTERNAL,
    EXIT_IO,
    EXIT_OK,
    EXIT_USAGE,
    ablation_config,
    execute,
    exit_code_for,
    main,
    read_manifest,
)
from parslab.config import ConfigError, RunConfig, parse_config, parse_config_text, serialize_config, with_seed
from parslab.data_store import DatasetParseError, EmptySourceError
from parslab.diagnostics import UnsupportedDimensionError
from parslab.pars_trainer import DivergenceError, ParsConfig
from parslab.toy_envs import InfeasibleActionError
from parslab.reports import color_ramp, svg_heatmap, write_rows_csv


# ---------------------------------------------------------------------------
# config files


def test_empty_config_is_all_defaults():
    assert parse_config_text("") == RunConfig()
    assert parse_config_text("# only a comment\n\n") == RunConfig()


def test_gamma_out_of_range_names_the_key():
    with pytest.raises(ConfigError) as exc:
        parse_config_text("[pars]\nc_reward = 10\ngamma = 1.5\n")
    assert exc.value.key == "gamma" and exc.value.line == 3
    assert "gamma" in str(exc.value) and "line 3" in str(exc.value)


def test_unknown_key_and_section_are_rejected():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("[pars]\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError):
        parse_config_text("[optimizer]\nlr = 0.1\n")


def test_type_mismatch_is_reported():
    with pytest.raises(ConfigError, match="max_gradient_steps"):
        parse_config_text("[pars]\nmax_gradient_steps = many\n")


def test_values_are_converted():
    cfg = parse_config_text(
        "[run]\nseed = 7\n[pars]\nhidden_dims = 32, 16\ncritic_ln = false\nalpha = 0.25\n"
        "[env]\nenv_id = line_walk_1d\nstep_scale = 0.1\n[behavior]\ncenters = 0.6; -0.6\n"
    )
    assert cfg.run.seed == 7
    assert cfg.pars.hidden_dims == (32, 16) and cfg.pars.critic_ln is False and cfg.pars.alpha == 0.25
    assert cfg.env.overrides()["step_scale"] == 0.1
    assert cfg.behavior.parsed_centers() == ((0.6,), (-0.6,))


def test_round_trip_is_identity(tmp_path):
    cfg = parse_config_text("[pars]\nc_reward = 1000\nalpha = 0.1\nhidden_dims = 64, 64\n[env]\nwalls = \n[tabular]\ngamma = 0.5\n")
    text = serialize_config(cfg)
    again = parse_config_text(text)
    assert again == cfg
    assert serialize_config(again) == text
    p = tmp_path / "c.ini"
    p.write_text(text)
    assert parse_config(p) == cfg


def test_with_seed_only_changes_seed():
    cfg = RunConfig()
    assert with_seed(cfg, 5).run.seed == 5
    assert replace(with_seed(cfg, 5), run=cfg.run) == cfg


def test_ablation_variants():
    base = ParsConfig(alpha=0.5)
    assert ablation_config(base, "none", 10, 0.01).critic_ln is False
    assert ablation_config(base, "none", 10, 0.01).alpha == 0.0
    pa = ablation_config(base, "ln_pa", 1000, 0.01)
    assert pa.critic_ln and pa.alpha == 0.01 and pa.c_reward == 1000
    with pytest.raises(ValueError):
        ablation_config(base, "bn", 1, 0.01)


# ---------------------------------------------------------------------------
# exit codes


@pytest.mark.parametrize(
    "exc,code",
    [
        (ConfigError("x"), EXIT_CONFIG),
        (DatasetParseError("x"), EXIT_DATA),
        (EmptySourceError("x"), EXIT_DATA),
        (DivergenceError("x"), EXIT_DIVERGED),
        (InfeasibleActionError("x"), EXIT_ENV),
        (UnsupportedDimensionError("x"), EXIT_DIMENSION),
        (FileNotFoundError("x"), EXIT_IO),
        (KeyError("x"), EXIT_INTERNAL),
    ],
)
def test_exit_code_mapping(exc, code):
    assert exit_code_for(exc) == code


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["train-online"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE


def test_bad_config_exit_code(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[pars]\ngamma = 1.5\n")
    assert main(["gen-data", "--config", str(p), "--out", str(tmp_path / "o"), "--quiet"]) == EXIT_CONFIG


def test_missing_config_file_is_io_error(tmp_path):
    assert main(["gen-data", "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path / "o"), "--quiet"]) == EXIT_IO


def test_corrupt_dataset_is_data_error(tmp_path):
    bad = tmp_path / "d.txt"
    bad.write_text("garbage\n")
    cfg = tmp_path / "c.ini"
    cfg.write_text(f"[run]\ndataset = {bad}\n")
    assert main(["train-offline", "--config", str(cfg), "--out", str(tmp_path / "o"), "--quiet"]) == EXIT_DATA


def test_negative_seed_is_config_error(tmp_path):
    assert main(["gen-data", "--seed", "-1", "--out", str(tmp_path / "o"), "--quiet"]) == EXIT_CONFIG


# ---------------------------------------------------------------------------
# subcommands and manifests


def test_tabular_check_defaults_certify(tmp_path):
    cfg = parse_config_text("[tabular]\nn_instances = 5\ntrials = 20\n")
    execute("tabular-check", cfg, tmp_path)
    lines = (tmp_path / "certification.csv").read_text().splitlines()
    assert len(lines) == 6
    header = lines[0].split(",")
    rows = [dict(zip(header, line.split(","))) for line in lines[1:]]
    assert all(float(r["max_ratio"]) <= float(r["gamma"]) + 1e-12 and r["within_gamma"] == "1" for r in rows)


def test_gen_data_writes_dataset_and_stats(tmp_path):
    cfg = parse_config_text("[env]\nenv_id = line_walk_1d\n[behavior]\nepisodes = 2\n")
    assert main(["gen-data", "--out", str(tmp_path), "--quiet", "--seed", "3"]) == EXIT_OK
    execute("gen-data", cfg, tmp_path / "b")
    assert (tmp_path / "b" / "dataset.txt").exists()
    assert (tmp_path / "b" / "dataset_stats.csv").read_text().startswith("metric,value\n")
    man = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert man["subcommand"] == "gen-data"
    assert {a["path"] for a in man["artifacts"]} == {"dataset.txt", "dataset_stats.csv"}


def test_ablate_grid_has_one_row_per_cell(tmp_path):
    cfg = parse_config_text(
        "[ablate]\nmax_gradient_steps = 2\nhidden_dims = 4\neval_episodes = 1\n[pars]\nbatch_size = 8\n"
    )
    execute("ablate", cfg, tmp_path)
    lines = (tmp_path / "ablation_summary.csv").read_text().splitlines()
    assert len(lines) == 1 + 16
    cells = {tuple(line.split(",")[:2]) for line in lines[1:]}
    assert len(cells) == 16


def test_rerun_from_manifest_is_byte_identical(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[env]\nenv_id = line_walk_1d\n[behavior]\nepisodes = 2\n[pars]\nmax_gradient_steps = 6\nlog_interval = 3\nhidden_dims = 8\nbatch_size = 16\neval_episodes = 1\n")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train-offline", "--config", str(cfg), "--out", str(a), "--quiet"]) == EXIT_OK
    assert main(["rerun", "--manifest", str(a / "manifest.json"), "--out", str(b), "--quiet"]) == EXIT_OK
    for name in ("offline_log.csv", "checkpoint_offline.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert read_manifest(a / "manifest.json")[1] == parse_config(cfg)


def test_bad_manifest_is_config_error(tmp_path):
    p = tmp_path / "m.json"
    p.write_text("{not json")
    assert main(["rerun", "--manifest", str(p), "--out", str(tmp_path / "o"), "--quiet"]) == EXIT_CONFIG


def test_execute_rejects_unknown_subcommand(tmp_path):
    with pytest.raises(ValueError):
        execute("fly", RunConfig(), tmp_path)


def test_every_subcommand_is_registered():
    assert set(cli_runner.COMMANDS) == {"gen-data", "train-offline", "finetune", "diagnose", "didactic", "tabular-check", "ablate"}


# ---------------------------------------------------------------------------
# report writers


def test_color_ramp_endpoints():
    ramp = color_ramp()
    assert ramp[0] == "#08306b" and ramp[-1] == "#ffe500"


def test_svg_heatmap_shape():
    svg = svg_heatmap(np.arange(6.0).reshape(2, 3), cell=5, title="t")
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert svg.count("<rect") >= 6


def test_rows_csv(tmp_path):
    write_rows_csv(tmp_path / "r.csv", ["a", "b"], [[1, 0.5], ["x", float("nan")]])
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "a,b"
