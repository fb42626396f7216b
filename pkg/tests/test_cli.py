import json
import math
import re

import pytest
from click.testing import CliRunner

from schelling_lab import runner
from schelling_lab.cli import main
from schelling_lab.config import EXPERIMENTS, FIELDS, ConfigError, RunConfig, flag_name, resolve
from schelling_lab.runner import SUMMARY_NAME, read_artifact, verify_artifacts


def invoke(*args, env=None):
    return CliRunner().invoke(main, [str(a) for a in args], env=env)


def test_minimal_flags_fill_defaults():
    cfg = resolve("simulate", flags={"N": "1", "M": "2", "w": "3", "R": "15", "seed": "7"})
    assert cfg.seed == (7,) and cfg.w == (3,)
    assert cfg.p == math.inf and cfg.closure == "closed" and cfg.max_events_per_node == 1000


def test_zero_width_names_the_field():
    res = invoke("simulate", "--w", 0)
    assert res.exit_code == 2
    assert "w: must be >= 1" in res.output


def test_unknown_key_reports_line(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[model]\nw = 2\nwidth = 3\n")
    with pytest.raises(ConfigError) as exc:
        resolve("simulate", p)
    assert exc.value.key == "width" and exc.value.where.endswith("c.ini:3")
    assert invoke("simulate", "--config", p).exit_code == 2


def test_misplaced_and_unparseable_values(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[run]\nw = 2\n")
    with pytest.raises(ConfigError, match="belongs in"):
        resolve("simulate", p)
    with pytest.raises(ConfigError, match="cannot parse"):
        resolve("simulate", flags={"M": "two"})


def test_flags_override_file(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("# matrix\n[run]\nseed = 0:4\n[model]\nw = 2\nR = 9  # narrow\n")
    cfg = resolve("simulate", p, {"R": "12"})
    assert cfg.seed == (0, 1, 2, 3) and cfg.w == (2,) and cfg.R == 12


def test_experiment_mismatch_rejected(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[run]\nexperiment = solve\n")
    with pytest.raises(ConfigError, match="experiment"):
        resolve("simulate", p)


def test_text_round_trip_oracle(tmp_path):
    cfg = resolve("occupation", flags={"R": "4", "h": "1/4096", "eps": "0.1,0.05", "seed": "2:5"})
    p = tmp_path / "echo.ini"
    p.write_text(cfg.to_text())
    assert resolve(None, p) == cfg


def test_preset_values_and_precedence():
    cfg = resolve("simulate", flags={"preset": "fig-2d"})
    assert cfg.N == 2 and cfg.w == (4, 8, 12)
    assert [cfg.R_for(w) for w in cfg.w] == [7, 4, 3]
    assert resolve("couple", flags={"preset": "fig-1d", "w": "50"}).w == (50,)


@pytest.mark.parametrize("experiment", EXPERIMENTS)
def test_help_lists_every_flag_with_default(experiment):
    text = invoke(experiment, "--help").output
    flat = re.sub(r"\s+", " ", text)
    for key, f in FIELDS.items():
        if key == "experiment" or experiment not in f.metadata["experiments"]:
            continue
        assert flag_name(key) in text
        shown = f.metadata["fmt"](f.default) if f.default != "" else '""'
        assert f"[default: ({shown})]" in flat.replace("( ", "(")


def test_final_configs_run_lengths(tmp_path):
    out = tmp_path / "fc"
    res = invoke("final-configs", "--preset", "fig-final-1d", "--seed", "0:4", "--out", out)
    assert res.exit_code == 0, res.output
    _, body = read_artifact(out / "final_configs.csv")
    rows = [line.split(",") for line in body.strip().splitlines()[1:]]
    assert rows and all(int(L) >= int(w) + 1 for w, _, _, _, L in rows)


def test_sawtooth_regression_artifact(tmp_path):
    out = tmp_path / "saw"
    assert invoke("solve", "--preset", "sawtooth", "--out", out).exit_code == 0
    _, body = read_artifact(out / "regression.csv")
    last = body.strip().splitlines()[-1].split(",")
    assert float(last[1]) == 1.5 and float(last[2]) <= 0.1
    summary = json.loads((out / SUMMARY_NAME).read_text())
    run = summary["results"]["runs"][0]
    assert run["scheme"] == "euler" and run["h"] == 1 / 256 and run["dt"] == 1 / 1024


def test_summary_echo_round_trips(tmp_path):
    out = tmp_path / "sim"
    assert invoke("simulate", "--w", "2,3", "--seed", "1", "--out", out).exit_code == 0
    s = json.loads((out / SUMMARY_NAME).read_text())
    cfg = RunConfig.from_dict(s["config"])
    assert cfg == resolve("simulate", flags={"w": "2,3", "seed": "1", "out": str(out)})
    assert s["config_hash"] == cfg.hash()
    assert s["rng_algorithm"].startswith("numpy.PCG64") and s["version"]
    assert s["wall_time_s"] >= 0 and s["seeds"] == [1]


def test_reruns_are_byte_identical(tmp_path):
    args = ["couple", "--w", "10,20", "--r", "4", "--seed", "0:3"]
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert invoke(*args, "--sequential", "--out", a).exit_code == 0
    assert invoke(*args, "--sequential", "--out", b).exit_code == 0
    assert invoke(*args, "--workers", 2, "--out", c).exit_code == 0
    for name in ("errors.csv", "medians.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes() == (c / name).read_bytes()


def test_hash_headers_and_tamper_detection(tmp_path):
    out = tmp_path / "shape"
    assert invoke("stable-shape", "--n", 2, "--w", 1, "--out", out).exit_code == 0
    assert verify_artifacts(out) == []
    p = out / "erosion.csv"
    p.write_text(p.read_text().replace("config_hash=", "config_hash=0", 1))
    assert verify_artifacts(out) == ["erosion.csv"]


def test_horizon_exceeded_is_inconclusive(tmp_path):
    out = tmp_path / "short"
    res = invoke("simulate", "--w", 3, "--horizon", 0.01, "--out", out)
    assert res.exit_code == 3
    s = json.loads((out / SUMMARY_NAME).read_text())
    assert s["status"] == "inconclusive" and s["inconclusive_reasons"]


def test_runtime_failure_leaves_no_output(tmp_path, monkeypatch):
    def boom(cfg):
        raise RuntimeError("disk on fire")

    monkeypatch.setitem(runner.RUNNERS, "simulate", boom)
    res = invoke("simulate", "--out", tmp_path / "x")
    assert res.exit_code == 1 and "disk on fire" in res.output
    assert list(tmp_path.iterdir()) == []


def test_refuses_to_overwrite_foreign_directory(tmp_path):
    (tmp_path / "mine.txt").write_text("keep")
    assert invoke("simulate", "--out", tmp_path).exit_code == 1
    assert (tmp_path / "mine.txt").read_text() == "keep"


def test_output_root_from_environment(tmp_path):
    res = invoke("simulate", "--w", 2, env={runner.OUTPUT_ROOT_ENV: str(tmp_path)})
    assert res.exit_code == 0
    (d,) = tmp_path.iterdir()
    assert d.name.startswith("simulate-") and (d / SUMMARY_NAME).exists()


def test_run_command_reads_experiment_from_file(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[run]\nexperiment = stable-shape\n[model]\nN = 1\nw = 1,2\n")
    out = tmp_path / "o"
    assert invoke("run", p, "--out", out).exit_code == 0
    assert "2,1,2,1" in (out / "min_diameter.csv").read_text()
