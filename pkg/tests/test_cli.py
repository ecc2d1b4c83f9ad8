import json

import pytest

from gpdeform import cli
from gpdeform.errors import IllConditionedError

TINY = """\
seeds: [0]
scene: {kind: windmill, n: 12, frames: 16, occlusion: {fraction: 0.25, start: 5, end: 10}}
noise_variance: 1.0e-3
inducing: {variants: [timeseries, random], m_spatial: 3, m_time: 3}
optimizer: {iterations: 20, batch_size: 64, init_q: optimal}
gpgs: {iterations: 30, n_gp: 15, warm_iterations: 5, image_size: 16}
extrapolate: {horizons: [3], scenes: [windmill]}
uncertainty: {samples: 4, map_frames: [7], image_size: 16}
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY)
    return p


def leftovers(root):
    return [p.name for p in root.iterdir() if ".staging-" in p.name]


def test_fit_writes_artifacts(tiny, tmp_path):
    out = tmp_path / "fit"
    assert cli.main(["fit", "--config", str(tiny), "--out", str(out), "--quiet"]) == 0
    names = {p.name for p in out.iterdir()}
    assert {"fit.csv", "summary.json", "manifest.json", "config.json", "elbo_timeseries_seed0.csv",
            "inducing_random_seed0.csv", "model_timeseries_seed0.json"} <= names
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"] == [0] and manifest["command"] == "fit"
    assert manifest["files"]["fit.csv"] == cli.sha256(out / "fit.csv")
    assert "timing.log" not in manifest["files"]
    assert (out / "fit.csv").read_bytes().startswith(b"seed,variant,initial_elbo,final_elbo\r\n")
    assert not leftovers(tmp_path)


def test_seed_override(tiny, tmp_path):
    out = tmp_path / "o"
    assert cli.main(["fit", "--config", str(tiny), "--seed", "5", "--out", str(out), "--quiet"]) == 0
    assert (out / "elbo_timeseries_seed5.csv").exists()
    assert json.loads((out / "manifest.json").read_text())["seeds"] == [5]


def test_malformed_config_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("scene:\n  kind: windmill\n  wobble: 3\n")
    out = tmp_path / "out"
    assert cli.main(["fit", "--config", str(bad), "--out", str(out)]) == 2
    assert "bad.yaml:3: scene.wobble" in capsys.readouterr().err
    assert not out.exists() and not leftovers(tmp_path)


def test_horizon_zero_exit_2(tmp_path, capsys):
    bad = tmp_path / "h.yaml"
    bad.write_text("extrapolate:\n  horizons: [0]\n")
    assert cli.main(["extrapolate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "empty holdout" in capsys.readouterr().err


def test_nonempty_out_exit_2(tiny, tmp_path):
    out = tmp_path / "full"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert cli.main(["fit", "--config", str(tiny), "--out", str(out), "--quiet"]) == 2
    assert [p.name for p in out.iterdir()] == ["keep.txt"]


def test_numerical_failure_exit_3(tiny, tmp_path, monkeypatch):
    def boom(cfg, out, timing):
        (out / "partial.csv").write_text("a\r\n")
        raise IllConditionedError("ill-conditioned")

    monkeypatch.setitem(cli.COMMANDS, "fit", boom)
    out = tmp_path / "o"
    assert cli.main(["fit", "--config", str(tiny), "--out", str(out), "--quiet"]) == 3
    assert not out.exists() and not leftovers(tmp_path)


def test_fit_deterministic(tiny, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert cli.main(["fit", "--config", str(tiny), "--out", str(out), "--quiet"]) == 0
    for p in sorted(a.rglob("*")):
        if p.is_file() and p.suffix in (".csv", ".json"):
            assert p.read_bytes() == (b / p.relative_to(a)).read_bytes(), p.name


@pytest.mark.parametrize("command", ["extrapolate", "uncertainty", "gpgs"])
def test_commands_run(command, tiny, tmp_path):
    out = tmp_path / command
    assert cli.main([command, "--config", str(tiny), "--out", str(out), "--quiet"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary
    if command == "gpgs":
        report = json.loads((out / "report_lambda0.1_seed0.json").read_text())
        assert report["tau_trace"][-1] == 0.01
        assert (out / "trajectories_seed0.csv").exists() and any((out / "frames").iterdir())
    if command == "uncertainty":
        assert (out / "maps" / "uncertainty_seed0_frame7.pgm").exists()
