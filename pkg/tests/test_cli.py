import json
import os

import pytest

from kinetic_cycles.cli import build_parser, flag_assignments, run
from kinetic_cycles.config_classes import ENV_PREFIX


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for name in list(os.environ):
        if name.startswith(ENV_PREFIX):
            monkeypatch.delenv(name)


@pytest.mark.parametrize("argv", [
    ["run", "everything"],
    ["run", "cycle", "--set", "no-equals-sign"],
    ["run", "cycle", "--set", "run.speed=1"],
    ["run", "cycle", "--domain", "cube"],
    ["run", "cycle", "--workers", "0"],
    ["run", "cycle", "--config", "/nonexistent/kinetic.ini"],
    [],
])
def test_configuration_errors_exit_with_2(argv, capsys):
    assert run(argv) == 2
    assert "configuration error:" in capsys.readouterr().err


def test_environment_errors_exit_with_2(monkeypatch, capsys):
    monkeypatch.setenv(f"{ENV_PREFIX}RUN__SEED", "many")
    assert run(["run", "cycle"]) == 2
    assert f"{ENV_PREFIX}RUN__SEED" in capsys.readouterr().err


def test_flags_become_assignments():
    args = build_parser().parse_args(
        ["run", "cycle", "--seed", "4", "--domain", "ellipsoid:2,1,1", "--set", "cycle.t=2", "--out", "results"]
    )
    assert flag_assignments(args) == [
        "cycle.t=2", "run.experiment=cycle", "run.seed=4", "run.out=results",
        "domain.name=ellipsoid", "domain.params=2,1,1",
    ]


def test_plot_command(tmp_path):
    scan = tmp_path / "scan.csv"
    scan.write_text("alpha,sup_dnX\n0.001,30\n0.01,10\n0.1,3\n")
    output = tmp_path / "scan.png"
    assert run(["plot", str(scan), "--y", "sup_dnX", "--output", str(output)]) == 0
    assert output.exists()


@pytest.mark.slow
def test_blowup_scan_from_the_command_line(tmp_path):
    out = tmp_path / "results"
    code = run(["run", "blowup-scan", "--quick", "--out", str(out), "--seed", "2",
                "--set", "blowup.points=6", "--set", "blowup.window_positions=2"])
    assert code in (0, 1)
    with open(out / "run_0" / "summary.json") as f:
        summary = json.load(f)
    assert summary["seed"] == 2
    assert summary["quick"]
    assert summary["passed"] == (code == 0)
    assert (out / "run_0" / "blowup_scan.csv").exists()
