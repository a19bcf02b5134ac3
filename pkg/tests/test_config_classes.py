from typing import List

import pytest

from kinetic_cycles.config_classes import (
    ENV_PREFIX, QUICK_OVERRIDES, SECTIONS, ConfigError, ExperimentConfig, apply_assignments, apply_environment,
    apply_ini, coerce, load_config, validate,
)


def test_defaults():
    config = load_config(environ={})
    assert config.run.experiment == "all"
    assert config.run.workers == 1
    assert config.domain.name == "quartic"
    assert config.nonlocal_.betas == [0.75, 1.0, 1.25]
    assert config.diffuse.deltas[0] == 0.125
    assert set(config.as_dict()) == set(SECTIONS)


@pytest.mark.parametrize("text, annotation, expected", [
    ("42", int, 42),
    ("1_000", int, 1000),
    ("2e-3", float, 0.002),
    ("yes", bool, True),
    ("Off", bool, False),
    (" sphere ", str, "sphere"),
    ("0.5, 1.0,", List[float], [0.5, 1.0]),
    ("sphere,disk", List[str], ["sphere", "disk"]),
])
def test_coerce(text, annotation, expected):
    assert coerce(text, annotation) == expected


def test_coerce_rejects_bad_booleans():
    with pytest.raises(ValueError):
        coerce("maybe", bool)


def test_ini_file(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(
        "[run]\n"
        "experiment = cycle\n"
        "seed = 9  # inline comment\n"
        "\n"
        "[nonlocal]\n"
        "betas = 0.8, 1.2\n"
    )
    config = load_config(str(path), environ={})
    assert config.run.experiment == "cycle"
    assert config.run.seed == 9
    assert config.nonlocal_.betas == [0.8, 1.2]


def test_ini_errors_name_the_line():
    text = "[run]\nseed = 1\nworkers = many\n"
    with pytest.raises(ConfigError, match=r"run.ini:3"):
        apply_ini(ExperimentConfig(), text, source="run.ini")


@pytest.mark.parametrize("text, message", [
    ("[telemetry]\nrate = 1\n", "unknown section"),
    ("[run]\nspeed = 1\n", "unknown key 'speed'"),
    ("seed = 1\n", "run.ini"),
])
def test_ini_rejects_unknown_entries(text, message):
    with pytest.raises(ConfigError, match=message):
        apply_ini(ExperimentConfig(), text, source="run.ini")


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent/kinetic.ini", environ={})


def test_environment_variables():
    environ = {f"{ENV_PREFIX}RUN__SEED": "5", f"{ENV_PREFIX}NONLOCAL__KAPPA": "0.5", "HOME": "/root",
               f"{ENV_PREFIX}IGNORED": "x"}
    config = apply_environment(ExperimentConfig(), environ)
    assert config.run.seed == 5
    assert config.nonlocal_.kappa == 0.5


def test_assignments():
    config = apply_assignments(ExperimentConfig(), ["cycle.bc=bounce-back", "cycle.x = 0.1, 0.2, 0.3"])
    assert config.cycle.bc == "bounce-back"
    assert config.cycle.x == [0.1, 0.2, 0.3]
    with pytest.raises(ConfigError, match="section.key=value"):
        apply_assignments(ExperimentConfig(), ["seed=3"])


def test_precedence(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[run]\nseed = 1\nworkers = 2\nlog_level = DEBUG\n\n[collision]\nsamples = 123\n")
    config = load_config(
        str(path),
        environ={f"{ENV_PREFIX}RUN__SEED": "2", f"{ENV_PREFIX}RUN__WORKERS": "3"},
        assignments=["run.seed=3"],
        quick=True,
    )
    assert config.run.seed == 3
    assert config.run.workers == 3
    assert config.run.log_level == "DEBUG"
    # the file beats --quick
    assert config.collision.samples == 123
    assert config.collision.velocities == QUICK_OVERRIDES["collision"]["velocities"]
    assert config.run.quick


def test_ini_echo_reloads_to_the_same_hash():
    config = apply_assignments(ExperimentConfig(), ["run.seed=17", "blowup.anchor_angle=0.3"])
    echoed = apply_ini(ExperimentConfig(), config.to_ini())
    assert echoed == config
    assert echoed.config_hash() == config.config_hash()
    assert config.to_ini().startswith(f"# config hash {config.config_hash()}")


def test_hash_changes_with_the_configuration():
    assert ExperimentConfig().config_hash() != apply_assignments(ExperimentConfig(), ["run.seed=1"]).config_hash()


@pytest.mark.parametrize("assignment, message", [
    ("run.experiment=everything", "unknown experiment"),
    ("run.workers=0", "workers"),
    ("nonlocal.betas=0.5, 1.0", "betas"),
    ("nonlocal.decay_rate=-1.0", "decay_rate"),
    ("collision.kernel_kappa=1.5", "kernel_kappa"),
    ("diffuse.deltas=0.1, 0.2", "decreasing"),
])
def test_validation(assignment, message):
    with pytest.raises(ConfigError, match=message):
        validate(apply_assignments(ExperimentConfig(), [assignment]))
