import configparser
import hashlib
import json
import os
import re
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, Iterable, List, Mapping, Optional

EXPERIMENTS = (
    "exit-time", "velocity-lemma", "cycle", "jacobian-scan",
    "nonlocal-scan", "collision-check", "diffuse-w1p", "blowup-scan",
)
ENV_PREFIX = "KCYC_"


class ConfigError(ValueError):
    def __init__(self, message="Invalid configuration"):
        super().__init__(message)


@dataclass
class RunConfig:
    experiment: str = "all"
    seed: int = 0
    workers: int = 1
    quick: bool = False
    out: str = "out"
    budget_seconds: float = 900.0 # per experiment
    log_level: str = "INFO"

@dataclass
class DomainConfig:
    name: str = "quartic"
    params: List[float] = field(default_factory=lambda: [0.1])
    boundary_band: float = 1e-10

@dataclass
class ExitTimeConfig:
    domains: List[str] = field(default_factory=lambda: ["sphere", "ellipsoid", "disk", "quartic"])
    samples: int = 100_000
    residual_tolerance: float = 1e-12
    agreement_tolerance: float = 1e-10
    derivative_states: int = 1000
    derivative_tolerance: float = 1e-4
    bound_samples: int = 10_000

@dataclass
class VelocityLemmaConfig:
    invariance_domains: List[str] = field(default_factory=lambda: ["sphere", "ellipsoid", "disk"])
    trajectories: int = 10_000
    speed: float = 1.0
    separation: float = 0.5
    horizon: float = 2.0
    alpha_floor: float = 1e-10
    invariance_tolerance: float = 1e-9
    varpi_samples: int = 100_000
    monotonicity_tolerance: float = 1e-9

@dataclass
class CycleConfig:
    bc: str = "specular"
    t: float = 3.0
    x: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    v: List[float] = field(default_factory=lambda: [1.0, 0.0, 0.0])
    s_min: float = 0.0
    disk_states: int = 1000
    bounces: int = 100
    match_tolerance: float = 1e-8
    semigroup_states: int = 200
    semigroup_tolerance: float = 1e-9
    ratio_points: int = 13
    diffuse_draws: int = 1_000_000
    sigma: float = 4.0

@dataclass
class JacobianConfig:
    alpha_min: float = 1e-6
    alpha_max: float = 1e-1
    points: int = 12
    speed: float = 1.0
    elapsed: float = 3.0
    slope_tolerance: float = 0.15
    fractions: List[float] = field(default_factory=lambda: [0.25, 0.5, 0.75])
    derivative_states: int = 1000
    derivative_tolerance: float = 1e-4
    disk_alpha_min: float = 1e-6
    disk_alpha_max: float = 1e-2
    disk_elapsed: float = 2.0
    disk_tolerance: float = 0.1
    disk_fd_states: int = 20

@dataclass
class NonlocalConfig:
    betas: List[float] = field(default_factory=lambda: [0.75, 1.0, 1.25])
    kappa: float = 1.0
    theta: float = 1.0
    r_moment: float = 0.0
    speed: float = 1.0
    xi_min: float = 1e-7
    xi_max: float = 1e-3
    xi_points: int = 9
    slope_tolerance: float = 0.05
    alpha_min: float = 1e-7
    alpha_max: float = 1e-3
    alpha_points: int = 9
    elapsed: float = 0.2
    decay_rate: float = 0.0 # 0 calibrates l on the grazing family
    calibration_states: int = 3
    spread_limit: float = 20.0
    trajectory_slope_tolerance: float = 0.07
    radial_nodes: int = 24
    angular_nodes: int = 32

@dataclass
class CollisionConfig:
    samples: int = 1_000_000
    velocities: int = 20
    v_max: float = 3.0
    sigma: float = 3.0
    perturbation: float = 0.1
    kernel_speeds: List[float] = field(default_factory=lambda: [0.0, 1.0, 2.0, 4.0, 8.0])
    kernel_kappa: float = 1.0
    zeta: float = 0.0
    theta_gauss: float = 0.1
    rho: float = 0.1
    kernel_spread: float = 10.0

@dataclass
class DiffuseConfig:
    horizon: float = 1.0
    deltas: List[float] = field(default_factory=lambda: [2.0 ** -k for k in range(3, 10)])
    nodes: int = 2000
    paths: int = 500
    time_step: float = 2e-3
    angle_step: float = 2e-3
    sigma: float = 3.0
    cauchy_relative: float = 0.05
    batch: int = 50_000
    velocity_samples: int = 64

@dataclass
class BlowupConfig:
    alpha_min: float = 1e-6
    alpha_max: float = 1e-2
    points: int = 10
    speed: float = 1.0
    elapsed: float = 2.0
    window_positions: int = 9
    anchor_angle: float = 0.7
    tolerance: float = 0.1


# section name -> dataclass, in file order
SECTIONS = {
    "run": RunConfig,
    "domain": DomainConfig,
    "exit_time": ExitTimeConfig,
    "velocity_lemma": VelocityLemmaConfig,
    "cycle": CycleConfig,
    "jacobian": JacobianConfig,
    "nonlocal": NonlocalConfig,
    "collision": CollisionConfig,
    "diffuse": DiffuseConfig,
    "blowup": BlowupConfig,
}

# Reductions applied by --quick before file, environment and flag values
QUICK_OVERRIDES = {
    "exit_time": {"samples": 5000, "derivative_states": 100, "bound_samples": 2000},
    "velocity_lemma": {"trajectories": 1000, "varpi_samples": 10_000},
    "cycle": {"disk_states": 100, "semigroup_states": 50, "diffuse_draws": 100_000},
    "jacobian": {"points": 8, "derivative_states": 100, "disk_fd_states": 5},
    "nonlocal": {"xi_points": 7, "alpha_points": 8},
    "collision": {"samples": 200_000, "velocities": 8},
    "diffuse": {"nodes": 400, "paths": 200},
    "blowup": {"points": 8},
}


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    domain: DomainConfig = field(default_factory=DomainConfig)
    exit_time: ExitTimeConfig = field(default_factory=ExitTimeConfig)
    velocity_lemma: VelocityLemmaConfig = field(default_factory=VelocityLemmaConfig)
    cycle: CycleConfig = field(default_factory=CycleConfig)
    jacobian: JacobianConfig = field(default_factory=JacobianConfig)
    nonlocal_: NonlocalConfig = field(default_factory=NonlocalConfig)
    collision: CollisionConfig = field(default_factory=CollisionConfig)
    diffuse: DiffuseConfig = field(default_factory=DiffuseConfig)
    blowup: BlowupConfig = field(default_factory=BlowupConfig)

    def section(self, name: str):
        return getattr(self, _attribute(name))

    def as_dict(self) -> Dict[str, dict]:
        return {name: asdict(self.section(name)) for name in SECTIONS}

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON of the resolved configuration."""
        canonical = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def to_ini(self) -> str:
        lines = [f"# config hash {self.config_hash()}"]
        for name in SECTIONS:
            lines.append(f"\n[{name}]")
            for item in fields(self.section(name)):
                lines.append(f"{item.name} = {_format(getattr(self.section(name), item.name))}")
        return "\n".join(lines) + "\n"


def _attribute(section: str) -> str:
    return "nonlocal_" if section == "nonlocal" else section


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ", ".join(_format(item) for item in value)
    return str(value)


def _coerce_scalar(text: str, kind):
    text = text.strip()
    if kind is bool:
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: '{text}'")
    if kind is int:
        return int(text.replace("_", ""))
    if kind is float:
        return float(text.replace("_", ""))
    return text


def coerce(text: str, annotation):
    """Convert a raw string to the type named by a dataclass annotation."""
    if typing.get_origin(annotation) in (list, List):
        (item_type,) = typing.get_args(annotation)
        return [_coerce_scalar(part, item_type) for part in text.split(",") if part.strip()]
    return _coerce_scalar(text, annotation)


def _assign(config: ExperimentConfig, section: str, key: str, text: str, origin: str) -> ExperimentConfig:
    if section not in SECTIONS:
        raise ConfigError(f"{origin}: unknown section [{section}] (valid: {', '.join(SECTIONS)})")
    current = config.section(section)
    hints = typing.get_type_hints(type(current))
    if key not in hints:
        raise ConfigError(f"{origin}: unknown key '{key}' in [{section}] (valid: {', '.join(hints)})")
    try:
        value = coerce(text, hints[key])
    except ValueError as e:
        raise ConfigError(f"{origin}: [{section}] {key} = {text!r}: {e}") from e
    return replace(config, **{_attribute(section): replace(current, **{key: value})})


def _line_numbers(text: str) -> Dict[tuple, int]:
    """(section, key) -> 1-based line number in the config file text."""
    numbers = {}
    section = None
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        header = re.match(r"^\[([^\]]+)\]", stripped)
        if header:
            section = header.group(1).strip()
            numbers.setdefault((section, None), number)
        elif section and stripped and not stripped.startswith(("#", ";")):
            key = re.split(r"[=:]", stripped, maxsplit=1)[0].strip()
            numbers.setdefault((section, key), number)
    return numbers


def apply_ini(config: ExperimentConfig, text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from e
    lines = _line_numbers(text)
    for section in parser.sections():
        for key, value in parser.items(section):
            line = lines.get((section, key), lines.get((section, None), 0))
            config = _assign(config, section, key, value, f"{source}:{line}")
    return config


def apply_environment(config: ExperimentConfig, environ: Mapping[str, str]) -> ExperimentConfig:
    """Apply KCYC_<SECTION>__<KEY> variables."""
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX) or "__" not in name:
            continue
        section, key = name[len(ENV_PREFIX):].lower().split("__", 1)
        config = _assign(config, section, key, environ[name], f"environment {name}")
    return config


def apply_assignments(config: ExperimentConfig, assignments: Iterable[str]) -> ExperimentConfig:
    """Apply section.key=value strings from the command line."""
    for assignment in assignments:
        match = re.match(r"^\s*([\w]+)\.([\w]+)\s*=(.*)$", assignment)
        if not match:
            raise ConfigError(f"--set expects section.key=value, got '{assignment}'")
        config = _assign(config, match.group(1), match.group(2), match.group(3), f"--set {assignment}")
    return config


def apply_quick(config: ExperimentConfig) -> ExperimentConfig:
    for section, values in QUICK_OVERRIDES.items():
        config = replace(config, **{_attribute(section): replace(config.section(section), **values)})
    return replace(config, run=replace(config.run, quick=True))


def validate(config: ExperimentConfig) -> ExperimentConfig:
    if config.run.experiment not in EXPERIMENTS + ("all",):
        raise ConfigError(
            f"unknown experiment '{config.run.experiment}' (valid: {', '.join(EXPERIMENTS + ('all',))})"
        )
    if config.run.workers < 1:
        raise ConfigError(f"workers must be >= 1, got {config.run.workers}")
    if not all(0.5 < beta < 1.5 for beta in config.nonlocal_.betas):
        raise ConfigError(f"[nonlocal] betas must lie in (1/2, 3/2), got {config.nonlocal_.betas}")
    if config.nonlocal_.decay_rate < 0:
        raise ConfigError(f"[nonlocal] decay_rate must be >= 0 (0 calibrates), got {config.nonlocal_.decay_rate}")
    if not 0.0 <= config.collision.kernel_kappa <= 1.0:
        raise ConfigError(f"[collision] kernel_kappa must lie in [0, 1], got {config.collision.kernel_kappa}")
    deltas = config.diffuse.deltas
    if any(later >= earlier for earlier, later in zip(deltas, deltas[1:])):
        raise ConfigError(f"[diffuse] deltas must be decreasing, got {deltas}")
    return config


def load_config(path: Optional[str] = None, environ: Optional[Mapping[str, str]] = None,
                assignments: Iterable[str] = (), quick: bool = False) -> ExperimentConfig:
    """
    Resolve the configuration: defaults < --quick < file < environment < flags.

    Raises:
        ConfigError: Unknown sections or keys, bad values, unreadable file.
    """
    config = ExperimentConfig()
    if quick:
        config = apply_quick(config)
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        config = apply_ini(config, text, source=path)
    config = apply_environment(config, os.environ if environ is None else environ)
    config = apply_assignments(config, assignments)
    return validate(config)
