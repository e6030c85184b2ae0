"""Experiment configuration: flat sectioned key-value files.

Grammar: INI-style sections of ``key = value`` lines. Recognized sections are
[experiment], [dataset], [partition], [model], [federation], [fedprox], [dnc],
plus an informational [run] section that manifests carry and parsing ignores.
Unknown sections or keys are errors that name the offender. Re-serializing a
resolved config and parsing it again yields an identical config, which is what
makes run manifests replayable.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError
from .models import PRESET_PARAM_LAYERS, PRESETS

ALGORITHMS = ("fedavg", "fedprox", "dnc")
DATASET_KINDS = ("synthetic_images", "cifar10", "role_text")
SCHEMES = ("color_skew", "class_imbalance", "label_exclusive", "by_group")


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic_images"
    train_samples: int = 1600
    test_samples: int = 400
    num_classes: int = 10
    image_size: int = 16
    noise: float = 0.12
    train_files: str = ""
    test_files: str = ""
    num_roles: int = 12
    chars_per_role: int = 2400
    vocab: str = "abcdefghijklmnop"
    test_fraction: float = 0.2


@dataclass(frozen=True)
class PartitionConfig:
    scheme: str
    skew_fraction: float = 0.95
    num_collaborators: int = 5
    alpha: float = 0.5
    min_points: int = 200
    sample_count: int = 8


@dataclass(frozen=True)
class FederationRunConfig:
    rounds: int = 18
    eta: float = 0.001
    decay: float = 0.9
    local_epochs: int = 20
    batch_size: int = 32
    participants_per_round: int = 0  # 0 = every collaborator
    weighting: str = "uniform"


@dataclass(frozen=True)
class DncRunConfig:
    prepass_rounds: int = 5
    diagnostic_rounds: int = 3
    metric: str = "cosine"
    knee_ratio: float = 2.0
    flat_tolerance: float = 1.5
    feature_epochs: int = 20
    finetune_epochs: int = 4
    finetune_eta_scale: float = 0.5
    first_mode: str = "feature"
    force_split: str = "none"
    transfer_matched: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    algorithm: str = "dnc"
    seed: int = 0
    out: str = ""
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=lambda: PartitionConfig("color_skew"))
    model_preset: str = ""
    federation: FederationRunConfig = field(default_factory=FederationRunConfig)
    fedprox_mu: float = 0.01
    dnc: DncRunConfig = field(default_factory=DncRunConfig)

    def num_collaborators(self) -> int:
        """Collaborator count implied by the partition scheme."""
        scheme = self.partition.scheme
        if scheme == "color_skew":
            return 2
        if scheme == "class_imbalance":
            return self.partition.num_collaborators
        if scheme == "label_exclusive":
            return self.num_classes()
        return self.partition.sample_count

    def num_classes(self) -> int:
        if self.dataset.kind == "role_text":
            return len(self.dataset.vocab)
        if self.dataset.kind == "cifar10":
            return 10
        return self.dataset.num_classes

    def participants(self) -> int:
        k = self.federation.participants_per_round
        return self.num_collaborators() if k == 0 else k


def _coerce(section: str, key: str, value: str, target_type: type):
    try:
        if target_type is bool:
            low = value.strip().lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(value)
        return target_type(value)
    except ValueError:
        raise ConfigurationError(
            f"[{section}] {key}: cannot parse '{value}' as {target_type.__name__}"
        ) from None


def _parse_section(parser: configparser.ConfigParser, section: str, cls, **required):
    """Build a dataclass from one section, erroring on unknown keys."""
    defaults = cls(**required)
    known = {f.name: type(getattr(defaults, f.name)) for f in fields(cls)}
    values = dict(required)
    if parser.has_section(section):
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigurationError(f"unknown key '{key}' in section [{section}]")
            values[key] = _coerce(section, key, raw, known[key])
    return cls(**values)


def _require(parser: configparser.ConfigParser, section: str, key: str) -> str:
    if not parser.has_section(section) or key not in parser[section]:
        raise ConfigurationError(f"missing required key '{key}' in section [{section}]")
    return parser[section][key]


def _check_range(name: str, value, low=None, high=None, choices=None) -> None:
    if choices is not None and value not in choices:
        raise ConfigurationError(f"{name} must be one of {', '.join(choices)}; got '{value}'")
    if low is not None and value < low:
        raise ConfigurationError(f"{name} must be >= {low}; got {value}")
    if high is not None and value > high:
        raise ConfigurationError(f"{name} must be <= {high}; got {value}")


RECOGNIZED_SECTIONS = ("experiment", "dataset", "partition", "model", "federation",
                       "fedprox", "dnc", "run")


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigurationError(f"{source}: {exc}") from None
    for section in parser.sections():
        if section not in RECOGNIZED_SECTIONS:
            raise ConfigurationError(f"unknown section [{section}]")

    exp_known = ("name", "algorithm", "seed", "out")
    if parser.has_section("experiment"):
        for key in parser["experiment"]:
            if key not in exp_known:
                raise ConfigurationError(f"unknown key '{key}' in section [experiment]")
    name = _require(parser, "experiment", "name")
    algorithm = parser.get("experiment", "algorithm", fallback="dnc")
    seed = _coerce("experiment", "seed", parser.get("experiment", "seed", fallback="0"), int)
    out = parser.get("experiment", "out", fallback="")

    dataset = _parse_section(parser, "dataset", DatasetConfig)
    scheme = _require(parser, "partition", "scheme")
    partition = _parse_section(parser, "partition", PartitionConfig, scheme=scheme)

    model_default = "char_mlp" if dataset.kind == "role_text" else "desk_cnn"
    model_known = ("preset",)
    preset = model_default
    if parser.has_section("model"):
        for key in parser["model"]:
            if key not in model_known:
                raise ConfigurationError(f"unknown key '{key}' in section [model]")
        preset = parser.get("model", "preset", fallback=model_default)

    federation = _parse_section(parser, "federation", FederationRunConfig)
    fedprox_mu = 0.01
    if parser.has_section("fedprox"):
        for key in parser["fedprox"]:
            if key != "mu":
                raise ConfigurationError(f"unknown key '{key}' in section [fedprox]")
        fedprox_mu = _coerce("fedprox", "mu", parser.get("fedprox", "mu", fallback="0.01"), float)
    dnc = _parse_section(parser, "dnc", DncRunConfig)

    cfg = ExperimentConfig(
        name=name,
        algorithm=algorithm,
        seed=seed,
        out=out or f"runs/{name}",
        dataset=dataset,
        partition=partition,
        model_preset=preset,
        federation=federation,
        fedprox_mu=fedprox_mu,
        dnc=dnc,
    )
    validate_config(cfg)
    return cfg


def parse_config(path: str | Path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Parse and validate a config file; overrides replace [experiment] keys."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    cfg = parse_config_text(text, source=str(path))
    if overrides:
        updates = {}
        if "seed" in overrides:
            updates["seed"] = _coerce("experiment", "seed", overrides["seed"], int)
        if "out" in overrides:
            updates["out"] = overrides["out"]
        if "algo" in overrides:
            updates["algorithm"] = overrides["algo"]
        cfg = ExperimentConfig(**{**_asdict_shallow(cfg), **updates})
        validate_config(cfg)
    return cfg


def _asdict_shallow(cfg: ExperimentConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def validate_config(cfg: ExperimentConfig) -> None:
    _check_range("[experiment] algorithm", cfg.algorithm, choices=ALGORITHMS)
    _check_range("[experiment] seed", cfg.seed, low=0)
    if not cfg.name:
        raise ConfigurationError("[experiment] name must not be empty")

    d = cfg.dataset
    _check_range("[dataset] kind", d.kind, choices=DATASET_KINDS)
    if d.kind == "synthetic_images":
        _check_range("[dataset] train_samples", d.train_samples, low=d.num_classes)
        _check_range("[dataset] test_samples", d.test_samples, low=1)
        _check_range("[dataset] num_classes", d.num_classes, low=2)
        if d.image_size < 8 or d.image_size % 8:
            raise ConfigurationError(
                f"[dataset] image_size must be a positive multiple of 8; got {d.image_size}"
            )
        _check_range("[dataset] noise", d.noise, low=1e-6)
    elif d.kind == "cifar10":
        for key, value in (("train_files", d.train_files), ("test_files", d.test_files)):
            if not value:
                raise ConfigurationError(f"[dataset] {key} required for cifar10")
            for p in value.split(","):
                if not Path(p.strip()).is_file():
                    raise ConfigurationError(f"[dataset] {key}: file not found: {p.strip()}")
    else:  # role_text
        _check_range("[dataset] num_roles", d.num_roles, low=2)
        _check_range("[dataset] chars_per_role", d.chars_per_role, low=9)
        if len(d.vocab) < 8:
            raise ConfigurationError("[dataset] vocab needs at least 8 characters")
        if not 0.0 < d.test_fraction < 1.0:
            raise ConfigurationError(
                f"[dataset] test_fraction must lie in (0, 1); got {d.test_fraction}"
            )

    p = cfg.partition
    _check_range("[partition] scheme", p.scheme, choices=SCHEMES)
    if p.scheme == "color_skew":
        if not 0.5 <= p.skew_fraction <= 1.0:
            raise ConfigurationError(
                f"[partition] skew_fraction must lie in [0.5, 1.0]; got {p.skew_fraction}"
            )
        if cfg.num_classes() % 2:
            raise ConfigurationError("[partition] color_skew needs an even class count")
    elif p.scheme == "class_imbalance":
        _check_range("[partition] num_collaborators", p.num_collaborators, low=2)
        _check_range("[partition] alpha", p.alpha, low=1e-9)
    elif p.scheme == "by_group":
        if cfg.dataset.kind != "role_text":
            raise ConfigurationError("[partition] by_group requires the role_text dataset")
        _check_range("[partition] min_points", p.min_points, low=1)
        _check_range("[partition] sample_count", p.sample_count, low=2)

    _check_range("[model] preset", cfg.model_preset, choices=tuple(PRESETS))
    if cfg.model_preset == "char_mlp" and cfg.dataset.kind != "role_text":
        raise ConfigurationError("[model] char_mlp requires the role_text dataset")
    if cfg.model_preset == "desk_cnn" and cfg.dataset.kind == "role_text":
        raise ConfigurationError("[model] desk_cnn requires an image dataset")

    f = cfg.federation
    _check_range("[federation] rounds", f.rounds, low=1)
    _check_range("[federation] eta", f.eta, low=1e-12)
    if not 0.0 < f.decay <= 1.0:
        raise ConfigurationError(f"[federation] decay must lie in (0, 1]; got {f.decay}")
    _check_range("[federation] local_epochs", f.local_epochs, low=1)
    _check_range("[federation] batch_size", f.batch_size, low=1)
    _check_range("[federation] weighting", f.weighting, choices=("uniform", "by_sample_count"))
    n = cfg.num_collaborators()
    if f.participants_per_round and not 1 <= f.participants_per_round <= n:
        raise ConfigurationError(
            f"[federation] participants_per_round {f.participants_per_round} exceeds the "
            f"{n} collaborators the partition scheme provides"
        )
    _check_range("[fedprox] mu", cfg.fedprox_mu, low=0.0)

    dn = cfg.dnc
    _check_range("[dnc] prepass_rounds", dn.prepass_rounds, low=1)
    _check_range("[dnc] diagnostic_rounds", dn.diagnostic_rounds, low=1)
    _check_range("[dnc] metric", dn.metric, choices=("norm", "cosine"))
    _check_range("[dnc] knee_ratio", dn.knee_ratio, low=1.0)
    _check_range("[dnc] flat_tolerance", dn.flat_tolerance, low=1.0)
    _check_range("[dnc] feature_epochs", dn.feature_epochs, low=1)
    _check_range("[dnc] finetune_epochs", dn.finetune_epochs, low=1)
    if dn.finetune_epochs > dn.feature_epochs:
        raise ConfigurationError(
            f"[dnc] finetune_epochs {dn.finetune_epochs} must not exceed "
            f"feature_epochs {dn.feature_epochs}"
        )
    if not 0.0 < dn.finetune_eta_scale <= 1.0:
        raise ConfigurationError(
            f"[dnc] finetune_eta_scale must lie in (0, 1]; got {dn.finetune_eta_scale}"
        )
    _check_range("[dnc] first_mode", dn.first_mode, choices=("feature", "finetune"))
    if dn.force_split not in ("none", "no_split"):
        try:
            pos = int(dn.force_split)
        except ValueError:
            raise ConfigurationError(
                f"[dnc] force_split must be 'none', 'no_split', or a layer position; "
                f"got '{dn.force_split}'"
            ) from None
        max_pos = PRESET_PARAM_LAYERS[cfg.model_preset] - 1
        if not 1 <= pos <= max_pos:
            raise ConfigurationError(
                f"[dnc] force_split {pos} outside [1, {max_pos}] for preset {cfg.model_preset}"
            )


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_config(cfg: ExperimentConfig) -> str:
    """Fully resolved config in its own file format (round-trips exactly)."""
    out = io.StringIO()

    def section(title: str, pairs: list[tuple[str, object]]) -> None:
        out.write(f"[{title}]\n")
        for key, value in pairs:
            out.write(f"{key} = {_fmt(value)}\n")
        out.write("\n")

    section("experiment", [
        ("name", cfg.name), ("algorithm", cfg.algorithm),
        ("seed", cfg.seed), ("out", cfg.out),
    ])
    section("dataset", [(f.name, getattr(cfg.dataset, f.name)) for f in fields(DatasetConfig)])
    section("partition", [(f.name, getattr(cfg.partition, f.name)) for f in fields(PartitionConfig)])
    section("model", [("preset", cfg.model_preset)])
    section("federation", [(f.name, getattr(cfg.federation, f.name))
                           for f in fields(FederationRunConfig)])
    if cfg.algorithm == "fedprox":
        section("fedprox", [("mu", cfg.fedprox_mu)])
    section("dnc", [(f.name, getattr(cfg.dnc, f.name)) for f in fields(DncRunConfig)])
    return out.getvalue()
