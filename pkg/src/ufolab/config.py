"""Experiment configuration: one INI document, strictly schema-checked.

Unknown sections or keys are rejected with the offending line number, so a
typo can never silently fall back to a default.  Relative paths resolve under
the UFOLAB_OUTPUT_ROOT environment variable when it is set (the working
directory otherwise) and are created at parse time.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, ContractError
from .model import ModelConfig
from .synthdata import DEFAULT_CONDITIONS, DEFAULT_JITTER, NUM_CONDITIONS
from .train import TrainConfig

OUTPUT_ROOT_ENV = "UFOLAB_OUTPUT_ROOT"


@dataclass(frozen=True)
class DataConfig:
    resolution: int = 16
    frames: int = 8
    conditions: tuple = DEFAULT_CONDITIONS
    jitter: float = DEFAULT_JITTER


@dataclass(frozen=True)
class EvalConfig:
    alphas: tuple = (0.0, 0.1, 0.2)
    seeds: tuple = tuple(range(500, 532))
    videos: int = 32


@dataclass(frozen=True)
class PathsConfig:
    checkpoints: Path = Path("checkpoints")
    reports: Path = Path("reports")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    train: TrainConfig
    data: DataConfig
    eval: EvalConfig
    paths: PathsConfig


def _int(text: str) -> int:
    return int(text.strip())


def _float(text: str) -> float:
    return float(text.strip())


def _str(text: str) -> str:
    return text.strip()


def _int_list(text: str) -> tuple:
    return tuple(int(p.strip()) for p in text.split(",") if p.strip())


def _float_list(text: str) -> tuple:
    return tuple(float(p.strip()) for p in text.split(",") if p.strip())


# section -> key -> parser; the ModelConfig/TrainConfig field names are the
# config keys, so the schema below is the whole vocabulary a file may use
_SCHEMA = {
    "model": {
        "frames": _int, "height": _int, "width": _int, "channels": _int,
        "patch": _int, "dim": _int, "heads": _int, "mlp_dim": _int,
        "blocks": _int, "cond_vocab": _int, "timesteps": _int,
        "schedule": _str, "fps": _float,
    },
    "train": {
        "steps": _int, "batch_size": _int, "lr_peak": _float,
        "warmup_steps": _int, "alpha_train": _float, "loss_lambda": _float,
        "seed": _int,
    },
    "data": {
        "resolution": _int, "frames": _int, "conditions": _int_list,
        "jitter": _float,
    },
    "eval": {
        "alphas": _float_list, "seeds": _int_list, "videos": _int,
    },
    "paths": {
        "checkpoints": _str, "reports": _str,
    },
}


def _line_of(lines: list[str], section: str, key: str | None = None) -> int | None:
    """Best-effort line lookup for diagnostics (1-based)."""
    in_section = False
    for i, raw in enumerate(lines, start=1):
        stripped = raw.strip()
        if stripped.startswith("["):
            if key is None and stripped == f"[{section}]":
                return i
            in_section = stripped == f"[{section}]"
        elif key is not None and in_section:
            head = stripped.split("=", 1)[0].split(":", 1)[0].strip()
            if head == key:
                return i
    return None


def _loc(lines, section, key=None) -> str:
    line = _line_of(lines, section, key)
    return f" (line {line})" if line is not None else ""


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or ".")


def resolve_path(p) -> Path:
    """Anchor relative paths at the output root; absolute paths pass through."""
    p = Path(p)
    return p if p.is_absolute() else output_root() / p


def load_config(path) -> ExperimentConfig:
    """Parse and validate one experiment INI file.

    Raises ConfigError naming the offending section/key and line for unknown
    or ill-typed entries, and for cross-field contradictions (data geometry
    that does not match the model, condition ids outside the generator or the
    model's vocabulary, mismatched seed/video counts).
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    lines = text.splitlines()
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc

    values: dict[str, dict] = {section: {} for section in _SCHEMA}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]{_loc(lines, section)}")
        for key, raw in parser.items(section):
            parse = _SCHEMA[section].get(key)
            if parse is None:
                raise ConfigError(
                    f"unknown key '{key}' in [{section}]{_loc(lines, section, key)}")
            try:
                values[section][key] = parse(raw)
            except ValueError as exc:
                raise ConfigError(
                    f"bad value for '{key}' in [{section}]"
                    f"{_loc(lines, section, key)}: {exc}") from exc

    def build(section, factory):
        try:
            return factory(**values[section])
        except (ContractError, TypeError) as exc:
            raise ConfigError(f"invalid [{section}] settings: {exc}") from exc

    model = build("model", ModelConfig)
    train = build("train", TrainConfig)
    data = build("data", DataConfig)
    evaluation = build("eval", EvalConfig)

    if data.resolution != model.height or data.resolution != model.width:
        raise ConfigError(
            f"data resolution {data.resolution} does not match model geometry "
            f"{model.height}x{model.width}")
    if data.frames != model.frames:
        raise ConfigError(
            f"data frames {data.frames} does not match model frames {model.frames}")
    if not data.conditions:
        raise ConfigError("data conditions must list at least one id")
    bad = [c for c in data.conditions if not 0 <= c < NUM_CONDITIONS]
    if bad:
        raise ConfigError(f"condition ids {bad} outside [0, {NUM_CONDITIONS})")
    over = [c for c in data.conditions if c >= model.cond_vocab]
    if over:
        raise ConfigError(
            f"condition ids {over} exceed the model's cond_vocab {model.cond_vocab}")
    if not 0.0 <= data.jitter <= 0.1:
        raise ConfigError(f"data jitter must lie in [0, 0.1], got {data.jitter}")

    if not evaluation.alphas:
        raise ConfigError("eval alphas must list at least one intensity")
    bad_a = [a for a in evaluation.alphas if not 0.0 <= a <= 1.0]
    if bad_a:
        raise ConfigError(f"eval alphas {bad_a} outside [0, 1]")
    if not evaluation.seeds:
        raise ConfigError("eval seeds must list at least one seed")
    if len(set(evaluation.seeds)) != len(evaluation.seeds):
        raise ConfigError("eval seeds must be distinct (matched-seed protocol)")
    if evaluation.videos != len(evaluation.seeds):
        raise ConfigError(
            f"eval videos = {evaluation.videos} but {len(evaluation.seeds)} seeds given")

    raw_paths = values["paths"]
    paths = PathsConfig(
        checkpoints=resolve_path(raw_paths.get("checkpoints", "checkpoints")),
        reports=resolve_path(raw_paths.get("reports", "reports")),
    )
    for p in (paths.checkpoints, paths.reports):
        p.mkdir(parents=True, exist_ok=True)

    return ExperimentConfig(model=model, train=train, data=data,
                            eval=evaluation, paths=paths)
