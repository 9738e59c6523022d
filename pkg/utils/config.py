"""
Run configuration: the RunConfig tree and flat `key = value` config files
"""

import dataclasses
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Union, get_args, get_origin, get_type_hints

from models import ConfigError, InvalidInputError
from segmentation.bboxlabels import BboxSegConfig
from segmentation.data import GenConfig
from segmentation.densecrf import CrfParams
from segmentation.estep import AdaptParams
from segmentation.net import NetConfig
from segmentation.train import EStepConfig, TrainConfig

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = "resolved_config.txt"
TOP_LEVEL_KEYS = ("seed", "threads", "out")

# Fields that are not settable per section: seeds come from the top-level seed,
# the void label from eval.void_label
SECTION_EXCLUDED = {
    "gen": {"seed"},
    "net": {"seed"},
    "train": {"seed", "void_label"},
}


class ValidationHelper:
    """Helper functions for config value validation"""

    @staticmethod
    def validate_integer(value: str, field_name: str = "Value") -> int:
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{field_name} must be a valid integer, got '{value}'")

    @staticmethod
    def validate_number(value: str, field_name: str = "Value") -> float:
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{field_name} must be a valid number, got '{value}'")

    @staticmethod
    def validate_positive_integer(value: str, field_name: str = "Value") -> int:
        num = ValidationHelper.validate_integer(value, field_name)
        if num < 1:
            raise ConfigError(f"{field_name} must be at least 1, got {num}")
        return num

    @staticmethod
    def validate_not_empty(value: str, field_name: str = "Field") -> str:
        if not value or not value.strip():
            raise ConfigError(f"{field_name} cannot be empty")
        return value.strip()

    @staticmethod
    def validate_boolean(value: str, field_name: str = "Value") -> bool:
        lowered = value.strip().lower()
        if lowered in ("true", "yes", "1", "on"):
            return True
        if lowered in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{field_name} must be true or false, got '{value}'")


@dataclass(frozen=True)
class EvalConfig:
    void_label: Optional[int] = None
    crf: bool = False


@dataclass(frozen=True)
class RunConfig:
    """
    Every tunable of a run; sections mirror the module configs

    Args:
        seed: master seed, injected into gen, net and train
        threads: worker threads (results do not depend on it)
        out: output directory
    """
    seed: int = 0
    threads: int = 1
    out: str = "out"
    gen: GenConfig = field(default_factory=GenConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    estep: EStepConfig = field(default_factory=EStepConfig)
    crf: CrfParams = field(default_factory=CrfParams)
    bbox_seg: BboxSegConfig = field(default_factory=BboxSegConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def gen_config(self) -> GenConfig:
        return replace(self.gen, seed=self.seed)

    def net_config(self, num_labels: Optional[int] = None) -> NetConfig:
        if num_labels is None:
            return replace(self.net, seed=self.seed)
        return replace(self.net, seed=self.seed, num_labels=num_labels)

    def bbox_seg_config(self) -> BboxSegConfig:
        return replace(self.bbox_seg, crf=self.crf)

    def train_config(self, num_labels: Optional[int] = None) -> TrainConfig:
        """TrainConfig with the estep, CRF, Bbox-Seg and net sections folded in"""
        return replace(self.train, seed=self.seed, void_label=self.eval.void_label,
                       estep=self.estep, crf=self.crf,
                       bbox_seg=self.bbox_seg_config(), net=self.net_config(num_labels))


SECTIONS = tuple(f.name for f in dataclasses.fields(RunConfig) if f.name not in TOP_LEVEL_KEYS)


def _section_leaves(section: str) -> Dict[str, object]:
    """Settable leaf fields of a section with their type hints"""
    cls = {f.name: f for f in dataclasses.fields(RunConfig)}[section].default_factory
    hints = get_type_hints(cls)
    excluded = SECTION_EXCLUDED.get(section, set())
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)
            if f.name not in excluded and not dataclasses.is_dataclass(hints[f.name])}


def known_keys() -> List[str]:
    keys = list(TOP_LEVEL_KEYS)
    for section in SECTIONS:
        keys.extend(f"{section}.{name}" for name in _section_leaves(section))
    return keys


def _parse_value(text: str, hint, key: str):
    if get_origin(hint) is Union:
        inner = [a for a in get_args(hint) if a is not type(None)][0]
        if text.strip().lower() in ("", "none"):
            return None
        return _parse_value(text, inner, key)
    if get_origin(hint) is tuple:
        inner = get_args(hint)[0]
        items = [item.strip() for item in text.split(",") if item.strip()]
        return tuple(_parse_value(item, inner, key) for item in items)
    if hint is bool:
        return ValidationHelper.validate_boolean(text, key)
    if hint is int:
        return ValidationHelper.validate_integer(text.strip(), key)
    if hint is float:
        return ValidationHelper.validate_number(text.strip(), key)
    return ValidationHelper.validate_not_empty(text, key)


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ==================== PARSING ====================

def parse_assignment(text: str, origin: str = "--set") -> tuple:
    """'key = value' -> (key, value); raises ConfigError without '='"""
    if "=" not in text:
        raise ConfigError(f"{origin}: expected 'key = value', got '{text.strip()}'")
    key, value = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"{origin}: missing key in '{text.strip()}'")
    return key, value.strip()


def read_config_file(path: str) -> Dict[str, str]:
    """Raw key/value pairs of a config file; later lines override earlier ones"""
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")
    values: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, value = parse_assignment(line, f"{path}:{number}")
            values[key] = value
    return values


def build_config(values: Dict[str, str]) -> RunConfig:
    """
    RunConfig from raw string values keyed by dotted names

    Raises:
        ConfigError: unknown key, unparsable value or a violated section invariant
    """
    unknown = sorted(set(values) - set(known_keys()))
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")

    top = {}
    if "seed" in values:
        top["seed"] = ValidationHelper.validate_integer(values["seed"], "seed")
    if "threads" in values:
        top["threads"] = ValidationHelper.validate_positive_integer(values["threads"], "threads")
    if "out" in values:
        top["out"] = ValidationHelper.validate_not_empty(values["out"], "out")

    defaults = RunConfig()
    sections = {}
    for section in SECTIONS:
        leaves = _section_leaves(section)
        changes = {name: _parse_value(values[f"{section}.{name}"], hint, f"{section}.{name}")
                   for name, hint in leaves.items() if f"{section}.{name}" in values}
        if changes:
            try:
                sections[section] = replace(getattr(defaults, section), **changes)
            except InvalidInputError as e:
                raise ConfigError(f"[{section}] {e}")
    cfg = replace(defaults, **top, **sections)
    try:
        AdaptParams(cfg.estep.rho_fg, cfg.estep.rho_bg)
    except InvalidInputError as e:
        raise ConfigError(f"[estep] {e}")
    return cfg


def load_config(path: Optional[str] = None, overrides: Iterable[str] = (),
                flags: Optional[Dict[str, object]] = None) -> RunConfig:
    """
    Resolve a RunConfig: defaults < config file < --set overrides < flags

    Args:
        path: optional config file
        overrides: 'key=value' strings
        flags: dotted key -> value for dedicated command-line flags (None entries skipped)
    """
    values: Dict[str, str] = read_config_file(path) if path else {}
    for text in overrides:
        key, value = parse_assignment(text)
        values[key] = value
    for key, value in (flags or {}).items():
        if value is not None:
            values[key] = _format_value(value)
    return build_config(values)


def format_config(cfg: RunConfig) -> str:
    """Every settable key with its resolved value, one `key = value` per line"""
    lines = [f"{key} = {_format_value(getattr(cfg, key))}" for key in TOP_LEVEL_KEYS]
    for section in SECTIONS:
        block = getattr(cfg, section)
        lines.extend(f"{section}.{name} = {_format_value(getattr(block, name))}"
                     for name in _section_leaves(section))
    return "\n".join(lines) + "\n"


def write_resolved_config(cfg: RunConfig, directory: Optional[str] = None) -> str:
    directory = directory or cfg.out
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, RESOLVED_CONFIG_NAME)
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_config(cfg))
    logger.debug("resolved config written to %s", path)
    return path
