#!/usr/bin/env python3
"""
Configuration loader for backbone architectures and runtime settings
"""

import os
import configparser
from pathlib import Path
from typing import Dict, Any, Optional, Union

from errors import ConfigError
from models import ArchConfig, PrecisionConfig
from utils import PoolingKind, SUPPORTED_PRECISIONS, parse_int_list, parse_shape

THREADS_ENV = "QVPR_THREADS"

FAMILIES = ("mini-mobilenet", "mini-resnet", "mini-vgg")

_MODEL_KEYS = {
    'family', 'width', 'depth', 'input', 'dim', 'pooling', 'seed',
    'bias', 'projection', 'expansion',
}
_SECTION_KEYS = {'gem': {'p'}, 'netvlad': {'clusters'}}


class ArchConfigLoader:
    """Load and validate architecture configs (INI-style key = value text)"""

    @staticmethod
    def load_config(path: Union[str, Path]) -> ArchConfig:
        """Load an architecture config file"""
        config_path = Path(path)
        if not config_path.exists():
            raise FileNotFoundError(f"Architecture config not found at: {config_path}")

        with open(config_path, 'r', encoding='utf-8') as f:
            return ArchConfigLoader.parse_config(f.read(), source=str(config_path))

    @staticmethod
    def parse_config(text: str, source: str = "<string>") -> ArchConfig:
        """Parse config text into an ArchConfig"""
        parser = configparser.ConfigParser()
        try:
            parser.read_string(text, source=source)
        except configparser.Error as e:
            raise ConfigError(f"{source}: {e}") from e

        if not parser.has_section('model'):
            raise ConfigError(f"{source}: missing [model] section")

        raw: Dict[str, Any] = {}
        for section in parser.sections():
            allowed = _MODEL_KEYS if section == 'model' else _SECTION_KEYS.get(section)
            if allowed is None:
                raise ConfigError(f"{source}: unknown section [{section}]")
            for key, value in parser.items(section):
                if key not in allowed:
                    raise ConfigError(f"{source}: unknown key '{key}' in [{section}]")
                raw[key if section == 'model' else f"{section}.{key}"] = value.strip()

        return ArchConfigLoader.from_mapping(raw, source)

    @staticmethod
    def from_mapping(raw: Dict[str, Any], source: str = "<mapping>") -> ArchConfig:
        """Build an ArchConfig from string values (config file or CLI flags)"""
        cfg = ArchConfig()
        try:
            if 'family' in raw:
                cfg.family = str(raw['family'])
            if 'width' in raw:
                cfg.width = float(raw['width'])
            if 'depth' in raw:
                cfg.depth = int(raw['depth'])
            if 'input' in raw:
                cfg.input_shape = parse_shape(str(raw['input']))
            if 'dim' in raw:
                cfg.descriptor_dim = int(raw['dim'])
            if 'pooling' in raw:
                cfg.pooling = PoolingKind(str(raw['pooling']).lower())
            if 'seed' in raw:
                cfg.seed = int(raw['seed'])
            if 'bias' in raw:
                cfg.bias = _parse_bool(raw['bias'])
            if 'projection' in raw:
                cfg.projection = _parse_bool(raw['projection'])
            if 'expansion' in raw:
                cfg.expansion = int(raw['expansion'])
            if 'gem.p' in raw:
                cfg.gem_p = float(raw['gem.p'])
            if 'netvlad.clusters' in raw:
                cfg.clusters = int(raw['netvlad.clusters'])
        except ValueError as e:
            raise ConfigError(f"{source}: {e}") from e

        ArchConfigLoader.validate(cfg, source)
        return cfg

    @staticmethod
    def validate(cfg: ArchConfig, source: str = "<config>") -> None:
        if cfg.family not in FAMILIES:
            raise ConfigError(f"{source}: unknown family '{cfg.family}' (expected one of {', '.join(FAMILIES)})")
        if cfg.width <= 0:
            raise ConfigError(f"{source}: width multiplier must be > 0, got {cfg.width}")
        if cfg.depth < 1:
            raise ConfigError(f"{source}: depth must be >= 1, got {cfg.depth}")
        if len(cfg.input_shape) != 3:
            raise ConfigError(f"{source}: input shape must be CxHxW, got {cfg.input_shape}")
        if cfg.descriptor_dim < 1:
            raise ConfigError(f"{source}: descriptor dim must be >= 1")
        if cfg.expansion < 1:
            raise ConfigError(f"{source}: expansion must be >= 1")
        if cfg.gem_p < 1:
            raise ConfigError(f"{source}: GeM p must be >= 1, got {cfg.gem_p}")
        if cfg.clusters < 1:
            raise ConfigError(f"{source}: NetVLAD needs at least one cluster")

    @staticmethod
    def get_thread_count(flag_value: Optional[int] = None) -> int:
        """--threads flag, else QVPR_THREADS, else 1"""
        if flag_value is not None:
            threads = flag_value
        else:
            env_value = os.environ.get(THREADS_ENV, '').strip()
            if not env_value:
                return 1
            try:
                threads = int(env_value)
            except ValueError:
                raise ConfigError(f"{THREADS_ENV} must be an integer, got {env_value!r}")
        if threads < 1:
            raise ConfigError(f"thread count must be >= 1, got {threads}")
        return threads

    @staticmethod
    def parse_precisions(text: str) -> PrecisionConfig:
        """Parse '8,8,4,16' into a PrecisionConfig"""
        try:
            bits = parse_int_list(text)
        except ValueError:
            raise ConfigError(f"malformed precision list: {text!r}")
        if not bits:
            raise ConfigError("empty precision list")
        bad = [b for b in bits if b not in SUPPORTED_PRECISIONS]
        if bad:
            raise ConfigError(f"unsupported precisions {bad}; allowed {SUPPORTED_PRECISIONS}")
        return PrecisionConfig(bits)

    @staticmethod
    def load_precisions(path: Union[str, Path]) -> PrecisionConfig:
        """Read the last non-comment line of a search result file"""
        lines = [
            line.strip() for line in Path(path).read_text(encoding='utf-8').splitlines()
            if line.strip() and not line.lstrip().startswith('#')
        ]
        if not lines:
            raise ConfigError(f"{path}: no precision list found")
        return ArchConfigLoader.parse_precisions(lines[-1])


def _parse_bool(value: Any) -> bool:
    text = str(value).strip().lower()
    if text in ('1', 'true', 'yes', 'on'):
        return True
    if text in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f"not a boolean: {value!r}")
