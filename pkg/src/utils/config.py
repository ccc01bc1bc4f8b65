import logging
import os
from typing import Any, Dict, Optional

import yaml

logger = logging.getLogger(__name__)


class Config:
    """Configuration singleton for accessing the experiment YAML file"""

    _instance = None
    _config = None
    _line_map: Dict[str, int] = {}
    _path: Optional[str] = None
    _overrides: Dict[str, Any] = {}

    def __new__(cls):
        if not isinstance(cls._instance, cls):
            cls._instance = super(Config, cls).__new__(cls)
            cls._instance._load_config()
        return cls._instance

    def _process_placeholders(self, value: Any) -> Any:
        """Replace placeholders in configuration values"""
        if isinstance(value, str):
            # Replace seed placeholder
            if '%SEED%' in value:
                seed = self._config.get('seed')
                if seed is not None:
                    value = value.replace('%SEED%', str(seed))

            # Replace protocol placeholder
            if '%PROTOCOL%' in value:
                protocol = (self._config.get('protocol') or {}).get('name')
                if protocol:
                    value = value.replace('%PROTOCOL%', str(protocol))

            return value
        elif isinstance(value, dict):
            return {k: self._process_placeholders(v) for k, v in value.items()}
        elif isinstance(value, list):
            return [self._process_placeholders(item) for item in value]
        return value

    def _load_config(self):
        """Load configuration from the YAML file named by COEVO_CONFIG"""
        if self._config is None:
            config_path = Config._path or os.getenv('COEVO_CONFIG', 'config.yaml')
            try:
                with open(config_path, 'r') as f:
                    text = f.read()
                self._config = yaml.safe_load(text) or {}
                if isinstance(self._config, dict):
                    self._config.update(Config._overrides)
                Config._line_map = build_line_map(text)
                # Process placeholders after loading but before first use
                self._config = self._process_placeholders(self._config)
            except FileNotFoundError:
                logger.warning(f"Config file not found: {config_path}; using defaults")
                self._config = dict(Config._overrides)

    def get(self, *args: str, default: Any = None) -> Any:
        """Get a configuration value by path"""
        current = self._config
        for arg in args:
            if isinstance(current, dict) and arg in current:
                current = current[arg]
            else:
                return default
        return current

    def as_dict(self) -> Dict[str, Any]:
        return dict(self._config or {})

    @property
    def line_map(self) -> Dict[str, int]:
        return dict(Config._line_map)

    @classmethod
    def load(cls, path: str, overrides: Optional[Dict[str, Any]] = None) -> 'Config':
        """Reset the singleton and load the given file; top-level overrides apply before placeholders"""
        cls.reset()
        cls._path = path
        cls._overrides = dict(overrides or {})
        return cls()

    @classmethod
    def reset(cls):
        """Reset the singleton instance (for testing)"""
        cls._instance = None
        cls._config = None
        cls._line_map = {}
        cls._path = None
        cls._overrides = {}


def build_line_map(text: str) -> Dict[str, int]:
    """Map dotted key paths to their 1-based line in the YAML source"""
    lines: Dict[str, int] = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines

    def walk(node, prefix: str):
        if isinstance(node, yaml.MappingNode):
            for key_node, value_node in node.value:
                path = f"{prefix}.{key_node.value}" if prefix else str(key_node.value)
                lines[path] = key_node.start_mark.line + 1
                walk(value_node, path)

    if root is not None:
        walk(root, '')
    return lines
