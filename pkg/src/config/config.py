"""
Configuration management for training, evaluation and sweeps
"""

import copy
import os
import yaml
from typing import Dict, Any, Mapping, Optional
from dotenv import load_dotenv

from src.utils.errors import ConfigurationError

# Load environment variables
load_dotenv()


YAML_SUFFIXES = ('.yaml', '.yml')

# Bare keys of a key=value file belong to this section
DEFAULT_SECTION = 'training'


class Config:
    """Configuration manager for training runs"""

    def __init__(self, config_path: Optional[str] = None):
        """
        Initialize configuration

        Args:
            config_path: Path to a config.yaml or key=value file
        """
        self.config_path = config_path or os.getenv('RVAE_CONFIG_PATH', 'config/config.yaml')
        self.config_data = self._load_config()

    def _load_config(self) -> Dict[str, Any]:
        """Load configuration from a YAML or key=value file, layered over the defaults"""
        if not os.path.exists(self.config_path):
            return self._get_default_config()
        if self.config_path.endswith(YAML_SUFFIXES):
            with open(self.config_path, 'r') as f:
                data = yaml.safe_load(f) or {}
            if not isinstance(data, dict):
                raise ConfigurationError(f"{self.config_path}: top level must be a mapping")
        else:
            data = parse_key_value_file(self.config_path)
        return _deep_merge(self._get_default_config(), data)

    def _get_default_config(self) -> Dict[str, Any]:
        """Return default configuration"""
        return {
            'training': {
                'objective': 'robust',
                'log_alpha': -50.0,
                'epochs': 1000,
                'batch_size': 200,
                'lr': 1e-3,
                'beta1': 0.99,
                'beta2': 0.999,
                'eps_hat': 1e-4,
                'gamma': 0.99,
                'seed': 0,
                'hidden': 200,
                'latent': 50,
                'eval_interval': 50,
            },
            'evaluation': {
                'k': 200,
                'seed': 20170301,
            },
            'data': {
                'train_images': os.getenv('MNIST_TRAIN_IMAGES', 'data/train-images-idx3-ubyte'),
                'test_images': os.getenv('MNIST_TEST_IMAGES', 'data/t10k-images-idx3-ubyte'),
            },
            'output': {
                'dir': os.getenv('RVAE_OUTPUT_DIR', 'runs'),
            },
            'monitoring': {
                'log_level': os.getenv('RVAE_LOG_LEVEL', 'INFO'),
            }
        }

    def get(self, key: str, default: Any = None) -> Any:
        """
        Get configuration value by key

        Args:
            key: Configuration key (supports dot notation, e.g., 'training.epochs')
            default: Default value if key not found

        Returns:
            Configuration value
        """
        keys = key.split('.')
        value = self.config_data

        for k in keys:
            if isinstance(value, dict) and k in value:
                value = value[k]
            else:
                return default

        return value

    def section(self, name: str) -> Dict[str, Any]:
        """Get a copy of one top-level section (empty if absent)"""
        value = self.get(name, {})
        if not isinstance(value, dict):
            raise ConfigurationError(f"{self.config_path}: section '{name}' is not a mapping")
        return copy.deepcopy(value)

    def merge(self, overrides: Mapping[str, Any]) -> 'Config':
        """
        Apply overrides on top of the loaded values

        Args:
            overrides: Dotted keys to values; None values are ignored so unset
                command-line flags leave the file value in place

        Returns:
            self, for chaining
        """
        for key, value in overrides.items():
            if value is None:
                continue
            _assign(self.config_data, key if '.' in key else f"{DEFAULT_SECTION}.{key}", value)
        return self

    def to_dict(self) -> Dict[str, Any]:
        """Deep copy of the configuration tree"""
        return copy.deepcopy(self.config_data)


def parse_key_value_file(path: str) -> Dict[str, Any]:
    """
    Parse a line-oriented key=value configuration file

    Args:
        path: File path

    Returns:
        Nested configuration dictionary
    """
    data: Dict[str, Any] = {}
    with open(path, 'r') as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith('#'):
                continue
            if '=' not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key=value, got '{line}'")
            key, _, text = line.partition('=')
            key = key.strip()
            if not key:
                raise ConfigurationError(f"{path}:{lineno}: empty key")
            try:
                value = yaml.safe_load(text.strip()) if text.strip() else None
            except yaml.YAMLError as e:
                raise ConfigurationError(f"{path}:{lineno}: cannot parse value: {e}")
            _assign(data, key if '.' in key else f"{DEFAULT_SECTION}.{key}", value)
    return data


def _assign(tree: Dict[str, Any], dotted: str, value: Any):
    """Set tree[a][b][c] = value for dotted key 'a.b.c'"""
    *parents, leaf = dotted.split('.')
    node = tree
    for k in parents:
        child = node.get(k)
        if not isinstance(child, dict):
            child = {}
            node[k] = child
        node = child
    node[leaf] = value


def _deep_merge(base: Dict[str, Any], overlay: Mapping[str, Any]) -> Dict[str, Any]:
    """overlay wins; nested mappings merge key by key"""
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_merge(base[key], value)
        else:
            base[key] = value
    return base


# Global config instance
config = Config()
