"""Configuration package"""

from .config import Config, config, parse_key_value_file

__all__ = ['Config', 'config', 'parse_key_value_file']
