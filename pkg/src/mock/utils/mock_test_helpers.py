"""
Common test utilities: temporary run directories and YAML config files.
"""

import os
import shutil
import tempfile
from contextlib import contextmanager
from typing import Any, Dict, Iterator, Optional

import yaml

from src.mock.models.mock_experiment import create_mock_config_dict
from src.utils.config import Config


@contextmanager
def temporary_directory() -> Iterator[str]:
    path = tempfile.mkdtemp(prefix='coevo_test_')
    try:
        yield path
    finally:
        shutil.rmtree(path, ignore_errors=True)


def write_config_file(directory: str, data: Optional[Dict[str, Any]] = None, text: Optional[str] = None,
                      name: str = 'config.yaml') -> str:
    """Write a config as YAML (or raw text) and return its path"""
    path = os.path.join(directory, name)
    if text is None:
        text = yaml.safe_dump(data if data is not None else create_mock_config_dict(), sort_keys=False)
    with open(path, 'w') as f:
        f.write(text)
    return path


def reset_config():
    """Drop the Config singleton between tests"""
    Config.reset()
