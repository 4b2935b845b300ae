# -*- coding: UTF-8 -*-
# SPDX-License-Identifier: 0BSD

"""File Operations for Configs, Reports, and Checkpoints"""

from contextlib import contextmanager
from typing import IO, AnyStr

import json
import logging
import os
import tempfile
import yaml

LOGGER = logging.getLogger(__name__)

__CONV_STR_TO_DATA = {
    'json': json.loads,
    'yaml': yaml.safe_load
}

__EXTENSIONS = {
    '.json': 'json',
    '.yaml': 'yaml',
    '.yml': 'yaml'
}

_ERR_DATA_TYPE = "Unsupported data_type: {0!s}"
_ERR_EXTENSION = "Cannot infer data type from file extension: {0!s}"
_ERR_NOT_MAPPING = "File does not hold a mapping: {0!s}"
_ERR_PATH_NOT_EXIST = "Provided path does not exist: {0!s}"
_ERR_PATH_NOT_FILE = "Provided path exists, but is not a file: {0!s}"

JSON = 'json'
"""JSON data type"""
YAML = 'yaml'
"""YAML data type"""


def _makestr(data: AnyStr) -> str:
    try:
        return str(data.decode('utf-8'))
    except AttributeError:
        return str(data)


def data_type_for(path: str) -> str:
    """Infers the data type of ``path`` from its extension.

    Raises:
        ValueError: Unknown extension.
    """
    ext = os.path.splitext(path)[1].lower()
    if ext not in __EXTENSIONS:
        raise ValueError(_ERR_EXTENSION.format(path))
    return __EXTENSIONS[ext]


def ensure_dir(path: str) -> str:
    """Creates ``path`` and its parents if missing, then returns it."""
    if not os.path.isdir(path):
        LOGGER.debug("Creating directory %s", path)
        os.makedirs(path, exist_ok=True)
    return path


def file_read(path: str, strip: bool = False) -> str:
    """Read file and return contents

    Args:
        path: Full path to the file to read.
        strip: If True, the returned string will have the .strip() function called on it.

    Returns:
        Data from file stored as a string

    Note:
        This function replaces unicode errors with "?".
    """
    LOGGER.debug("Read file: %s", path)
    with open(path, errors='replace', encoding='utf8') as file_data:
        return file_data.read().strip() if strip else file_data.read()


def file_read_bytes(path: str) -> bytes:
    """Reads the raw contents of ``path``."""
    LOGGER.debug("Read binary file: %s", path)
    with open(path, 'rb') as file_data:
        return file_data.read()


def file_read_convert(path: str, data_type: str = None, default: bool = False) -> dict:
    """Reads and parses a JSON or YAML file into a python dictionary.

    Args:
        path: Path to file to read.
        data_type: JSON or YAML. Inferred from the extension when None.
        default: If true and the file is missing, an empty dictionary will be returned.

    Returns:
        A dictionary of parsed data.

    Raises:
        FileNotFoundError: If provided ``path`` does not exist and ``default`` is not True.
        IOError: If provided ``path`` exists but is not a file or a link to a file.
        ValueError: Unsupported ``data_type``, or the file does not hold a mapping.
    """
    data_type_lower = (data_type or data_type_for(path)).lower()

    if data_type_lower not in __CONV_STR_TO_DATA:
        raise ValueError(_ERR_DATA_TYPE.format(data_type))

    if not os.path.exists(path):
        if not default:
            raise FileNotFoundError(_ERR_PATH_NOT_EXIST.format(path))
        return {}

    if not os.path.isfile(path):
        raise IOError(_ERR_PATH_NOT_FILE.format(path))

    LOGGER.debug("Parsing %s from: %s", data_type_lower.upper(), path)
    data = __CONV_STR_TO_DATA[data_type_lower](file_read(path))
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(_ERR_NOT_MAPPING.format(path))

    return data


def file_write(path: str, data: AnyStr, newline: str = None) -> None:
    """Write ``data`` to a file, replacing it atomically.

    Args:
        path: Full path to the file to write `data` to.
        data: Data to write to ``path``
        newline: Passed to the open function for newline translation. The default
            of None lets native translation happen.
    """
    LOGGER.debug("Write to file: %s", path)
    with _atomic(path, 'w', newline=newline, encoding='utf8') as open_file:
        total_chars = open_file.write(_makestr(data))
    LOGGER.debug("Wrote %d characters", total_chars)


def file_write_bytes(path: str, data: bytes) -> None:
    """Writes ``data`` to ``path`` atomically. Readers never see a partial file."""
    LOGGER.debug("Write binary file: %s", path)
    with _atomic(path, 'wb') as open_file:
        open_file.write(data)
    LOGGER.debug("Wrote %d bytes", len(data))


@contextmanager
def _atomic(path: str, mode: str, **kwargs) -> IO:
    """Yields a temporary sibling of ``path`` that replaces it on success."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp_path = tempfile.mkstemp(prefix='.tmp-', dir=directory)
    try:
        with os.fdopen(fd, mode, **kwargs) as handle:
            yield handle
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
