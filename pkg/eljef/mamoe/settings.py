# -*- coding: UTF-8 -*-
# SPDX-License-Identifier: 0BSD

"""Settings File Operations"""

import logging
import os

from typing import Any, Collection, Mapping, Optional, Sequence, Union

import yaml

from eljef.mamoe import fops
from eljef.mamoe.merge import UnknownKeyError, merge_strict

LOGGER = logging.getLogger(__name__)

_ERR_ALIAS_CLASH = "both '{0!s}' and its alias '{1!s}' are set"
_ERR_ENV_VALUE = "environment variable {0!s} is not a valid value: {1!s}"
_ERR_UNKNOWN_FIELD = "unknown configuration field: {0!s}"


class ConfigError(ValueError):
    """Raised for unknown configuration fields and invalid configuration values."""


class Settings:
    """Builds a settings object from defaults, a settings file, and the environment.

    Settings are loaded in hierarchy of defaults, then the settings file, then
    environment overrides. Every key in the file must exist in ``defaults``.

    Args:
        defaults: Dictionary of every supported setting with its default value.
        path: Full path to a JSON or YAML settings file.
        aliases: Alternate top-level key names mapped to their canonical names.
        ignored: Top-level keys that are accepted and dropped.
        opaque: Key names whose dictionary values replace the defaults whole.
        env: Environment variable names mapped to the dotted keys they override.
        environ: Environment to read. Default is ``os.environ``.

    Raises:
        ConfigError: Unknown field, alias clash, or unparsable environment value.
        FileNotFoundError: ``path`` is given but does not exist.

    Note:
        The defaults dictionary should be a complete dictionary, containing all supported settings and
        their default values.
    """
    def __init__(self, defaults: dict, path: str = None, aliases: Mapping[str, str] = None,
                 ignored: Collection[str] = (), opaque: Collection[str] = (),
                 env: Mapping[str, Sequence[str]] = None, environ: Mapping[str, str] = None) -> None:
        data = self.canonicalize(self.read(path), aliases or {}, ignored)
        try:
            merged = merge_strict(defaults, data, opaque)
        except UnknownKeyError as error:
            raise ConfigError(_ERR_UNKNOWN_FIELD.format(error.key)) from error
        self._settings = self.apply_environment(merged, env or {}, os.environ if environ is None else environ)

    def get(self, setting: str) -> Union[Any, None]:
        """Retrieve a settings value

        Args:
            setting: Setting name, dotted for nested values.

        Returns:
            Value of setting or None if it doesn't exist.
        """
        value = self._settings
        for part in setting.split('.'):
            if not isinstance(value, dict) or part not in value:
                return None
            value = value[part]
        return value

    def get_all(self) -> dict:
        """Returns all stored settings

        Returns:
            A dictionary with all settings
        """
        return self._settings

    @staticmethod
    def read(path: Optional[str]) -> dict:
        """Reads a JSON or YAML settings file, chosen by extension.

        Args:
            path: Full path to the settings file. Nothing is read when empty.

        Returns:
            A dictionary of file settings.
        """
        if not path:
            return {}
        LOGGER.debug("Reading settings from %s", path)
        return fops.file_read_convert(path)

    @staticmethod
    def canonicalize(data: dict, aliases: Mapping[str, str], ignored: Collection[str]) -> dict:
        """Renames aliased top-level keys and drops ignored ones.

        Raises:
            ConfigError: A key is present under both its canonical name and an alias.
        """
        ret = {}
        for key, value in data.items():
            if key in ignored:
                LOGGER.debug("Ignoring setting with no counterpart: %s", key)
                continue
            name = aliases.get(key, key)
            if name in ret:
                raise ConfigError(_ERR_ALIAS_CLASH.format(name, key))
            ret[name] = value

        return ret

    @staticmethod
    def apply_environment(settings: dict, env: Mapping[str, Sequence[str]], environ: Mapping[str, str]) -> dict:
        """Overrides dotted keys from environment variables that are set.

        Values are parsed as YAML scalars, so ``MAMOE_SEED=7`` yields the integer 7.

        Raises:
            ConfigError: A variable does not parse.
        """
        for variable, keys in env.items():
            raw = environ.get(variable)
            if raw is None or raw == '':
                continue
            try:
                value = yaml.safe_load(raw)
            except yaml.YAMLError as error:
                raise ConfigError(_ERR_ENV_VALUE.format(variable, raw)) from error
            for key in keys:
                *parents, leaf = key.split('.')
                target = settings
                for parent in parents:
                    target = target[parent]
                LOGGER.info("%s overrides %s: %s", variable, key, value)
                target[leaf] = value

        return settings
