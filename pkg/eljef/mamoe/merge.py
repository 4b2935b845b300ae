# -*- coding: UTF-8 -*-
# SPDX-License-Identifier: 0BSD

"""Strict Dictionary Merge Operations"""

from copy import deepcopy
from typing import Collection


class UnknownKeyError(KeyError):
    """Raised when an override names a key the base dictionary does not have.

    Attributes:
        key: Dotted path of the offending key.
    """
    def __init__(self, key: str) -> None:
        super().__init__(key)
        self.key = key


def merge_strict(base: dict, override: dict, opaque: Collection[str] = (), prefix: str = '') -> dict:
    """Merges ``override`` into a copy of ``base``, accepting only known keys.

    Embedded dictionaries are merged recursively, except under keys listed in
    ``opaque``, whose values are replaced whole.

    Args:
        base: Dictionary of every supported key with its default value.
        override: Values to embed into ``base``.
        opaque: Key names whose dictionary values replace instead of merge.
        prefix: Dotted path of ``base``, used in error messages.

    Returns:
        A new dictionary with values from ``base`` and ``override``.

    Raises:
        UnknownKeyError: ``override`` holds a key missing from ``base``.
    """
    new = deepcopy(base)

    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in new:
            raise UnknownKeyError(path)
        if isinstance(value, dict) and isinstance(new[key], dict) and key not in opaque:
            new[key] = merge_strict(new[key], value, opaque, f"{path}.")
        else:
            new[key] = deepcopy(value)

    return new
