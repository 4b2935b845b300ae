# -*- coding: UTF-8 -*-
# SPDX-License-Identifier: 0BSD

"""Checksums for Checkpoint Payloads"""

import hashlib

DIGEST_SIZE = hashlib.sha256().digest_size
"""Length in bytes of a SHA256 digest"""


def digest_sha256(data: bytes) -> bytes:
    """Returns the raw SHA256 digest of ``data``.

    Args:
        data: Payload to hash.

    Returns:
        32 byte digest
    """
    return hashlib.sha256(data).digest()
