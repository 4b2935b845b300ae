# -*- coding: UTF-8 -*-
# SPDX-License-Identifier: 0BSD

"""Binary Training Checkpoints

File layout, little-endian::

    magic      8 bytes   b'MAMOECKP'
    version    uint32
    digest     32 bytes  SHA256 of the payload
    length     uint64    payload size
    payload    meta length (uint64), meta JSON, raw array bytes

The meta JSON is written with sorted keys and arrays are stored in name
order, so saving the same state twice gives identical bytes.
"""

import json
import logging
import struct

from typing import Dict, NamedTuple

import numpy as np

from eljef.mamoe import fops
from eljef.mamoe.hash import DIGEST_SIZE, digest_sha256

LOGGER = logging.getLogger(__name__)

MAGIC = b'MAMOECKP'
"""First bytes of every checkpoint"""
VERSION = 1
"""Checkpoint format version written by this module"""

_HEADER = struct.Struct(f"<8sI{DIGEST_SIZE}sQ")
_LENGTH = struct.Struct('<Q')

_ERR_CHECKSUM = "checkpoint checksum mismatch: {0!s}"
_ERR_IO = "cannot access checkpoint {0!s}: {1!s}"
_ERR_MAGIC = "not a checkpoint file: {0!s}"
_ERR_META = "checkpoint metadata is unreadable: {0!s}"
_ERR_TRUNCATED = "checkpoint is truncated: {0!s}"
_ERR_VERSION = "checkpoint version {0!s} is not supported (expected {1!s}): {2!s}"


class CheckpointError(Exception):
    """Base class of checkpoint failures."""


class ChecksumError(CheckpointError):
    """Raised when the payload does not match its digest, including truncated files."""


class VersionMismatchError(CheckpointError):
    """Raised when the file was written by another format version."""


class CheckpointIOError(CheckpointError):
    """Raised when the file cannot be read or written."""


class Checkpoint(NamedTuple):
    """Everything needed to resume training.

    Attributes:
        config: Model and training configuration snapshot.
        params: Parameter arrays by name.
        moments: Optimizer moment arrays by name.
        step: Completed training steps.
        rng_state: JSON-compatible state of the run's random sources.
        extra: Further JSON-compatible run state.
    """
    config: dict
    params: Dict[str, np.ndarray]
    moments: Dict[str, np.ndarray]
    step: int
    rng_state: dict
    extra: dict = {}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Checkpoint):
            return False
        return (self.config, self.step, self.rng_state, self.extra) == \
            (other.config, other.step, other.rng_state, other.extra) and \
            _same_arrays(self.params, other.params) and _same_arrays(self.moments, other.moments)

    def __ne__(self, other: object) -> bool:
        return not self == other


def _same_arrays(left: Dict[str, np.ndarray], right: Dict[str, np.ndarray]) -> bool:
    return left.keys() == right.keys() and \
        all(left[k].dtype == right[k].dtype and np.array_equal(left[k], right[k]) for k in left)


def dumps(ckpt: Checkpoint) -> bytes:
    """Serializes ``ckpt`` to checkpoint bytes."""
    entries, blobs, offset = [], [], 0
    for group, arrays in (('params', ckpt.params), ('moments', ckpt.moments)):
        for name in sorted(arrays):
            array = np.asarray(arrays[name])
            data = np.ascontiguousarray(array, dtype=array.dtype.newbyteorder('<')).tobytes()
            entries.append({'group': group, 'name': name, 'dtype': array.dtype.newbyteorder('<').str,
                            'shape': list(array.shape), 'offset': offset, 'nbytes': len(data)})
            blobs.append(data)
            offset += len(data)

    meta = {'arrays': entries, 'config': ckpt.config, 'extra': ckpt.extra, 'rng_state': ckpt.rng_state,
            'step': int(ckpt.step)}
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(',', ':')).encode('utf-8')
    payload = _LENGTH.pack(len(meta_bytes)) + meta_bytes + b''.join(blobs)
    return _HEADER.pack(MAGIC, VERSION, digest_sha256(payload), len(payload)) + payload


def loads(data: bytes, source: str = '<bytes>') -> Checkpoint:
    """Parses checkpoint bytes. Nothing is returned unless every check passes.

    Raises:
        CheckpointError: Not a checkpoint.
        ChecksumError: Truncated or corrupt payload.
        VersionMismatchError: Unsupported format version.
    """
    if len(data) < _HEADER.size:
        if data[:len(MAGIC)] != MAGIC[:len(data)]:
            raise CheckpointError(_ERR_MAGIC.format(source))
        raise ChecksumError(_ERR_TRUNCATED.format(source))
    magic, version, digest, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(_ERR_MAGIC.format(source))
    if version != VERSION:
        raise VersionMismatchError(_ERR_VERSION.format(version, VERSION, source))
    payload = data[_HEADER.size:]
    if len(payload) != length:
        raise ChecksumError(_ERR_TRUNCATED.format(source))
    if digest_sha256(payload) != digest:
        raise ChecksumError(_ERR_CHECKSUM.format(source))

    try:
        (meta_length,) = _LENGTH.unpack_from(payload)
        meta = json.loads(payload[_LENGTH.size:_LENGTH.size + meta_length].decode('utf-8'))
        base = _LENGTH.size + meta_length
        groups = {'params': {}, 'moments': {}}
        for entry in meta['arrays']:
            start = base + entry['offset']
            raw = payload[start:start + entry['nbytes']]
            array = np.frombuffer(raw, dtype=np.dtype(entry['dtype'])).reshape(entry['shape'])
            groups[entry['group']][entry['name']] = array.astype(array.dtype.newbyteorder('='))
        return Checkpoint(meta['config'], groups['params'], groups['moments'], meta['step'], meta['rng_state'],
                          meta['extra'])
    except (KeyError, TypeError, ValueError, struct.error) as error:
        raise CheckpointError(_ERR_META.format(source)) from error


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    """Writes ``ckpt`` to ``path``, replacing any previous file atomically.

    Raises:
        CheckpointIOError: The file cannot be written.
    """
    data = dumps(ckpt)
    try:
        fops.file_write_bytes(path, data)
    except OSError as error:
        raise CheckpointIOError(_ERR_IO.format(path, error)) from error
    LOGGER.info("Saved checkpoint at step %d to %s", ckpt.step, path)


def load_checkpoint(path: str) -> Checkpoint:
    """Reads and verifies the checkpoint at ``path``.

    Raises:
        CheckpointIOError: The file cannot be read.
        CheckpointError: Not a checkpoint.
        ChecksumError: Truncated or corrupt payload.
        VersionMismatchError: Unsupported format version.
    """
    try:
        data = fops.file_read_bytes(path)
    except OSError as error:
        raise CheckpointIOError(_ERR_IO.format(path, error)) from error
    ckpt = loads(data, source=path)
    LOGGER.debug("Loaded checkpoint at step %d from %s", ckpt.step, path)
    return ckpt
