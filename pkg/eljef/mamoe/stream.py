# -*- coding: UTF-8 -*-
# SPDX-License-Identifier: 0BSD

"""Bimodal Input Sequences

Text tokens are looked up in an embedding table. Audio tokens are discrete
audio codes rendered to continuous frames by :class:`PseudoEncoder`, then
projected to the model dimension.
"""

import json
import logging

from typing import Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from eljef.mamoe import fops
from eljef.mamoe.numkit import ParamTensor, add, gather, matmul, scatter

LOGGER = logging.getLogger(__name__)

MODALITY_TEXT = 0
"""Modality indicator of text tokens"""
MODALITY_AUDIO = 1
"""Modality indicator of audio tokens"""
MODALITY_NAMES = {MODALITY_TEXT: 'text', MODALITY_AUDIO: 'audio'}

_ERR_CODE_RANGE = "audio code out of range [0, {1!s}): {0!s}"
_ERR_EMPTY_SEQUENCE = "a modality sequence needs at least one token"
_ERR_FIXTURE_LINE = "{0!s}:{1!s}: malformed fixture line: {2!s}"
_ERR_FRAME_WIDTH = "audio frame has {0!s} values, expected {1!s}"
_ERR_MODALITY = "undefined modality indicator: {0!s}"
_ERR_NOT_INJECTIVE = "pseudo-encoder seed {0!s} renders two codes to the same frame"
_ERR_TEXT_RANGE = "text id out of range [0, {1!s}): {0!s}"
_ERR_TOKEN = "token with modality {0!s} carries no usable payload"


def check_modality(modality: int) -> int:
    """Returns ``modality`` if it is a defined indicator.

    Raises:
        ValueError: ``modality`` is not 0 (text) or 1 (audio).
    """
    if modality not in MODALITY_NAMES:
        raise ValueError(_ERR_MODALITY.format(modality))
    return int(modality)


class ModalityToken(NamedTuple):
    """One input token.

    Attributes:
        modality: 0 for text, 1 for audio.
        token_id: Text id, or audio code for audio tokens.
        frame: Explicit audio frame. When None the frame of ``token_id`` is rendered.
    """
    modality: int
    token_id: Optional[int] = None
    frame: Optional[Tuple[float, ...]] = None

    @classmethod
    def text(cls, token_id: int) -> 'ModalityToken':
        """Builds a text token."""
        return cls(MODALITY_TEXT, int(token_id))

    @classmethod
    def audio(cls, code: int) -> 'ModalityToken':
        """Builds an audio token from a discrete audio code."""
        return cls(MODALITY_AUDIO, int(code))

    def validate(self, d_feat: Optional[int] = None) -> None:
        """Checks the payload matches the modality indicator.

        Raises:
            ValueError: Undefined modality or missing/malformed payload.
        """
        check_modality(self.modality)
        if self.modality == MODALITY_TEXT and self.token_id is None:
            raise ValueError(_ERR_TOKEN.format(self.modality))
        if self.modality == MODALITY_AUDIO:
            if self.frame is None and self.token_id is None:
                raise ValueError(_ERR_TOKEN.format(self.modality))
            if self.frame is not None and d_feat is not None and len(self.frame) != d_feat:
                raise ValueError(_ERR_FRAME_WIDTH.format(len(self.frame), d_feat))


class ModalitySequence:
    """An ordered, non-empty list of :class:`ModalityToken`.

    Args:
        tokens: Tokens in input order.

    Raises:
        ValueError: Empty sequence or a token with an undefined modality.
    """
    def __init__(self, tokens: Iterable[ModalityToken]) -> None:
        self.tokens = tuple(tokens)
        if not self.tokens:
            raise ValueError(_ERR_EMPTY_SEQUENCE)
        for token in self.tokens:
            token.validate()

    @classmethod
    def from_ids(cls, modalities: Sequence[int], ids: Sequence[int]) -> 'ModalitySequence':
        """Builds a sequence from parallel modality and id lists."""
        return cls(ModalityToken(int(m), int(i)) for m, i in zip(modalities, ids))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ModalitySequence) and self.tokens == other.tokens

    def __iter__(self) -> Iterator[ModalityToken]:
        return iter(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __repr__(self) -> str:
        return f"ModalitySequence({len(self)} tokens)"

    @property
    def modality(self) -> np.ndarray:
        """Modality vector M, one indicator per token"""
        return np.array([t.modality for t in self.tokens], dtype=np.int64)


class PseudoEncoder:
    """Deterministic stand-in for a frozen speech feature encoder.

    Renders each audio code to a frame of ``d_feat`` values in [-1, 1]. A
    frame depends only on ``(seed, code)``.

    Args:
        seed: Rendering seed.
        d_feat: Frame width.
        code_vocab: Number of discrete audio codes.

    Raises:
        ValueError: Two codes render to the same frame.
    """
    def __init__(self, seed: int, d_feat: int, code_vocab: int) -> None:
        self.seed = int(seed)
        self.d_feat = int(d_feat)
        self.code_vocab = int(code_vocab)
        rng = np.random.default_rng([self.seed, 0x6175])
        self._table = rng.uniform(-1.0, 1.0, size=(self.code_vocab, self.d_feat))
        self._table.setflags(write=False)
        if np.unique(self._table, axis=0).shape[0] != self.code_vocab:
            raise ValueError(_ERR_NOT_INJECTIVE.format(self.seed))

    def frame(self, code: int) -> np.ndarray:
        """Returns the frame of one audio code.

        Raises:
            ValueError: ``code`` outside [0, code_vocab).
        """
        return self.frames([code])[0]

    def frames(self, codes: Sequence[int]) -> np.ndarray:
        """Returns the frames of several audio codes, one row each.

        Raises:
            ValueError: A code is outside [0, code_vocab).
        """
        codes = np.asarray(codes, dtype=np.int64).reshape(-1)
        bad = codes[(codes < 0) | (codes >= self.code_vocab)]
        if bad.size:
            raise ValueError(_ERR_CODE_RANGE.format(int(bad[0]), self.code_vocab))
        return self._table[codes]


def synth_frames(codes: Sequence[int], enc: PseudoEncoder) -> np.ndarray:
    """Renders audio codes to a frame matrix of shape (len(codes), d_feat).

    Raises:
        ValueError: A code is out of range.
    """
    return enc.frames(codes)


def project_audio(frames: np.ndarray, w_proj: ParamTensor) -> ParamTensor:
    """Projects audio frames to the model dimension: ``frames @ w_proj``."""
    return matmul(ParamTensor(frames, copy=False, dtype=w_proj.dtype), w_proj)


def embed_text(ids: Sequence[int], table: ParamTensor) -> ParamTensor:
    """Looks up text ids in the embedding ``table``.

    Raises:
        ValueError: An id is out of range.
    """
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    bad = ids[(ids < 0) | (ids >= table.shape[0])]
    if bad.size:
        raise ValueError(_ERR_TEXT_RANGE.format(int(bad[0]), table.shape[0]))
    return gather(table, ids)


def assemble_batch(seqs: Sequence[ModalitySequence], table: ParamTensor, w_proj: ParamTensor,
                   enc: PseudoEncoder) -> Tuple[ParamTensor, np.ndarray]:
    """Builds the unified input of several sequences, rows flattened in order.

    Returns:
        (H, M) where H has one row per token of every sequence, in order, and
        M holds the matching modality indicators.
    """
    tokens = [token for seq in seqs for token in seq]
    modality = np.array([t.modality for t in tokens], dtype=np.int64)
    rows = len(tokens)
    width = table.shape[1]
    parts = []

    text_rows = np.flatnonzero(modality == MODALITY_TEXT)
    if text_rows.size:
        embedded = embed_text([tokens[r].token_id for r in text_rows], table)
        parts.append(scatter(embedded, text_rows, (rows, width)))

    audio_rows = np.flatnonzero(modality == MODALITY_AUDIO)
    if audio_rows.size:
        frames = np.empty((audio_rows.size, enc.d_feat), dtype=w_proj.dtype)
        for slot, row in enumerate(audio_rows):
            token = tokens[row]
            token.validate(enc.d_feat)
            frames[slot] = enc.frame(token.token_id) if token.frame is None else token.frame
        parts.append(scatter(project_audio(frames, w_proj), audio_rows, (rows, width)))

    hidden = parts[0]
    for part in parts[1:]:
        hidden = add(hidden, part)
    return hidden, modality


def assemble(seq: ModalitySequence, table: ParamTensor, w_proj: ParamTensor,
             enc: PseudoEncoder) -> Tuple[ParamTensor, np.ndarray]:
    """Builds H_input (L x d_model) and the modality vector M of one sequence."""
    return assemble_batch([seq], table, w_proj, enc)


def fixture_dumps(seq: ModalitySequence) -> str:
    """Serializes a sequence as JSON lines of ``{"modality": m, "id": i}``."""
    return '\n'.join(json.dumps({'modality': t.modality, 'id': t.token_id}) for t in seq) + '\n'


def fixture_loads(data: str, source: str = '<string>') -> List[ModalitySequence]:
    """Parses JSON-lines fixtures. A blank line separates sequences.

    Raises:
        ValueError: A line is not a valid token record.
    """
    sequences, current = [], []
    for number, line in enumerate(data.splitlines(), start=1):
        line = line.strip()
        if not line:
            if current:
                sequences.append(ModalitySequence(current))
                current = []
            continue
        try:
            record = json.loads(line)
            token = ModalityToken(check_modality(record['modality']), int(record['id']))
        except (KeyError, TypeError, ValueError) as error:
            raise ValueError(_ERR_FIXTURE_LINE.format(source, number, line)) from error
        current.append(token)
    if current:
        sequences.append(ModalitySequence(current))
    return sequences


def read_fixture(path: str) -> List[ModalitySequence]:
    """Reads JSON-lines sequence fixtures from ``path``."""
    LOGGER.debug("Reading sequence fixture %s", path)
    return fixture_loads(fops.file_read(path), source=path)


def write_fixture(path: str, seqs: Sequence[ModalitySequence]) -> None:
    """Writes sequences to ``path`` as JSON lines, blank line between sequences."""
    fops.file_write(path, '\n'.join(fixture_dumps(seq) for seq in seqs), newline='\n')
