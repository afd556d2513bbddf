"""Run-length caption language shared by the data generator and the text embedder.

Vocabulary layout for ``K`` events and durations up to ``D`` frames::

    0                         padding
    1 .. K                    video event ids
    K+1 .. K+D                video duration buckets
    K+D+1 .. 2K+D             audio event ids
    2K+D+1 .. 2K+2D           audio duration buckets
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import groupby

import numpy as np

PAD = 0
MODES = ("video", "audio")


class CaptionError(ValueError):
    pass


@dataclass(frozen=True)
class CaptionVocab:
    n_events: int
    max_duration: int

    def __post_init__(self):
        if self.n_events < 1 or self.max_duration < 1:
            raise ValueError("caption vocab needs n_events >= 1 and max_duration >= 1")

    @property
    def size(self) -> int:
        return 1 + 2 * (self.n_events + self.max_duration)

    def _base(self, mode: str) -> int:
        if mode not in MODES:
            raise CaptionError(f"caption mode must be one of {MODES}, got {mode!r}")
        return 1 + (0 if mode == "video" else self.n_events + self.max_duration)

    def event_token(self, event: int, mode: str) -> int:
        if not 0 <= event < self.n_events:
            raise CaptionError(f"event id {event} outside vocabulary of {self.n_events} events")
        return self._base(mode) + event

    def duration_token(self, duration: int, mode: str) -> int:
        if not 1 <= duration <= self.max_duration:
            raise CaptionError(f"duration {duration} outside buckets 1..{self.max_duration}")
        return self._base(mode) + self.n_events + duration - 1


def runs(events) -> list[tuple[int, int]]:
    return [(int(e), len(list(g))) for e, g in groupby(events)]


def caption_tokens(events, mode: str, vocab: CaptionVocab) -> list[int]:
    """Encode an event sequence as (event token, duration token) pairs, one pair per run."""
    out = []
    for event, duration in runs(events):
        out += [vocab.event_token(event, mode), vocab.duration_token(duration, mode)]
    return out


def decode_caption(tokens, mode: str, vocab: CaptionVocab) -> list[tuple[int, int]]:
    """Inverse of :func:`caption_tokens`; padding tokens are ignored."""
    toks = [int(t) for t in tokens if int(t) != PAD]
    if len(toks) % 2:
        raise CaptionError("caption must hold an even number of tokens")
    base = vocab._base(mode)
    out = []
    for ev_tok, dur_tok in zip(toks[0::2], toks[1::2]):
        event = ev_tok - base
        duration = dur_tok - base - vocab.n_events + 1
        if not 0 <= event < vocab.n_events or not 1 <= duration <= vocab.max_duration:
            raise CaptionError(f"malformed {mode} caption pair ({ev_tok}, {dur_tok})")
        out.append((event, duration))
    return out


def expand_runs(pairs) -> list[int]:
    return [e for e, d in pairs for _ in range(d)]


def token_spans(tokens, mode: str, vocab: CaptionVocab) -> np.ndarray:
    """Frame span [start, end) described by each token, shape (len(tokens), 2).

    Both tokens of a run share the run's span; padding gets (0, 0).
    """
    toks = [int(t) for t in tokens]
    spans = np.zeros((len(toks), 2), dtype=np.int64)
    real = [i for i, t in enumerate(toks) if t != PAD]
    start = 0
    for j, (_, duration) in enumerate(decode_caption(toks, mode, vocab)):
        for i in real[2 * j:2 * j + 2]:
            spans[i] = (start, start + duration)
        start += duration
    return spans


def pad_captions(captions) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad ragged token lists; returns (ids, valid) of shape (batch, max_len)."""
    captions = [list(c) for c in captions]
    width = max((len(c) for c in captions), default=0)
    ids = np.full((len(captions), width), PAD, dtype=np.int64)
    valid = np.zeros((len(captions), width), dtype=bool)
    for i, c in enumerate(captions):
        ids[i, :len(c)] = c
        valid[i, :len(c)] = True
    return ids, valid
