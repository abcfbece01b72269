"""Frame-level alignments in RNN-T topology.

An alignment is a sequence of token ids where ``blank`` advances the audio
frame index by one and every other token is an emission at the current frame.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BLANK = 0


class InvalidInput(ValueError):
    pass


@dataclass(frozen=True)
class Alignment:
    tokens: tuple[int, ...]
    audio_len: int
    blank_id: int = BLANK

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if self.audio_len < 1:
            raise InvalidInput(f"audio_len must be >= 1, got {self.audio_len}")
        if any(t < 0 for t in self.tokens):
            raise InvalidInput("token ids must be non-negative")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def num_blanks(self) -> int:
        return sum(1 for t in self.tokens if t == self.blank_id)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.tokens, dtype=np.int64)


def timestamps(a: Alignment) -> np.ndarray:
    """Audio frame index at which each token of ``a`` is emitted.

    The index is the number of blanks strictly before the token, clamped to
    ``audio_len - 1`` so that refined alignments carrying surplus blanks still
    map inside the audio sequence.
    """
    if len(a.tokens) == 0:
        raise InvalidInput("empty alignment has no timestamps")
    is_blank = np.asarray(a.tokens) == a.blank_id
    before = np.concatenate([[0], np.cumsum(is_blank)[:-1]])
    return np.minimum(before, a.audio_len - 1).astype(np.int64)


def collapse(a: Alignment | Sequence[int], blank_id: int = BLANK) -> list[int]:
    """CTC collapse: merge adjacent repeats, then drop blanks."""
    if isinstance(a, Alignment):
        tokens, blank_id = a.tokens, a.blank_id
    else:
        tokens = a
    out = []
    prev = None
    for t in tokens:
        t = int(t)
        if t != prev and t != blank_id:
            out.append(t)
        prev = t
    return out


def validate_rnnt(a: Alignment) -> bool:
    return a.num_blanks == a.audio_len


def make_alignment(labels: Sequence[int], emit_times: Sequence[int], audio_len: int,
                   blank_id: int = BLANK) -> Alignment:
    """Build the RNN-T alignment emitting ``labels[k]`` at frame ``emit_times[k]``.

    Labels sharing a frame are emitted consecutively before that frame's blank.
    """
    labels, emit_times = list(labels), list(emit_times)
    if len(labels) != len(emit_times):
        raise InvalidInput("labels and emit_times differ in length")
    if audio_len < 1:
        raise InvalidInput("audio_len must be >= 1")
    if any(lab == blank_id for lab in labels):
        raise InvalidInput("labels must not contain the blank id")
    for k, t in enumerate(emit_times):
        if not 0 <= t < audio_len:
            raise InvalidInput(f"emit time {t} outside [0, {audio_len})")
        if k and t < emit_times[k - 1]:
            raise InvalidInput("emit_times must be non-decreasing")
    tokens = []
    k = 0
    for frame in range(audio_len):
        while k < len(labels) and emit_times[k] == frame:
            tokens.append(labels[k])
            k += 1
        tokens.append(blank_id)
    return Alignment(tuple(tokens), audio_len, blank_id)


# -- text serialization ------------------------------------------------------
# One header line ``T=<int> V=<int>`` per utterance followed by its token ids.

def format_alignment(a: Alignment, vocab_size: int) -> str:
    return f"T={a.audio_len} V={vocab_size}\n" + " ".join(map(str, a.tokens))


def parse_alignments(text: str) -> list[tuple[Alignment, int]]:
    """Parse the header/token line pairs written by :func:`format_alignment`.

    Returns ``(alignment, vocab_size)`` pairs.
    """
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if len(lines) % 2:
        raise InvalidInput("alignment text must alternate header and token lines")
    out = []
    for header, body in zip(lines[::2], lines[1::2]):
        fields = dict(kv.split("=", 1) for kv in header.split())
        try:
            T, V = int(fields["T"]), int(fields["V"])
        except (KeyError, ValueError) as exc:
            raise InvalidInput(f"bad alignment header {header!r}") from exc
        tokens = tuple(int(x) for x in body.split())
        if any(t > V for t in tokens):
            raise InvalidInput(f"token id exceeds vocabulary size {V}")
        out.append((Alignment(tokens, T), V))
    return out


def write_alignments(path: str | Path, alignments: Iterable[Alignment], vocab_size: int) -> None:
    Path(path).write_text("\n".join(format_alignment(a, vocab_size) for a in alignments) + "\n")


def read_alignments(path: str | Path) -> list[Alignment]:
    return [a for a, _ in parse_alignments(Path(path).read_text())]
