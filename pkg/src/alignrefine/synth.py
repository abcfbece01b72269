"""Synthetic utterances and a first-pass error simulator.

Each reference is a walk on a sparse random bigram chain, so neighbouring
labels carry information about each other.  Every label occupies between 1
and ``max_duration`` frames; the encoder features at a frame are a fixed
embedding of the active label plus Gaussian noise, and the gold RNN-T
alignment emits each label at the first frame it occupies, so most of a
label's evidence lies to the right of its timestamp.  The first pass is
simulated by corrupting the gold alignment's labels while leaving its blanks
alone.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .align import BLANK, Alignment, collapse, make_alignment, read_alignments, write_alignments
from .mwer import word_edit_distance

CORPUS_VERSION = 1


@dataclass(frozen=True)
class TaskConfig:
    vocab_size: int = 16
    audio_dim: int = 16
    min_labels: int = 4
    max_labels: int = 12
    max_duration: int = 4
    noise: float = 0.5
    successors: int = 3  # non-zero entries per bigram row
    emit: str = "first"  # frame of its segment ("first" or "last") at which a label is emitted
    task_seed: int = 1234  # fixes label embeddings and the bigram chain


@dataclass(frozen=True)
class CorruptionConfig:
    substitution: float = 0.1
    deletion: float = 0.05
    insertion: float = 0.05
    seed: int = 0

    def __post_init__(self):
        rates = (self.substitution, self.deletion, self.insertion)
        if any(not 0 <= r <= 1 for r in rates) or sum(rates) >= 1:
            raise ValueError(f"corruption rates must lie in [0, 1] and sum below 1: {rates}")


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # (T, audio_dim)
    reference: tuple[int, ...]
    gold_alignment: Alignment
    first_pass: Optional[Alignment] = None

    @property
    def audio_len(self) -> int:
        return self.gold_alignment.audio_len


@dataclass
class Task:
    """Label embeddings and bigram chain shared by every corpus of a task."""
    cfg: TaskConfig
    embeddings: np.ndarray = field(init=False)
    initial: np.ndarray = field(init=False)
    transitions: np.ndarray = field(init=False)

    def __post_init__(self):
        V = self.cfg.vocab_size
        if self.cfg.emit not in ("first", "last"):
            raise ValueError(f"emit must be 'first' or 'last': {self.cfg.emit!r}")
        rng = np.random.default_rng(self.cfg.task_seed)
        self.embeddings = _unit(rng.normal(size=(V + 1, self.cfg.audio_dim)))
        self.embeddings[BLANK] = 0.0
        self.initial = np.full(V + 1, 1.0 / V)
        self.initial[BLANK] = 0.0
        trans = np.zeros((V + 1, V + 1))
        k = min(self.cfg.successors, V - 1)
        for a in range(1, V + 1):
            others = [b for b in range(1, V + 1) if b != a]
            succ = rng.choice(others, size=k, replace=False)
            trans[a, succ] = rng.dirichlet(np.full(k, 2.0))
        self.transitions = trans

    def sample(self, rng: np.random.Generator, uid: str) -> Utterance:
        c = self.cfg
        U = int(rng.integers(c.min_labels, c.max_labels + 1))
        labels: list[int] = []
        for i in range(U):
            p = self.initial if i == 0 else self.transitions[labels[-1]]
            lab = int(rng.choice(c.vocab_size + 1, p=p))
            labels.append(lab)
        durations = rng.integers(1, c.max_duration + 1, size=U)
        ends = np.cumsum(durations) - 1
        T = int(ends[-1] + 1)
        active = np.repeat(labels, durations)
        feats = self.embeddings[active] + c.noise * rng.normal(size=(T, c.audio_dim))
        frames = ends if c.emit == "last" else ends - durations + 1
        gold = make_alignment(labels, frames.tolist(), T)
        return Utterance(uid, feats, tuple(labels), gold)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _utt_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def generate(n: int, task: TaskConfig | Task, seed: int,
             corruption: Optional[CorruptionConfig] = None, prefix: str = "utt") -> list[Utterance]:
    """``n`` utterances; utterance ``i`` depends only on ``(seed, i)``."""
    if not isinstance(task, Task):
        task = Task(task)
    out = []
    for i in range(n):
        utt = task.sample(_utt_rng(seed, i), f"{prefix}{i:06d}")
        if corruption is not None:
            utt.first_pass = corrupt(utt.gold_alignment, corruption, task.cfg.vocab_size,
                                     _utt_rng(corruption.seed, i))
        out.append(utt)
    return out


def corrupt(a: Alignment, cfg: CorruptionConfig, vocab_size: int,
            rng: Optional[np.random.Generator] = None) -> Alignment:
    """Substitute, delete or insert label tokens; blanks are never touched."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    sub, dele, ins = cfg.substitution, cfg.deletion, cfg.insertion
    tokens = list(a.tokens)
    out = []
    for i, tok in enumerate(tokens):
        if tok == a.blank_id:
            out.append(tok)
            continue
        u = rng.random()
        if u < sub:
            out.append(_draw_label(rng, vocab_size, exclude={tok}))
        elif u < sub + dele:
            pass
        elif u < sub + dele + ins:
            nxt = tokens[i + 1] if i + 1 < len(tokens) else a.blank_id
            out.extend([tok, _draw_label(rng, vocab_size, exclude={tok, nxt})])
        else:
            out.append(tok)
    return Alignment(tuple(out), a.audio_len, a.blank_id)


def _draw_label(rng: np.random.Generator, vocab_size: int, exclude: set) -> int:
    choices = [v for v in range(1, vocab_size + 1) if v not in exclude]
    return int(choices[rng.integers(len(choices))])


def corpus_wer(hyps: Sequence, refs: Sequence) -> float:
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses for {len(refs)} references")
    errors = sum(word_edit_distance(h, r) for h, r in zip(hyps, refs))
    words = sum(len(r.split() if isinstance(r, str) else r) for r in refs)
    return errors / words if words else 0.0


def first_pass_wer(corpus: Iterable[Utterance]) -> float:
    corpus = list(corpus)
    return corpus_wer([collapse(u.first_pass) for u in corpus], [u.reference for u in corpus])


# -- serialization -----------------------------------------------------------
# <dir>/manifest.json, gold.txt, first_pass.txt, features.bin (float32 LE)

def save_corpus(corpus: Sequence[Utterance], directory: str | Path, task: TaskConfig) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_alignments(d / "gold.txt", [u.gold_alignment for u in corpus], task.vocab_size)
    if corpus and all(u.first_pass is not None for u in corpus):
        write_alignments(d / "first_pass.txt", [u.first_pass for u in corpus], task.vocab_size)
    entries, chunks, offset = [], [], 0
    for u in corpus:
        arr = np.ascontiguousarray(u.features, dtype="<f4")
        entries.append({"id": u.id, "frames": int(arr.shape[0]), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    (d / "features.bin").write_bytes(b"".join(chunks))
    manifest = {"version": CORPUS_VERSION, "audio_dim": task.audio_dim,
                "task": task.__dict__, "utterances": entries}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_corpus(directory: str | Path) -> tuple[list[Utterance], TaskConfig]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("version") != CORPUS_VERSION:
        raise ValueError(f"corpus version {manifest.get('version')} != {CORPUS_VERSION}")
    task = TaskConfig(**manifest["task"])
    gold = read_alignments(d / "gold.txt")
    fp_path = d / "first_pass.txt"
    first = read_alignments(fp_path) if fp_path.exists() else [None] * len(gold)
    blob = (d / "features.bin").read_bytes()
    out = []
    for e, g, f in zip(manifest["utterances"], gold, first):
        count = e["frames"] * manifest["audio_dim"]
        feats = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"])
        out.append(Utterance(e["id"], feats.reshape(e["frames"], -1).astype(np.float64),
                             tuple(collapse(g)), g, f))
    return out, task
