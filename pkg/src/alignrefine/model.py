"""Streaming Align-Refine decoder.

Each layer runs two stacks side by side.  The text stack applies banded
self-attention over alignment positions, then cross-attention from each token
to a window of audio frames around its timestamp.  The audio stack applies
banded self-attention over frames.  The cross-attention in layer ``l`` reads
the audio stack's layer-``l`` output, so right contexts of the two stacks line
up in time instead of adding up: one refinement step looks ``(L + 1) * C``
frames ahead with audio self-attention and ``L * C`` without.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .align import BLANK, Alignment, collapse, timestamps
from .ctc import ctc_log_likelihood
from .masks import DelayConfig, MaskSpec, band_self_mask, time_aligned_cross_mask

CHECKPOINT_VERSION = 1


@dataclass
class DecoderConfig:
    vocab_size: int = 16  # non-blank labels; blank is id 0
    audio_dim: int = 16
    model_dim: int = 64
    heads: int = 4
    ffn_dim: Optional[int] = None  # defaults to 4 * model_dim
    layers: int = 4
    right_context: int = 2
    text_left: Optional[int] = None
    cross_left: Optional[int] = 2
    audio_left: Optional[int] = None
    audio_self_attention: bool = True
    bottom_audio_sa: bool = True
    steps: int = 3
    frame_size: float = 0.06
    max_len: int = 128

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if self.steps < 1 or self.layers < 1:
            raise ValueError("layers and steps must be >= 1")
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.model_dim

    @property
    def text_mask(self) -> MaskSpec:
        return MaskSpec(self.text_left, self.right_context)

    @property
    def cross_mask(self) -> MaskSpec:
        return MaskSpec(self.cross_left, self.right_context)

    @property
    def audio_mask(self) -> MaskSpec:
        return MaskSpec(self.audio_left, self.right_context)

    def delay_config(self, steps: int | None = None) -> DelayConfig:
        return DelayConfig(self.layers, self.right_context, self.frame_size,
                           self.audio_self_attention, steps or self.steps, self.bottom_audio_sa)

    def has_audio_sa(self, layer: int) -> bool:
        if not self.audio_self_attention:
            return False
        return layer > 0 or self.bottom_audio_sa

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, query, key, allowed):
        # allowed: (B, Nq, Nk) bool; every row must contain at least one True.
        B, Nq, d = query.shape
        Nk = key.shape[1]
        h = self.heads
        q = self.q(query).view(B, Nq, h, d // h).transpose(1, 2)
        k = self.k(key).view(B, Nk, h, d // h).transpose(1, 2)
        v = self.v(key).view(B, Nk, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        scores = scores.masked_fill(~allowed[:, None], float("-inf"))
        ctx = torch.softmax(scores, dim=-1) @ v
        return self.out(ctx.transpose(1, 2).reshape(B, Nq, d))


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.up = nn.Linear(dim, hidden)
        self.down = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.down(F.gelu(self.up(x)))


class DecoderLayer(nn.Module):
    """One pre-norm layer of the text stack plus (optionally) the audio stack."""

    def __init__(self, cfg: DecoderConfig, audio_sa: bool):
        super().__init__()
        d, h = cfg.model_dim, cfg.heads
        self.text_norm1, self.text_sa = nn.LayerNorm(d), MultiHeadAttention(d, h)
        self.text_norm2, self.audio_kv_norm = nn.LayerNorm(d), nn.LayerNorm(d)
        self.cross = MultiHeadAttention(d, h)
        self.text_norm3, self.text_ffn = nn.LayerNorm(d), FeedForward(d, cfg.ffn_dim)
        self.audio_sa = audio_sa
        if audio_sa:
            self.audio_norm1, self.audio_attn = nn.LayerNorm(d), MultiHeadAttention(d, h)
            self.audio_norm2, self.audio_ffn = nn.LayerNorm(d), FeedForward(d, cfg.ffn_dim)

    def forward(self, text, audio, text_mask, cross_mask, audio_mask):
        if self.audio_sa:
            a = self.audio_norm1(audio)
            audio = audio + self.audio_attn(a, a, audio_mask)
            audio = audio + self.audio_ffn(self.audio_norm2(audio))
        x = self.text_norm1(text)
        text = text + self.text_sa(x, x, text_mask)
        text = text + self.cross(self.text_norm2(text), self.audio_kv_norm(audio), cross_mask)
        text = text + self.text_ffn(self.text_norm3(text))
        return text, audio


class AlignRefineDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.token_embedding = nn.Embedding(cfg.vocab_size + 1, d)
        self.position_embedding = nn.Embedding(cfg.max_len, d)
        self.audio_in = nn.Linear(cfg.audio_dim, d)
        self.layers = nn.ModuleList(DecoderLayer(cfg, cfg.has_audio_sa(i)) for i in range(cfg.layers))
        self.final_norm = nn.LayerNorm(d)
        self.output = nn.Linear(d, cfg.vocab_size + 1)

    def forward(self, batch: "Batch") -> torch.Tensor:
        """Frame log-probabilities ``(B, N, V+1)`` for the batch's alignments."""
        N = batch.tokens.shape[1]
        if N > self.cfg.max_len:
            raise ValueError(f"alignment length {N} exceeds max_len {self.cfg.max_len}")
        pos = torch.arange(N, device=batch.tokens.device)
        text = self.token_embedding(batch.tokens) + self.position_embedding(pos)[None]
        audio = self.audio_in(batch.features.to(self.audio_in.weight.dtype))
        for layer in self.layers:
            text, audio = layer(text, audio, batch.text_mask, batch.cross_mask, batch.audio_mask)
        return torch.log_softmax(self.output(self.final_norm(text)), dim=-1)


# -- batching ----------------------------------------------------------------

def _pad_mask(m: np.ndarray, rows: int, cols: int) -> np.ndarray:
    out = np.zeros((rows, cols), dtype=bool)
    out[: m.shape[0], : m.shape[1]] = m
    # Padded query rows attend to key 0 so softmax stays finite; they are discarded.
    out[m.shape[0]:, 0] = True
    return out


@dataclass
class Batch:
    tokens: torch.Tensor  # (B, N) long, padded with blank
    lengths: torch.Tensor  # (B,) alignment lengths
    features: torch.Tensor  # (B, T, audio_dim)
    audio_lens: torch.Tensor  # (B,)
    times: list[np.ndarray]
    text_mask: torch.Tensor
    cross_mask: torch.Tensor
    audio_mask: torch.Tensor

    @property
    def alignments(self) -> list[Alignment]:
        toks = self.tokens.cpu().numpy()
        return [Alignment(tuple(toks[b, :n]), int(t))
                for b, (n, t) in enumerate(zip(self.lengths.tolist(), self.audio_lens.tolist()))]


def make_batch(alignments: Sequence[Alignment], features: Sequence[np.ndarray],
               cfg: DecoderConfig) -> Batch:
    """Pad a list of (alignment, encoder features) pairs and build all masks."""
    B = len(alignments)
    N = max(len(a) for a in alignments)
    T = max(f.shape[0] for f in features)
    tokens = np.full((B, N), BLANK, dtype=np.int64)
    feats = np.zeros((B, T, cfg.audio_dim), dtype=np.float64)
    tm, cm, am, times = [], [], [], []
    for b, (a, f) in enumerate(zip(alignments, features)):
        if f.shape[0] != a.audio_len:
            raise ValueError(f"features have {f.shape[0]} frames, alignment expects {a.audio_len}")
        n = len(a)
        tokens[b, :n] = a.tokens
        feats[b, : f.shape[0]] = f
        ts = timestamps(a)
        times.append(ts)
        tm.append(_pad_mask(band_self_mask(n, cfg.text_mask), N, N))
        cm.append(_pad_mask(time_aligned_cross_mask(ts, a.audio_len, cfg.cross_mask), N, T))
        am.append(_pad_mask(band_self_mask(a.audio_len, cfg.audio_mask), T, T))
    return Batch(
        torch.from_numpy(tokens), torch.tensor([len(a) for a in alignments]),
        torch.from_numpy(feats), torch.tensor([a.audio_len for a in alignments]), times,
        torch.from_numpy(np.stack(tm)), torch.from_numpy(np.stack(cm)), torch.from_numpy(np.stack(am)))


def relabel(batch: Batch, tokens: torch.Tensor, cfg: DecoderConfig) -> Batch:
    """Same utterances with new alignment tokens; timestamps and masks are rebuilt."""
    toks = tokens.detach().cpu().numpy()
    aligns = [Alignment(tuple(toks[b, :n]), int(t))
              for b, (n, t) in enumerate(zip(batch.lengths.tolist(), batch.audio_lens.tolist()))]
    feats = [batch.features[b, :t].numpy() for b, t in enumerate(batch.audio_lens.tolist())]
    return make_batch(aligns, feats, cfg)


def greedy_tokens(log_probs: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximum: ties go to the smallest id (blank).
    toks = torch.argmax(log_probs.detach(), dim=-1)
    pad = torch.arange(toks.shape[1])[None, :] >= lengths[:, None]
    return toks.masked_fill(pad, BLANK)


# -- refinement --------------------------------------------------------------

@dataclass
class StepRecord:
    alignment: Alignment
    times: np.ndarray
    log_probs: np.ndarray
    output: Alignment


@dataclass
class RefinementTrace:
    steps: list[StepRecord] = field(default_factory=list)

    @property
    def final(self) -> Alignment:
        return self.steps[-1].output

    @property
    def labels(self) -> list[int]:
        return collapse(self.final)


def refine_batch(model: AlignRefineDecoder, batch: Batch, steps: int) -> tuple[list[Batch], list[torch.Tensor]]:
    """Run ``steps`` refinement steps; returns per-step input batches and log-probs.

    The greedy relabeling between steps is not differentiated through.
    """
    inputs, outputs = [], []
    for i in range(steps):
        inputs.append(batch)
        lp = model(batch)
        outputs.append(lp)
        if i + 1 < steps:
            batch = relabel(batch, greedy_tokens(lp, batch.lengths), model.cfg)
    return inputs, outputs


def refine_step(a: Alignment, features: np.ndarray, model: AlignRefineDecoder) -> tuple[np.ndarray, Alignment]:
    batch = make_batch([a], [np.asarray(features)], model.cfg)
    with torch.no_grad():
        lp = model(batch)
    out = greedy_tokens(lp, batch.lengths)[0].numpy()
    return lp[0].numpy(), Alignment(tuple(out), a.audio_len)


def refine(a0: Alignment, features: np.ndarray, model: AlignRefineDecoder, steps: int) -> RefinementTrace:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    trace = RefinementTrace()
    a = a0
    for _ in range(steps):
        lp, out = refine_step(a, features, model)
        trace.steps.append(StepRecord(a, timestamps(a), lp, out))
        a = out
    return trace


def _targets(refs: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    U = max([len(y) for y in refs] + [1])
    tgt = torch.zeros((len(refs), U), dtype=torch.long)
    for b, y in enumerate(refs):
        tgt[b, : len(y)] = torch.as_tensor(list(y), dtype=torch.long)
    return tgt, torch.tensor([len(y) for y in refs])


def step_ctc_logprobs(log_probs: Sequence[torch.Tensor], lengths: torch.Tensor,
                      refs: Sequence[Sequence[int]]) -> torch.Tensor:
    """``(S, B)`` CTC log-likelihood of each reference under each step's output."""
    tgt, tlen = _targets(refs)
    return torch.stack([ctc_log_likelihood(lp, lengths, tgt, tlen) for lp in log_probs])


def mle_loss(log_probs: Sequence[torch.Tensor], lengths: torch.Tensor,
             refs: Sequence[Sequence[int]]) -> tuple[torch.Tensor, int]:
    """Mean over steps of the CTC negative log-likelihood, averaged over utterances.

    Utterances whose reference cannot be aligned are dropped; the number
    dropped is returned alongside the loss.
    """
    ll = step_ctc_logprobs(log_probs, lengths, refs)
    per_utt = -ll.mean(dim=0)
    ok = torch.isfinite(per_utt)
    skipped = int((~ok).sum())
    if not ok.any():
        return per_utt.new_zeros(()), skipped
    return per_utt[ok].mean(), skipped


# -- parameters --------------------------------------------------------------

def init_params(cfg: DecoderConfig, seed: int, dtype=torch.float32) -> AlignRefineDecoder:
    """Deterministic initialization.

    Linear weights are Xavier-uniform (gain 1), biases zero, embeddings
    normal with std ``model_dim ** -0.5``, layer norms unit scale.
    """
    gen = torch.Generator().manual_seed(seed)
    model = AlignRefineDecoder(cfg).to(dtype)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "norm" in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif "embedding" in name:
                p.normal_(0.0, cfg.model_dim ** -0.5, generator=gen)
            elif name.endswith("bias"):
                p.zero_()
            else:
                fan_out, fan_in = p.shape
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                p.uniform_(-bound, bound, generator=gen)
    return model


def save_checkpoint(model: AlignRefineDecoder, path: str | Path, extra: dict | None = None) -> None:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float32)."""
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"version": CHECKPOINT_VERSION, "config": model.cfg.to_dict(),
                "tensors": entries, "extra": extra or {}}
    path.with_name(path.name + ".bin").write_bytes(b"".join(chunks))
    path.with_name(path.name + ".json").write_text(json.dumps(manifest, indent=1))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str | Path, dtype=torch.float32) -> AlignRefineDecoder:
    path = Path(path)
    manifest = json.loads(path.with_name(path.name + ".json").read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {manifest.get('version')} != {CHECKPOINT_VERSION}")
    model = AlignRefineDecoder(DecoderConfig(**manifest["config"])).to(dtype)
    blob = path.with_name(path.name + ".bin").read_bytes()
    state = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.copy()).to(dtype)
    model.load_state_dict(state)
    return model
