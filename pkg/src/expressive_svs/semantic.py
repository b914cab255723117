"""Lyric semantics: word embeddings, word-to-phoneme expansion, text encoder.

Word-level (one per lyric character) contextual embeddings come from a
provider. :func:`build_expansion_plan` works out how the annotated phoneme
sequence maps back to the characters, and :func:`expand_embeddings`
replicates each character vector over its phonemes, inserting zero vectors
at ``SP``/``AP``.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
from torch import nn

from .corpus import REST_MARKERS
from .errors import AlignmentFailure, PlanMismatch, ProviderUnavailable, ShapeMismatch, TokenizationMismatch
from .layers import FFTEncoder, sequence_mask

logger = logging.getLogger(__name__)

EMBED_DIM = 768
VARIANTS = ("standard", "reversed", "off")


class EmbeddingProvider(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray:
        """Return an array of shape (len(text), dim)."""


class StubProvider:
    """Deterministic offline provider.

    Each character gets a vector drawn from a generator seeded by a hash of
    the character; neighbours are mixed in so the vectors depend on context.
    """

    def __init__(self, dim=EMBED_DIM, seed=0, context_weight=0.5):
        self.dim = dim
        self.seed = seed
        self.context_weight = context_weight

    def _base(self, char):
        digest = hashlib.sha256(f"{self.seed}:{char}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return rng.standard_normal(self.dim)

    def embed(self, text):
        base = np.stack([self._base(c) for c in text]) if text else np.zeros((0, self.dim))
        out = base.copy()
        out[1:] += self.context_weight * base[:-1]
        out[:-1] += self.context_weight * base[1:]
        return out / np.sqrt(1 + 2 * self.context_weight**2)


class BertProvider:
    """Pre-trained bidirectional encoder loaded with ``transformers``.

    Sub-word tokens are mean-pooled back to one vector per character using
    the tokenizer's offset mapping.
    """

    def __init__(self, checkpoint, device="cpu"):
        self.checkpoint = str(checkpoint)
        self.device = device
        self._model = None
        self._tokenizer = None
        self.dim = EMBED_DIM

    def load(self):
        if self._model is not None:
            return self
        if not Path(self.checkpoint).exists():
            raise ProviderUnavailable(f"no checkpoint at {self.checkpoint}")
        try:
            from transformers import AutoModel, AutoTokenizer
        except ImportError as e:
            raise ProviderUnavailable("transformers is not installed") from e
        try:
            self._tokenizer = AutoTokenizer.from_pretrained(self.checkpoint, use_fast=True)
            self._model = AutoModel.from_pretrained(self.checkpoint).to(self.device).eval()
        except (OSError, ValueError) as e:
            raise ProviderUnavailable(f"cannot load {self.checkpoint}: {e}") from e
        self.dim = self._model.config.hidden_size
        return self

    @torch.no_grad()
    def embed(self, text):
        self.load()
        enc = self._tokenizer(text, return_offsets_mapping=True, return_tensors="pt")
        offsets = enc.pop("offset_mapping")[0].tolist()
        hidden = self._model(**{k: v.to(self.device) for k, v in enc.items()}).last_hidden_state[0].cpu().numpy()
        out = np.zeros((len(text), hidden.shape[1]))
        counts = np.zeros(len(text))
        for vec, (start, end) in zip(hidden, offsets):
            if end <= start:
                continue  # special token
            out[start:end] += vec
            counts[start:end] += 1
        if np.any(counts == 0):
            missing = [text[i] for i in np.nonzero(counts == 0)[0]]
            raise TokenizationMismatch(f"no tokens cover characters {missing!r}")
        return out / counts[:, None]


def load_provider(spec, seed=0):
    """``"stub"`` -> :class:`StubProvider`, anything else is a checkpoint path."""
    if spec in (None, "", "stub"):
        return StubProvider(seed=seed)
    return BertProvider(spec).load()


@dataclass
class WordEmbeddingSeq:
    vectors: np.ndarray
    words: str

    def __len__(self):
        return len(self.words)


def embed_words(text, provider):
    if provider is None:
        raise ProviderUnavailable("no embedding provider configured")
    vectors = np.asarray(provider.embed(text), dtype=np.float64)
    if vectors.shape[0] != len(text):
        raise TokenizationMismatch(f"{vectors.shape[0]} vectors for {len(text)} characters")
    return WordEmbeddingSeq(vectors, text)


class PinyinLexicon:
    """Character -> candidate pinyin readings, most likely first (pypinyin)."""

    def __init__(self, overrides=None):
        self.overrides = dict(overrides or {})

    @lru_cache(maxsize=8192)
    def readings(self, char):
        if char in self.overrides:
            value = self.overrides[char]
            return [value] if isinstance(value, str) else list(value)
        from pypinyin import Style, pinyin

        return list(pinyin(char, style=Style.NORMAL, heteronym=True)[0])

    def __call__(self, char):
        return self.readings(char)


def _readings(lexicon, char):
    if callable(lexicon):
        return list(lexicon(char))
    value = lexicon[char]
    return [value] if isinstance(value, str) else list(value)


@dataclass
class ExpansionPlan:
    n1: list  # phonemes per word
    n2: list  # repetitions per dictionary phoneme
    rest_indices: list  # SP/AP positions in the phoneme sequence
    readings: list = field(default_factory=list)

    @property
    def n_words(self):
        return len(self.n1)

    @property
    def n_phonemes(self):
        return int(sum(self.n2)) + len(self.rest_indices)

    def source_index(self):
        """Word index feeding each phoneme position, -1 at rests."""
        total = self.n_phonemes
        src = np.full(total, -1, dtype=np.int64)
        rests = set(self.rest_indices)
        slots = [i for i in range(total) if i not in rests]
        words = np.repeat(np.arange(self.n_words), self.n1)
        filled = np.repeat(words, self.n2)
        if len(filled) != len(slots):
            raise PlanMismatch("repetition counts do not fill the non-rest positions")
        src[slots] = filled
        return src

    def to_dict(self):
        return {"n1": list(map(int, self.n1)), "n2": list(map(int, self.n2)), "rest_indices": list(map(int, self.rest_indices))}


def build_expansion_plan(text, phonemes, lexicon, phoneme_dict, slur_flags=None):
    """Match characters against the annotated phoneme sequence.

    Each character's candidate readings are tried in lexicon order; the
    final dictionary phoneme of a syllable absorbs consecutive repeats (only
    slurred ones when ``slur_flags`` is given). Matching is greedy
    (longest repetition first) with backtracking when a later character
    cannot be placed.
    """
    phonemes = list(phonemes)
    L = len(phonemes)

    def can_repeat(pos):
        return slur_flags is None or bool(slur_flags[pos])

    def skip(pos):
        start = pos
        while pos < L and phonemes[pos] in REST_MARKERS:
            pos += 1
        return pos, list(range(start, pos))

    def options(char, pos):
        for reading in _readings(lexicon, char):
            phs = phoneme_dict.get(reading)
            if not phs:
                continue
            yield from _match(reading, tuple(phs), pos)

    def _match(reading, phs, pos):
        # all ways to place ``phs`` at ``pos`` with repeats, longest first
        def rec(k, p):
            if k == len(phs):
                yield [], p
                return
            if p >= L or phonemes[p] != phs[k]:
                return
            run = 1
            while p + run < L and phonemes[p + run] == phs[k] and can_repeat(p + run):
                run += 1
            for r in range(run, 0, -1):
                for rest, end in rec(k + 1, p + r):
                    yield [r] + rest, end

        for reps, end in rec(0, pos):
            yield reading, len(phs), reps, end

    failed = set()

    def solve(w, pos):
        pos, rests = skip(pos)
        if w == len(text):
            return ([], [], rests, []) if pos == L else None
        if (w, pos) in failed:
            return None
        for reading, n_ph, reps, end in options(text[w], pos):
            tail = solve(w + 1, end)
            if tail is not None:
                n1, n2, r, rd = tail
                return [n_ph] + n1, reps + n2, rests + r, [reading] + rd
        failed.add((w, pos))
        return None

    result = solve(0, 0)
    if result is None:
        raise AlignmentFailure(f"cannot align {text!r} with phonemes {' '.join(phonemes)}")
    n1, n2, rests, readings = result
    return ExpansionPlan(n1, n2, rests, readings)


def expand_embeddings(words, plan):
    """Replicate word vectors to phoneme level; zero vectors at rests."""
    vectors = words.vectors if isinstance(words, WordEmbeddingSeq) else words
    if isinstance(vectors, torch.Tensor):
        return expand_tensor(vectors, plan)
    vectors = np.asarray(vectors)
    if vectors.shape[0] != plan.n_words:
        raise PlanMismatch(f"{vectors.shape[0]} word vectors for a plan over {plan.n_words} words")
    src = plan.source_index()
    out = np.zeros((len(src), vectors.shape[1]), dtype=vectors.dtype)
    keep = src >= 0
    out[keep] = vectors[src[keep]]
    return out


def expand_tensor(vectors, plan_or_index):
    """Torch version of :func:`expand_embeddings` on a (N, D) tensor."""
    src = plan_or_index.source_index() if isinstance(plan_or_index, ExpansionPlan) else np.asarray(plan_or_index)
    n_words = vectors.size(0)
    if src.size and src.max() >= n_words:
        raise PlanMismatch(f"{n_words} word vectors for a plan referencing word {src.max()}")
    padded = torch.cat([vectors, vectors.new_zeros(1, vectors.size(1))], dim=0)
    idx = torch.as_tensor(np.where(src >= 0, src, n_words), device=vectors.device)
    return padded.index_select(0, idx)


@dataclass
class SemanticEncoderConfig:
    n_fft_blocks: int = 6
    hidden_dim: int = 192
    input_dim: int = EMBED_DIM
    variant: str = "standard"
    block_dim: int = 192  # set to input_dim to run the blocks at full width
    n_heads: int = 2
    filter_dim: int = 768
    kernel_size: int = 3
    dropout: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if min(self.n_fft_blocks, self.hidden_dim, self.input_dim, self.block_dim) <= 0:
            raise ValueError("dimensions must be positive")


class SemanticEncoder(nn.Module):
    """Positional encoding + FFT blocks + output projection to ``hidden_dim``."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.pre = nn.Linear(cfg.input_dim, cfg.block_dim) if cfg.block_dim != cfg.input_dim else nn.Identity()
        self.encoder = FFTEncoder(cfg.block_dim, cfg.filter_dim, cfg.n_heads, cfg.n_fft_blocks, cfg.kernel_size, cfg.dropout)
        self.proj = nn.Linear(cfg.block_dim, cfg.hidden_dim)

    def forward(self, x, lengths):
        """x: (B, L, input_dim) -> (B, hidden_dim, L)."""
        if x.dim() != 3 or x.size(-1) != self.cfg.input_dim or x.size(1) == 0:
            raise ShapeMismatch(f"expected (B, L>0, {self.cfg.input_dim}), got {tuple(x.shape)}")
        mask = sequence_mask(lengths, x.size(1)).unsqueeze(1).to(x.dtype)
        h = self.pre(x).transpose(1, 2)
        h = self.encoder(h, mask)
        return self.proj(h.transpose(1, 2)).transpose(1, 2) * mask


def encode_semantics(embeddings, cfg, encoder, plan=None):
    """Encode one utterance's semantic vectors to phoneme-level hidden states.

    ``standard``: ``embeddings`` are word-level; they are expanded with
    ``plan`` (if given) and then encoded. ``reversed``: word-level vectors are
    encoded first and the result is expanded. Returns (L, hidden_dim).
    """
    x = torch.as_tensor(np.asarray(embeddings) if not isinstance(embeddings, torch.Tensor) else embeddings)
    x = x.to(next(encoder.parameters()).dtype)
    if x.dim() != 2 or x.size(0) == 0 or x.size(1) != cfg.input_dim:
        raise ShapeMismatch(f"expected (L>0, {cfg.input_dim}), got {tuple(x.shape)}")
    if cfg.variant == "reversed":
        h = encoder(x[None], torch.tensor([x.size(0)]))[0].t()
        return expand_tensor(h, plan) if plan is not None else h
    if plan is not None:
        x = expand_tensor(x, plan)
    return encoder(x[None], torch.tensor([x.size(0)]))[0].t()
