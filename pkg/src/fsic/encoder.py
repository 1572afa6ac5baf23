"""Utterance encoders: hashing tokenizer, toy transformer backbone, and
the single/joint encoding operations.

Two architectures consume a backbone:

* bi-encoding: each utterance of a pair is encoded independently as
  ``[CLS] x`` and represented by the CLS-position vector; backbone
  parameters are shared between the two sides.
* cross-encoding: the pair is encoded jointly as ``[CLS] q [SEP] c`` and
  represented by the CLS-position vector of the joint sequence.

The toy backbone is a deliberately small, seeded transformer stack that
stands in for a pretrained language model at desk scale. Any external
encoder satisfying the :class:`Backbone` protocol (UTF-8 text in,
length-``dim`` array of finite reals out) plugs into every downstream
component without changes.
"""

from __future__ import annotations

import math
import re
import zlib
from functools import lru_cache
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
import torch
from torch import nn

from .errors import ValidationError

PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
N_RESERVED = 3

_TOKEN_RE = re.compile(r"[a-z0-9']+")


@lru_cache(maxsize=65536)
def _hash_token(token: str, hash_size: int) -> int:
    return N_RESERVED + zlib.crc32(token.encode("utf-8")) % hash_size


def tokenize(text: str, hash_size: int) -> list[int]:
    """Lowercase, split on whitespace/punctuation, hash into a fixed id
    space. CRC32 keeps ids stable across platforms and processes."""
    return [_hash_token(t, hash_size) for t in _TOKEN_RE.findall(text.lower())]


def build_single_sequence(token_ids: Sequence[int], max_len: int) -> tuple[list[int], list[int]]:
    """``[CLS] x`` with truncation to ``max_len``; returns (ids, segments)."""
    ids = [CLS_ID] + list(token_ids[: max_len - 1])
    return ids, [0] * len(ids)


def build_pair_sequence(
    query_ids: Sequence[int], neighbour_ids: Sequence[int], max_len: int
) -> tuple[list[int], list[int]]:
    """``[CLS] q [SEP] c`` with both sides truncated to fit ``max_len``.

    When over budget, tokens are dropped from the end of the longer side
    first (the neighbour on ties), preserving both prefixes.
    """
    q = list(query_ids)
    c = list(neighbour_ids)
    budget = max_len - 2
    if budget < 0:
        raise ValidationError(f"max sequence length {max_len} cannot hold a pair")
    while len(q) + len(c) > budget:
        if len(q) > len(c):
            q.pop()
        else:
            c.pop()
    ids = [CLS_ID] + q + [SEP_ID] + c
    segments = [0] * (1 + len(q)) + [1] * (1 + len(c))
    return ids, segments


@runtime_checkable
class Backbone(Protocol):
    """Adapter contract for text encoders.

    ``encode_texts`` / ``encode_text_pairs`` take UTF-8 strings and
    return an array-like of shape ``[batch, dim]`` with finite values.
    ``dim`` and ``max_sequence_length`` are queryable.
    """

    @property
    def dim(self) -> int: ...

    @property
    def max_sequence_length(self) -> int: ...

    def encode_texts(self, texts: Sequence[str]) -> torch.Tensor: ...

    def encode_text_pairs(self, pairs: Sequence[tuple[str, str]]) -> torch.Tensor: ...


class _Block(nn.Module):
    """Pre-norm transformer block: masked self-attention then FFN."""

    def __init__(self, dim: int, n_heads: int, ffn_dim: int):
        super().__init__()
        if dim % n_heads != 0:
            raise ValidationError(f"dim {dim} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.ln_attn = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.attn_out = nn.Linear(dim, dim)
        self.ln_ffn = nn.LayerNorm(dim)
        self.ffn_in = nn.Linear(dim, ffn_dim)
        self.ffn_out = nn.Linear(ffn_dim, dim)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        b, l, d = x.shape
        h = self.ln_attn(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q = q.view(b, l, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(b, l, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, l, self.n_heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        # mask key positions that are padding
        scores = scores.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        ctx = torch.softmax(scores, dim=-1) @ v
        ctx = ctx.transpose(1, 2).reshape(b, l, d)
        x = x + self.attn_out(ctx)
        h = self.ln_ffn(x)
        x = x + self.ffn_out(torch.tanh(self.ffn_in(h)))
        return x


class ToyBackbone(nn.Module):
    """Seeded desk-scale transformer producing CLS-position vectors.

    Vocabulary is a hash space of ``hash_size`` ids plus reserved
    PAD/CLS/SEP ids. Initialization is fully determined by ``seed``.
    ``forward_count`` tracks how many sequences have been encoded, which
    lets tests assert that bi-encoder caching avoids redundant passes.

    ``match_init_scale`` ties each block's query and key projections to
    one shared random matrix of that scale, making attention between
    repeated tokens strong from the first step (W_q^T W_k is
    approximately a positive multiple of the identity). A pretrained
    language model brings token-matching behaviour for free; this init
    is the desk-scale substitute. Set it to 0 for fully independent
    projections.
    """

    def __init__(
        self,
        dim: int = 32,
        hash_size: int = 2048,
        max_sequence_length: int = 64,
        n_layers: int = 2,
        n_heads: int = 2,
        ffn_dim: int = 64,
        init_scale: float = 0.02,
        match_init_scale: float = 0.2,
        seed: int = 0,
    ):
        super().__init__()
        self._dim = dim
        self.hash_size = hash_size
        self._max_len = max_sequence_length
        self.init_scale = init_scale
        self.match_init_scale = match_init_scale
        self.seed = seed
        self.token_emb = nn.Embedding(N_RESERVED + hash_size, dim, padding_idx=PAD_ID)
        self.pos_emb = nn.Embedding(max_sequence_length, dim)
        self.seg_emb = nn.Embedding(2, dim)
        self.blocks = nn.ModuleList(_Block(dim, n_heads, ffn_dim) for _ in range(n_layers))
        self.ln_final = nn.LayerNorm(dim)
        self.forward_count = 0
        self._init_params()

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def max_sequence_length(self) -> int:
        return self._max_len

    def config_dict(self) -> dict[str, object]:
        """Constructor arguments, for checkpoint round-trips."""
        block = self.blocks[0]
        return {
            "dim": self._dim,
            "hash_size": self.hash_size,
            "max_sequence_length": self._max_len,
            "n_layers": len(self.blocks),
            "n_heads": block.n_heads,
            "ffn_dim": block.ffn_in.out_features,
            "init_scale": self.init_scale,
            "match_init_scale": self.match_init_scale,
            "seed": self.seed,
        }

    def _init_params(self) -> None:
        gen = torch.Generator().manual_seed(self.seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.dim() >= 2:
                    p.copy_(torch.randn(p.shape, generator=gen) * self.init_scale)
                elif "ln" in name and name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()
            self.token_emb.weight[PAD_ID].zero_()
            if self.match_init_scale > 0:
                d = self._dim
                for block in self.blocks:
                    shared = torch.randn((d, d), generator=gen) * self.match_init_scale
                    block.qkv.weight[:d] = shared
                    block.qkv.weight[d : 2 * d] = shared

    def tokenize(self, text: str) -> list[int]:
        return tokenize(text, self.hash_size)

    def encode_sequences(self, sequences: Sequence[tuple[list[int], list[int]]]) -> torch.Tensor:
        """Encode pre-built (ids, segments) sequences to CLS vectors.

        Pads to the longest sequence in the batch; padding is excluded
        from attention so it cannot leak into the CLS position.
        """
        if not sequences:
            raise ValidationError("empty sequence batch")
        max_l = max(len(ids) for ids, _ in sequences)
        batch = torch.full((len(sequences), max_l), PAD_ID, dtype=torch.long)
        segs = torch.zeros((len(sequences), max_l), dtype=torch.long)
        for i, (ids, seg) in enumerate(sequences):
            batch[i, : len(ids)] = torch.tensor(ids, dtype=torch.long)
            segs[i, : len(seg)] = torch.tensor(seg, dtype=torch.long)
        pad_mask = batch == PAD_ID
        pos = torch.arange(max_l, dtype=torch.long).unsqueeze(0)
        x = self.token_emb(batch) + self.pos_emb(pos) + self.seg_emb(segs)
        for block in self.blocks:
            x = block(x, pad_mask)
        x = self.ln_final(x)
        self.forward_count += len(sequences)
        return x[:, 0]

    def _content_ids(self, text: str) -> list[int]:
        ids = self.tokenize(text)
        if not ids:
            raise ValidationError(f"text tokenizes to an empty sequence: {text!r}")
        return ids

    def encode_texts(self, texts: Sequence[str]) -> torch.Tensor:
        seqs = [build_single_sequence(self._content_ids(t), self._max_len) for t in texts]
        return self.encode_sequences(seqs)

    def encode_text_pairs(self, pairs: Sequence[tuple[str, str]]) -> torch.Tensor:
        seqs = [
            build_pair_sequence(self._content_ids(q), self._content_ids(c), self._max_len)
            for q, c in pairs
        ]
        return self.encode_sequences(seqs)


def _text_of(utterance: object) -> str:
    return getattr(utterance, "text", utterance)  # type: ignore[return-value]


def _check_finite(vec: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(vec)):
        raise ValidationError("backbone produced a non-finite vector")
    return vec


def encode_single(backbone: Backbone, utterance: object) -> np.ndarray:
    """CLS-position vector of one utterance, as a numpy array (no grad)."""
    with torch.no_grad():
        out = backbone.encode_texts([_text_of(utterance)])
    return _check_finite(np.asarray(out, dtype=np.float64)[0])


def encode_pair_cross(backbone: Backbone, query: object, neighbour: object) -> np.ndarray:
    """CLS-position vector of the joint ``[CLS] q [SEP] c`` sequence."""
    with torch.no_grad():
        out = backbone.encode_text_pairs([(_text_of(query), _text_of(neighbour))])
    return _check_finite(np.asarray(out, dtype=np.float64)[0])


def encode_pair_bi(
    backbone: Backbone, query: object, neighbour: object
) -> tuple[np.ndarray, np.ndarray]:
    """Independent encodings of query and neighbour (shared parameters).

    Equals ``encode_single`` on each side exactly; neighbour encodings
    may therefore be cached and reused across queries.
    """
    return encode_single(backbone, query), encode_single(backbone, neighbour)
