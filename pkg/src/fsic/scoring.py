"""Similarity scoring: the parameterized head, the non-parameterized
scores, and the model object tying a backbone to a scoring path.

Three configurations exist. Cross-encoding feeds the joint pair vector
to a trainable sigmoid head (CE+PA). Bi-encoding either concatenates
the two vectors with their difference and product blocks and feeds a
trainable head (BE+PA), or scores without parameters (BE+NP): sigmoid
of the dot product while training, cosine similarity at inference.
Cross-encoding cannot be combined with non-parameterized scoring: there
is only one joint vector, so there is nothing to compare.

Eval-mode scoring detaches encodings to float64 numpy and computes
scores there; the torch graph is only used by the training steps.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterator, Sequence

import numpy as np
import torch
from torch import nn

from .encoder import Backbone
from .errors import ConfigurationError, NumericError, ValidationError

ARCHITECTURES = ("CE", "BE")
SCORING_KINDS = ("PA", "NP")

COSINE_NORM_FLOOR = 1e-12
DEFAULT_CLAMP_EPS = 1e-7


def stable_sigmoid(x):
    """Sigmoid computed in split form so large ``|x|`` cannot overflow."""
    arr = np.asarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ex = np.exp(arr[~pos])
    out[~pos] = ex / (1.0 + ex)
    return float(out) if np.isscalar(x) or arr.ndim == 0 else out


class PAHead(nn.Module):
    """Trainable scoring head: sigmoid(W @ features + b).

    ``W`` is ``1 x in_features`` initialized uniform in
    ``(-1/sqrt(in_features), +1/sqrt(in_features))`` and ``b`` starts at
    zero, keeping initial scores near 0.5. Dropout on the input features
    is available but off by default.
    """

    def __init__(self, in_features: int, seed: int = 0, dropout: float = 0.0):
        super().__init__()
        self.in_features = in_features
        self.linear = nn.Linear(in_features, 1)
        self.dropout = dropout
        gen = torch.Generator().manual_seed(seed)
        bound = 1.0 / np.sqrt(in_features)
        with torch.no_grad():
            self.linear.weight.copy_(
                torch.rand(self.linear.weight.shape, generator=gen) * 2 * bound - bound
            )
            self.linear.bias.zero_()

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.in_features:
            raise ValidationError(
                f"scoring head expects features of length {self.in_features}, "
                f"got {features.shape[-1]}"
            )
        if self.dropout > 0 and self.training:
            features = torch.dropout(features, self.dropout, train=True)
        return self.linear(features).squeeze(-1)

    def weight_vector(self) -> tuple[np.ndarray, float]:
        """Detached ``(w, b)`` in float64 for eval-mode scoring."""
        w = self.linear.weight.detach().cpu().numpy().astype(np.float64).reshape(-1)
        b = float(self.linear.bias.detach().cpu().numpy()[0])
        return w, b


def pa_score(head: PAHead, features: np.ndarray) -> float:
    """Score one feature vector through the parameterized head."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 1 or features.shape[0] != head.in_features:
        raise ValidationError(
            f"scoring head expects features of length {head.in_features}, "
            f"got {features.shape[-1] if features.ndim else 0}"
        )
    w, b = head.weight_vector()
    return float(stable_sigmoid(features @ w + b))


def bi_pair_features(h_q: np.ndarray, h_c: np.ndarray) -> np.ndarray:
    """Pair features for bi-encoding: ``h_q (+) h_c (+) |h_q - h_c| (+) h_q * h_c``."""
    h_q = np.asarray(h_q, dtype=np.float64)
    h_c = np.asarray(h_c, dtype=np.float64)
    if h_q.shape != h_c.shape or h_q.ndim != 1:
        raise ValidationError(f"expected two equal-length vectors, got {h_q.shape} and {h_c.shape}")
    return np.concatenate([h_q, h_c, np.abs(h_q - h_c), h_q * h_c])


def np_train_score(h_q: np.ndarray, h_c: np.ndarray) -> float:
    """Training-time non-parameterized score: sigmoid of the dot product."""
    h_q = np.asarray(h_q, dtype=np.float64)
    h_c = np.asarray(h_c, dtype=np.float64)
    if h_q.shape != h_c.shape:
        raise ValidationError(f"length mismatch: {h_q.shape} vs {h_c.shape}")
    return float(stable_sigmoid(float(h_q @ h_c)))


def np_infer_score(h_q: np.ndarray, h_c: np.ndarray) -> float:
    """Inference-time non-parameterized score: cosine similarity."""
    h_q = np.asarray(h_q, dtype=np.float64)
    h_c = np.asarray(h_c, dtype=np.float64)
    if h_q.shape != h_c.shape:
        raise ValidationError(f"length mismatch: {h_q.shape} vs {h_c.shape}")
    nq = float(np.linalg.norm(h_q))
    nc = float(np.linalg.norm(h_c))
    if nq < COSINE_NORM_FLOOR or nc < COSINE_NORM_FLOOR:
        raise NumericError("cosine similarity undefined for (near-)zero-norm vector")
    return float(h_q @ h_c) / (nq * nc)


def _bi_features_torch(h_q: torch.Tensor, h_c: torch.Tensor) -> torch.Tensor:
    return torch.cat([h_q, h_c, (h_q - h_c).abs(), h_q * h_c], dim=-1)


class SimilarityModel(nn.Module):
    """A backbone plus one of the three scoring configurations.

    ``mode="train"`` produces scores strictly inside (0, 1): sigmoid of
    the configured logit, clamped to ``[clamp_eps, 1 - clamp_eps]`` so
    downstream cross-entropy stays finite. ``mode="infer"`` produces the
    prediction-time score: the sigmoid score for parameterized heads and
    cosine similarity for BE+NP.
    """

    def __init__(
        self,
        backbone: Backbone,
        architecture: str,
        scoring: str,
        head_seed: int = 0,
        head_dropout: float = 0.0,
        clamp_eps: float = DEFAULT_CLAMP_EPS,
        eval_chunk_size: int = 256,
    ):
        super().__init__()
        if architecture not in ARCHITECTURES:
            raise ConfigurationError(f"unknown architecture {architecture!r}")
        if scoring not in SCORING_KINDS:
            raise ConfigurationError(f"unknown scoring {scoring!r}")
        if architecture == "CE" and scoring == "NP":
            raise ConfigurationError(
                "cross-encoding yields a single joint vector, so it cannot be "
                "combined with non-parameterized scoring"
            )
        self.backbone = backbone
        self.architecture = architecture
        self.scoring = scoring
        self.clamp_eps = clamp_eps
        self.eval_chunk_size = eval_chunk_size
        self.head_seed = head_seed
        self.head: PAHead | None = None
        if scoring == "PA":
            in_features = backbone.dim if architecture == "CE" else 4 * backbone.dim
            self.head = PAHead(in_features, seed=head_seed, dropout=head_dropout)
        self._cache: dict[str, np.ndarray] | None = None

    @property
    def configuration(self) -> str:
        return f"{self.architecture}+{self.scoring}"

    def config_dict(self) -> dict[str, object]:
        cfg: dict[str, object] = {
            "architecture": self.architecture,
            "scoring": self.scoring,
            "head_seed": self.head_seed,
            "head_dropout": self.head.dropout if self.head is not None else 0.0,
            "clamp_eps": self.clamp_eps,
        }
        if hasattr(self.backbone, "config_dict"):
            cfg["backbone"] = self.backbone.config_dict()
        return cfg

    # ------------------------------------------------------------------
    # training path (torch graph)
    # ------------------------------------------------------------------

    def pool_logits(
        self, texts: Sequence[str], pair_q: torch.Tensor, pair_c: torch.Tensor
    ) -> torch.Tensor:
        """Bi-encoding logits for index pairs into ``texts``.

        Each text is encoded once; pair features reuse the shared
        encodings, so gradients flow through every pair an utterance
        participates in.
        """
        if self.architecture != "BE":
            raise ConfigurationError("pool_logits is a bi-encoding path")
        h = self.backbone.encode_texts(texts)
        h_q, h_c = h[pair_q], h[pair_c]
        if self.scoring == "PA":
            assert self.head is not None
            return self.head(_bi_features_torch(h_q, h_c))
        return (h_q * h_c).sum(-1)

    def cross_logits(self, pair_texts: Sequence[tuple[str, str]]) -> torch.Tensor:
        """Cross-encoding logits for explicit text pairs (one chunk)."""
        if self.architecture != "CE":
            raise ConfigurationError("cross_logits is a cross-encoding path")
        assert self.head is not None
        return self.head(self.backbone.encode_text_pairs(pair_texts))

    def train_scores(self, logits: torch.Tensor) -> torch.Tensor:
        """Sigmoid scores clamped strictly inside (0, 1)."""
        return torch.sigmoid(logits).clamp(self.clamp_eps, 1.0 - self.clamp_eps)

    # ------------------------------------------------------------------
    # eval path (numpy float64, no grad)
    # ------------------------------------------------------------------

    @contextmanager
    def eval_cache(self) -> Iterator[dict[str, np.ndarray]]:
        """Scope a bi-encoding text->vector cache (valid while parameters
        are frozen; training invalidates it, hence the explicit scope)."""
        previous = self._cache
        self._cache = {}
        try:
            yield self._cache
        finally:
            self._cache = previous

    def _encode_eval(self, text: str, cache: dict[str, np.ndarray]) -> np.ndarray:
        hit = cache.get(text)
        if hit is None:
            with torch.no_grad():
                out = self.backbone.encode_texts([text])
            hit = np.asarray(out, dtype=np.float64)[0]
            if not np.all(np.isfinite(hit)):
                raise NumericError(f"backbone produced a non-finite vector for {text!r}")
            cache[text] = hit
        return hit

    def score_matrix(
        self, queries: Sequence[str], neighbours: Sequence[str], mode: str = "infer"
    ) -> np.ndarray:
        """Scores for every (query, neighbour) pair, shape ``[nq, nn]``.

        Bi-encoding encodes each distinct text once per call (or once
        per :meth:`eval_cache` scope); cross-encoding encodes the full
        pair grid in fixed-size chunks.
        """
        if mode not in ("train", "infer"):
            raise ValidationError(f"unknown scoring mode {mode!r}")
        if not queries or not neighbours:
            raise ValidationError("queries and neighbours must be non-empty")
        if self.architecture == "BE":
            cache = self._cache if self._cache is not None else {}
            h_q = np.stack([self._encode_eval(t, cache) for t in queries])
            h_c = np.stack([self._encode_eval(t, cache) for t in neighbours])
            if self.scoring == "PA":
                assert self.head is not None
                w, b = self.head.weight_vector()
                d = h_q.shape[1]
                diff = np.abs(h_q[:, None, :] - h_c[None, :, :])
                prod = h_q[:, None, :] * h_c[None, :, :]
                feats = np.concatenate(
                    [
                        np.broadcast_to(h_q[:, None, :], diff.shape),
                        np.broadcast_to(h_c[None, :, :], diff.shape),
                        diff,
                        prod,
                    ],
                    axis=-1,
                )
                logits = feats.reshape(-1, 4 * d) @ w + b
                logits = logits.reshape(len(queries), len(neighbours))
                scores = stable_sigmoid(logits)
            else:
                if mode == "train":
                    scores = stable_sigmoid(h_q @ h_c.T)
                else:
                    nq = np.linalg.norm(h_q, axis=1)
                    nc = np.linalg.norm(h_c, axis=1)
                    if np.any(nq < COSINE_NORM_FLOOR) or np.any(nc < COSINE_NORM_FLOOR):
                        raise NumericError("cosine similarity undefined for zero-norm vector")
                    scores = (h_q / nq[:, None]) @ (h_c / nc[:, None]).T
        else:
            assert self.head is not None
            w, b = self.head.weight_vector()
            pairs = [(q, c) for q in queries for c in neighbours]
            rows: list[np.ndarray] = []
            with torch.no_grad():
                for start in range(0, len(pairs), self.eval_chunk_size):
                    chunk = pairs[start : start + self.eval_chunk_size]
                    h = np.asarray(self.backbone.encode_text_pairs(chunk), dtype=np.float64)
                    rows.append(h @ w + b)
            logits = np.concatenate(rows).reshape(len(queries), len(neighbours))
            scores = stable_sigmoid(logits)
        if mode == "train":
            scores = np.clip(scores, self.clamp_eps, 1.0 - self.clamp_eps)
        return scores

    def score_all(self, query: object, neighbours: Sequence[object], mode: str = "infer") -> np.ndarray:
        """Scores between one query and an ordered neighbour list."""
        query_text = getattr(query, "text", query)
        neighbour_texts = [getattr(c, "text", c) for c in neighbours]
        return self.score_matrix([query_text], neighbour_texts, mode=mode)[0]
