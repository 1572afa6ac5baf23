"""Label queries from a support set.

The core rule is nearest-neighbour with k=1: score the query against
every labeled support utterance and take the label of the highest
score. Ties break toward the lowest neighbour index everywhere, so
predictions are reproducible. The prototype baseline instead averages
each intent's support encodings and picks the closest prototype, and
the random baseline draws a label uniformly.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np
import torch

from .data import IntentLabel, Utterance
from .encoder import Backbone
from .episodes import Episode
from .errors import ValidationError
from .scoring import SimilarityModel


@dataclass(frozen=True)
class Prediction:
    """One classified query with its audit trail of candidate scores."""

    query_id: str
    label: IntentLabel
    score: float
    candidate_labels: tuple[IntentLabel, ...]
    candidate_scores: tuple[float, ...]

    def to_dict(self) -> dict[str, object]:
        return {
            "query_id": self.query_id,
            "label": self.label,
            "score": self.score,
            "candidate_labels": list(self.candidate_labels),
            "candidate_scores": list(self.candidate_scores),
        }


class PairScorer(Protocol):
    """Anything that scores one query text against neighbour texts."""

    def score_all(
        self, query: object, neighbours: Sequence[object], mode: str = "infer"
    ) -> np.ndarray: ...

    def score_matrix(
        self, queries: Sequence[str], neighbours: Sequence[str], mode: str = "infer"
    ) -> np.ndarray: ...


class VectorPairScorer:
    """Adapts a frozen backbone plus a vector-pair score to PairScorer.

    Used for baselines whose similarity is a fixed function of two
    encodings, e.g. cosine or negative squared Euclidean distance.
    Encodings are computed once per distinct text within a call.
    """

    def __init__(self, backbone: Backbone, pair_score_fn):
        self.backbone = backbone
        self.pair_score_fn = pair_score_fn

    def _encode(self, texts: Sequence[str]) -> list[np.ndarray]:
        cache: dict[str, np.ndarray] = {}
        out = []
        for t in texts:
            if t not in cache:
                with torch.no_grad():
                    cache[t] = np.asarray(self.backbone.encode_texts([t]), dtype=np.float64)[0]
            out.append(cache[t])
        return out

    def score_matrix(
        self, queries: Sequence[str], neighbours: Sequence[str], mode: str = "infer"
    ) -> np.ndarray:
        if not queries or not neighbours:
            raise ValidationError("queries and neighbours must be non-empty")
        h_all = self._encode(list(queries) + list(neighbours))
        h_q, h_c = h_all[: len(queries)], h_all[len(queries) :]
        return np.array([[self.pair_score_fn(q, c) for c in h_c] for q in h_q])

    def score_all(
        self, query: object, neighbours: Sequence[object], mode: str = "infer"
    ) -> np.ndarray:
        q = getattr(query, "text", query)
        cs = [getattr(c, "text", c) for c in neighbours]
        return self.score_matrix([q], cs, mode=mode)[0]


def neg_sq_euclidean(h_q: np.ndarray, h_c: np.ndarray) -> float:
    """Negative squared Euclidean distance (higher is more similar)."""
    d = np.asarray(h_q, dtype=np.float64) - np.asarray(h_c, dtype=np.float64)
    return float(-(d @ d))


def nn_predict(model: PairScorer, query: Utterance, support: Sequence[Utterance]) -> Prediction:
    """Nearest-neighbour rule: the label of the top-scoring neighbour."""
    if not support:
        raise ValidationError("support set must be non-empty")
    scores = np.asarray(model.score_all(query, support, mode="infer"), dtype=np.float64)
    best = int(np.argmax(scores))  # ties resolve to the lowest index
    return Prediction(
        query_id=query.id,
        label=support[best].label,
        score=float(scores[best]),
        candidate_labels=tuple(u.label for u in support),
        candidate_scores=tuple(float(s) for s in scores),
    )


def nn_predict_episode(model: PairScorer, episode: Episode) -> list[Prediction]:
    """Nearest-neighbour predictions for a whole episode.

    Uses the matrix path so bi-encoding computes each support encoding
    once per episode instead of once per query.
    """
    if not episode.query:
        raise ValidationError(f"episode {episode.episode_id} has no queries")
    queries = [u.text for u in episode.query]
    supports = [u.text for u in episode.support]
    matrix = np.asarray(model.score_matrix(queries, supports, mode="infer"), dtype=np.float64)
    labels = tuple(u.label for u in episode.support)
    out = []
    for qi, q in enumerate(episode.query):
        best = int(np.argmax(matrix[qi]))
        out.append(
            Prediction(
                query_id=q.id,
                label=labels[best],
                score=float(matrix[qi, best]),
                candidate_labels=labels,
                candidate_scores=tuple(float(s) for s in matrix[qi]),
            )
        )
    return out


def _group_support(
    support: Sequence[Utterance], intent_order: Sequence[IntentLabel] | None
) -> dict[IntentLabel, list[Utterance]]:
    groups: dict[IntentLabel, list[Utterance]] = {}
    order = list(intent_order) if intent_order is not None else []
    for u in support:
        if u.label not in groups:
            groups[u.label] = []
            if intent_order is None:
                order.append(u.label)
        groups[u.label].append(u)
    missing = [i for i in order if i not in groups]
    if missing:
        raise ValidationError(f"intents {missing} have no support utterances")
    return {i: groups[i] for i in order}


def protonet_predict(
    backbone: Backbone,
    query: Utterance,
    support: Sequence[Utterance],
    intent_order: Sequence[IntentLabel] | None = None,
) -> Prediction:
    """Prototype rule: mean each intent's support encodings, pick the
    class with the smallest squared Euclidean distance.

    ``candidate_scores`` are softmax probabilities over negative
    distances, ordered by ``intent_order`` (first-appearance order of
    the support list when not given). Ties break toward the lowest
    class index.
    """
    if not support:
        raise ValidationError("support set must be non-empty")
    groups = _group_support(support, intent_order)
    scorer = VectorPairScorer(backbone, neg_sq_euclidean)
    h_all = scorer._encode([query.text] + [u.text for g in groups.values() for u in g])
    h_q = h_all[0]
    prototypes = []
    cursor = 1
    for g in groups.values():
        block = np.stack(h_all[cursor : cursor + len(g)])
        cursor += len(g)
        prototypes.append(block.mean(axis=0))
    neg_d = np.array([neg_sq_euclidean(h_q, p) for p in prototypes])
    shifted = neg_d - neg_d.max()
    probs = np.exp(shifted) / np.exp(shifted).sum()
    best = int(np.argmax(neg_d))
    labels = tuple(groups.keys())
    return Prediction(
        query_id=query.id,
        label=labels[best],
        score=float(probs[best]),
        candidate_labels=labels,
        candidate_scores=tuple(float(p) for p in probs),
    )


def random_predict(
    intents: Sequence[IntentLabel], rng: random.Random, query_id: str = ""
) -> Prediction:
    """Uniform draw over the episode's intents."""
    if not intents:
        raise ValidationError("intent set must be non-empty")
    label = intents[rng.randrange(len(intents))]
    p = 1.0 / len(intents)
    return Prediction(
        query_id=query_id,
        label=label,
        score=p,
        candidate_labels=tuple(intents),
        candidate_scores=tuple(p for _ in intents),
    )


def frozen_be_np_model(backbone: Backbone) -> SimilarityModel:
    """The no-fine-tuning baseline: bi-encoding with cosine inference
    over the backbone exactly as given."""
    model = SimilarityModel(backbone, architecture="BE", scoring="NP")
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def frozen_be_np_predict(
    backbone: Backbone, query: Utterance, support: Sequence[Utterance]
) -> Prediction:
    """Nearest-neighbour under the frozen bi-encoder cosine baseline."""
    return nn_predict(frozen_be_np_model(backbone), query, support)


def protonet_episode_loss(backbone: Backbone, episode: Episode) -> torch.Tensor:
    """Episodic prototype loss: mean NLL of the true class under the
    softmax over negative squared distances to class prototypes.

    Standard prototypical-network training, provided so the baseline
    can be fine-tuned episodically like the similarity models.
    """
    if not episode.query:
        raise ValidationError(f"episode {episode.episode_id} has no queries")
    intent_index = {label: i for i, label in enumerate(episode.intents)}
    h_s = backbone.encode_texts([u.text for u in episode.support])
    h_q = backbone.encode_texts([u.text for u in episode.query])
    prototypes = []
    for label in episode.intents:
        idx = [i for i, u in enumerate(episode.support) if u.label == label]
        prototypes.append(h_s[idx].mean(dim=0))
    protos = torch.stack(prototypes)
    dists = ((h_q[:, None, :] - protos[None, :, :]) ** 2).sum(-1)
    targets = torch.tensor([intent_index[u.label] for u in episode.query], dtype=torch.long)
    return torch.nn.functional.cross_entropy(-dists, targets)


def save_predictions(
    path: str | Path, per_episode: Mapping[int, Sequence[tuple[Utterance, Prediction]]]
) -> None:
    """Write predictions as JSONL: one ``{episode_id, query_id, gold,
    predicted, score}`` object per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for episode_id in sorted(per_episode):
            for query, pred in per_episode[episode_id]:
                fh.write(
                    json.dumps(
                        {
                            "episode_id": episode_id,
                            "query_id": query.id,
                            "gold": query.label,
                            "predicted": pred.label,
                            "score": pred.score,
                        },
                        ensure_ascii=False,
                    )
                    + "\n"
                )
