"""Episode-set evaluation: per-episode accuracy and report aggregation.

Query sets hold the same number of examples for every intent, so plain
accuracy is the metric: correct predictions over query count, averaged
across episodes. A report keeps the full per-episode accuracy list so
its mean/std can always be recomputed and checked.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .data import IntentLabel
from .encoder import Backbone
from .episodes import Episode
from .errors import ValidationError
from .inference import (
    PairScorer,
    Prediction,
    VectorPairScorer,
    nn_predict_episode,
    protonet_predict,
    random_predict,
)
from .seeding import derive_rng


class EpisodePredictor(Protocol):
    """Anything that labels every query of an episode."""

    def predict_episode(self, episode: Episode) -> list[Prediction]: ...


class NNPredictor:
    """Nearest-neighbour inference over a similarity model."""

    def __init__(self, model: PairScorer):
        self.model = model

    def predict_episode(self, episode: Episode) -> list[Prediction]:
        cache_scope = getattr(self.model, "eval_cache", None)
        if cache_scope is not None:
            with cache_scope():
                return nn_predict_episode(self.model, episode)
        return nn_predict_episode(self.model, episode)


class ProtoNetPredictor:
    """Prototype inference over a backbone."""

    def __init__(self, backbone: Backbone):
        self.backbone = backbone

    def predict_episode(self, episode: Episode) -> list[Prediction]:
        return [
            protonet_predict(self.backbone, q, episode.support, intent_order=episode.intents)
            for q in episode.query
        ]


class RandomPredictor:
    """Uniform-label baseline with its own deterministic stream."""

    def __init__(self, seed: int = 0):
        self.rng = derive_rng(seed, "random-baseline")

    def predict_episode(self, episode: Episode) -> list[Prediction]:
        return [random_predict(episode.intents, self.rng, query_id=q.id) for q in episode.query]


@dataclass(frozen=True)
class EvaluationReport:
    """Accuracy aggregates over an episode set (and optionally folds)."""

    per_episode_accuracy: tuple[float, ...]
    mean_accuracy: float
    std_accuracy: float
    per_fold_means: tuple[float, ...]
    config_echo: dict[str, object] = field(default_factory=dict)
    episodes_digest: str = ""
    dataset: str = ""
    wall_clock_seconds: float = 0.0

    def __post_init__(self) -> None:
        if not self.per_episode_accuracy:
            raise ValidationError("a report needs at least one episode accuracy")
        accs = np.asarray(self.per_episode_accuracy)
        if np.any(accs < 0.0) or np.any(accs > 1.0):
            raise ValidationError("episode accuracies must lie in [0, 1]")
        if abs(self.mean_accuracy - float(accs.mean())) > 1e-9:
            raise ValidationError("mean_accuracy does not match the per-episode list")

    def body_dict(self) -> dict[str, object]:
        """Everything except wall-clock time; deterministic across runs."""
        return {
            "dataset": self.dataset,
            "config_echo": self.config_echo,
            "episodes_digest": self.episodes_digest,
            "n_episodes": len(self.per_episode_accuracy),
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
            "per_fold_means": list(self.per_fold_means),
            "per_episode_accuracy": list(self.per_episode_accuracy),
        }

    def to_dict(self) -> dict[str, object]:
        d = self.body_dict()
        d["wall_clock_seconds"] = self.wall_clock_seconds
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, object]) -> "EvaluationReport":
        return cls(
            per_episode_accuracy=tuple(float(a) for a in d["per_episode_accuracy"]),  # type: ignore[union-attr]
            mean_accuracy=float(d["mean_accuracy"]),  # type: ignore[arg-type]
            std_accuracy=float(d["std_accuracy"]),  # type: ignore[arg-type]
            per_fold_means=tuple(float(m) for m in d.get("per_fold_means", [])),  # type: ignore[union-attr]
            config_echo=dict(d.get("config_echo", {})),  # type: ignore[arg-type]
            episodes_digest=str(d.get("episodes_digest", "")),
            dataset=str(d.get("dataset", "")),
            wall_clock_seconds=float(d.get("wall_clock_seconds", 0.0)),  # type: ignore[arg-type]
        )


def episodes_digest(episodes: Sequence[Episode]) -> str:
    """Stable content digest so reports can prove they share test sets."""
    h = hashlib.sha256()
    for e in episodes:
        h.update(json.dumps(e.to_dict(), sort_keys=True).encode("utf-8"))
    return h.hexdigest()[:16]


def episode_accuracy(episode: Episode, predictions: Sequence[Prediction]) -> float:
    """Fraction of episode queries predicted correctly."""
    if not episode.query:
        raise ValidationError(f"episode {episode.episode_id} has no queries")
    if len(predictions) != len(episode.query):
        raise ValidationError(
            f"episode {episode.episode_id}: {len(predictions)} predictions "
            f"for {len(episode.query)} queries"
        )
    correct = sum(1 for q, p in zip(episode.query, predictions) if p.label == q.label)
    return correct / len(episode.query)


def evaluate(
    predictor: EpisodePredictor,
    episodes: Sequence[Episode],
    train_intents: Iterable[IntentLabel] | None = None,
    dataset: str = "",
    config_echo: Mapping[str, object] | None = None,
) -> EvaluationReport:
    """Evaluate a predictor over an episode set.

    When ``train_intents`` is given, every episode is first checked for
    leakage: an evaluation episode whose intents intersect the training
    split is a hard error.
    """
    if not episodes:
        raise ValidationError("cannot evaluate on an empty episode list")
    guard = frozenset(train_intents) if train_intents is not None else None
    accuracies = []
    for episode in episodes:
        if guard is not None:
            leaked = guard & set(episode.intents)
            if leaked:
                raise ValidationError(
                    f"episode {episode.episode_id} leaks training intents {sorted(leaked)}"
                )
        accuracies.append(episode_accuracy(episode, predictor.predict_episode(episode)))
    accs = np.asarray(accuracies, dtype=np.float64)
    mean = float(accs.mean())
    return EvaluationReport(
        per_episode_accuracy=tuple(accuracies),
        mean_accuracy=mean,
        std_accuracy=float(accs.std()),
        per_fold_means=(mean,),
        config_echo=dict(config_echo or {}),
        episodes_digest=episodes_digest(episodes),
        dataset=dataset,
    )


def predictions_by_episode(
    predictor: EpisodePredictor, episodes: Sequence[Episode]
) -> dict[int, list[tuple]]:
    """(query, prediction) pairs per episode id, for export."""
    out: dict[int, list[tuple]] = {}
    for episode in episodes:
        preds = predictor.predict_episode(episode)
        out[episode.episode_id] = list(zip(episode.query, preds))
    return out
