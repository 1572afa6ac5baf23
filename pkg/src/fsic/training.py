"""Training: per-query binary cross-entropy over neighbour scores, the
three regimes, and the optimization loop.

Every regime shares one per-query loss: the mean binary cross-entropy
between the score vector against a neighbour set and the 0/1 vector
marking neighbours that share the query's intent.

* non-episodic (NE): every utterance of a mini-batch is a query scored
  against the other batch members. The textbook form scores each query
  against the whole training corpus, which is quadratic in corpus size;
  the mini-batch approximation preserves the loss shape and the exact
  full-corpus loss stays available as :func:`ne_full_loss` for small
  corpora.
* episodic (EP): the episode's support/query split is ignored and every
  utterance of the pooled episode is a query against the rest.
* episodic with support/query split (EPSQ): only query-set utterances
  are queries, scored against the support set alone.

Scores are clamped to ``[clamp_eps, 1 - clamp_eps]`` before the logs:
the loss is undefined at exactly 0/1 and float32 sigmoids saturate.

Cross-encoding pairs are processed in sub-batches of ``batch_size``
with gradient accumulation, so one update still equals the full-episode
mean regardless of memory limits.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
import torch

from .data import IntentLabel, LabeledCorpus, Utterance
from .encoder import ToyBackbone
from .episodes import Episode
from .errors import CheckpointError, NumericError, ValidationError
from .scoring import SimilarityModel
from .seeding import derive_seed

REGIMES = ("NE", "EP", "EPSQ")


def label_vector(query_label: IntentLabel, neighbour_labels: Sequence[IntentLabel]) -> np.ndarray:
    """0/1 vector marking neighbours that share the query's intent."""
    if not neighbour_labels:
        raise ValidationError("neighbour list must be non-empty")
    return np.fromiter(
        (1 if lbl == query_label else 0 for lbl in neighbour_labels),
        dtype=np.int64,
        count=len(neighbour_labels),
    )


def query_loss(y: Sequence[int], s: Sequence[float]) -> float:
    """Mean binary cross-entropy of one query's neighbour scores.

    ``l = -(1/n) sum_t [ y_t log(s_t) + (1 - y_t) log(1 - s_t) ]``

    Scores must already lie strictly inside (0, 1); feeding anything at
    or beyond the clamping window is an error, not a silent fix-up.
    """
    y_arr = np.asarray(y, dtype=np.float64)
    s_arr = np.asarray(s, dtype=np.float64)
    if y_arr.shape != s_arr.shape or y_arr.ndim != 1 or y_arr.size == 0:
        raise ValidationError(
            f"label/score vectors must be equal-length and non-empty, got "
            f"{y_arr.shape} and {s_arr.shape}"
        )
    if not np.all(np.isin(y_arr, (0.0, 1.0))):
        raise ValidationError("labels must be binary")
    if np.any(s_arr <= 0.0) or np.any(s_arr >= 1.0):
        raise ValidationError("scores must lie strictly inside (0, 1)")
    return float(-np.mean(y_arr * np.log(s_arr) + (1.0 - y_arr) * np.log(1.0 - s_arr)))


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training run.

    Defaults mirror the reference protocol: AdamW at learning rate 2e-5,
    batch size and max sequence length 64, a budget of 10,000 episodes
    (or the same number of non-episodic updates), validation every 100
    updates, and patience of 5 evaluations. Optimizer internals beyond
    the learning rate use AdamW's conventional values.
    """

    regime: str = "EP"
    learning_rate: float = 2e-5
    batch_size: int = 64
    max_sequence_length: int = 64
    max_episodes: int = 10_000
    eval_every_updates: int = 100
    patience_evals: int = 5
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    score_clamp_eps: float = 1e-7
    head_dropout: float = 0.0
    pair_chunk_size: int = 256  # memory knob for cross-encoded pair sub-batches

    def __post_init__(self) -> None:
        if self.regime not in REGIMES:
            raise ValidationError(f"unknown regime {self.regime!r}")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be > 0")
        for name in ("batch_size", "max_sequence_length", "max_episodes",
                     "eval_every_updates", "patience_evals", "pair_chunk_size"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")

    def to_dict(self) -> dict[str, object]:
        return asdict(self)


@dataclass
class TrainState:
    """Mutable bookkeeping for one training run."""

    update_count: int = 0
    best_validation_accuracy: float = float("-inf")
    best_update: int = 0
    evals_since_improvement: int = 0
    stop_reason: str = "budget"
    history: list[tuple[int, float]] = field(default_factory=list)
    rng_state: object | None = None
    best_parameters: dict[str, torch.Tensor] | None = None

    def summary(self) -> dict[str, object]:
        return {
            "update_count": self.update_count,
            "best_validation_accuracy": self.best_validation_accuracy,
            "best_update": self.best_update,
            "stop_reason": self.stop_reason,
            "history": [[u, a] for u, a in self.history],
        }


def _optimizer(model: SimilarityModel, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(),
        lr=config.learning_rate,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )


def _pair_update(
    model: SimilarityModel,
    texts: Sequence[str],
    labels: Sequence[IntentLabel],
    pair_q: Sequence[int],
    pair_c: Sequence[int],
    pair_weight: float,
    optimizer: torch.optim.Optimizer | None,
    chunk_size: int,
) -> float:
    """One weighted pairwise-BCE update over explicit index pairs.

    Returns the scalar loss. With ``optimizer=None`` the loss is still
    computed (and gradients accumulated) but no step is taken.
    """
    dtype = next(model.parameters()).dtype
    y = torch.tensor(
        [1.0 if labels[a] == labels[b] else 0.0 for a, b in zip(pair_q, pair_c)], dtype=dtype
    )
    model.train()
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
    total = 0.0
    if model.architecture == "BE":
        qi = torch.tensor(list(pair_q), dtype=torch.long)
        ci = torch.tensor(list(pair_c), dtype=torch.long)
        s = model.train_scores(model.pool_logits(texts, qi, ci))
        bce = -(y * s.log() + (1.0 - y) * (1.0 - s).log())
        loss = bce.sum() * pair_weight
        loss.backward()
        total = float(loss.detach())
    else:
        pairs = [(texts[a], texts[b]) for a, b in zip(pair_q, pair_c)]
        for start in range(0, len(pairs), chunk_size):
            chunk = pairs[start : start + chunk_size]
            s = model.train_scores(model.cross_logits(chunk))
            y_chunk = y[start : start + len(chunk)]
            bce = -(y_chunk * s.log() + (1.0 - y_chunk) * (1.0 - s).log())
            chunk_loss = bce.sum() * pair_weight
            chunk_loss.backward()
            total += float(chunk_loss.detach())
    if not math.isfinite(total):
        raise NumericError(f"non-finite training loss {total}")
    if optimizer is not None:
        optimizer.step()
    return total


def ne_step(
    model: SimilarityModel,
    batch: Sequence[Utterance],
    optimizer: torch.optim.Optimizer | None,
    config: TrainConfig,
) -> float:
    """Non-episodic update: each batch member queries the rest."""
    n = len(batch)
    if n < 2:
        raise ValidationError("non-episodic batches need at least 2 utterances")
    texts = [u.text for u in batch]
    labels = [u.label for u in batch]
    pair_q, pair_c = zip(*((i, j) for i in range(n) for j in range(n) if j != i))
    return _pair_update(
        model, texts, labels, pair_q, pair_c, 1.0 / (n * (n - 1)), optimizer,
        config.pair_chunk_size,
    )


def ep_step(
    model: SimilarityModel,
    episode: Episode,
    optimizer: torch.optim.Optimizer | None,
    config: TrainConfig,
) -> float:
    """Episodic update over the undivided episode pool.

    The support/query split is ignored: every pooled utterance is a
    query against all other pooled utterances.
    """
    pool = episode.pool
    n = len(pool)
    if n < 2:
        raise ValidationError("episodic updates need at least 2 pooled utterances")
    texts = [u.text for u in pool]
    labels = [u.label for u in pool]
    pair_q, pair_c = zip(*((i, j) for i in range(n) for j in range(n) if j != i))
    return _pair_update(
        model, texts, labels, pair_q, pair_c, 1.0 / (n * (n - 1)), optimizer,
        config.pair_chunk_size,
    )


def epsq_step(
    model: SimilarityModel,
    episode: Episode,
    optimizer: torch.optim.Optimizer | None,
    config: TrainConfig,
) -> float:
    """Episodic update restricted to the support/query split: each query
    is scored against support-set neighbours only."""
    if not episode.query:
        raise ValidationError("support/query training needs a non-empty query set")
    supports = list(episode.support)
    queries = list(episode.query)
    texts = [u.text for u in queries] + [u.text for u in supports]
    labels = [u.label for u in queries] + [u.label for u in supports]
    nq, ns = len(queries), len(supports)
    pair_q, pair_c = zip(*((i, nq + j) for i in range(nq) for j in range(ns)))
    return _pair_update(
        model, texts, labels, pair_q, pair_c, 1.0 / (nq * ns), optimizer,
        config.pair_chunk_size,
    )


def ne_full_loss(model: SimilarityModel, corpus: LabeledCorpus) -> float:
    """Exact non-episodic loss over a whole (small) corpus.

    Each utterance queries all others; quadratic, so restricted to
    corpora of at most 64 utterances. Test oracle, not a training path.
    """
    if len(corpus) > 64:
        raise ValidationError("full-corpus loss is only available for |corpus| <= 64")
    if len(corpus) < 2:
        raise ValidationError("full-corpus loss needs at least 2 utterances")
    utts = list(corpus)
    losses = []
    for i, q in enumerate(utts):
        neighbours = utts[:i] + utts[i + 1 :]
        y = label_vector(q.label, [c.label for c in neighbours])
        s = model.score_all(q, neighbours, mode="train")
        losses.append(query_loss(y, s))
    return float(np.mean(losses))


def _ne_batches(
    corpus: LabeledCorpus, batch_size: int, seed: int
) -> Iterator[list[Utterance]]:
    """Endless uniformly shuffled mini-batches (fresh shuffle per epoch)."""
    rng = random.Random(derive_seed(seed, "ne-shuffle"))
    utts = list(corpus)
    while True:
        order = rng.sample(range(len(utts)), len(utts))
        for start in range(0, len(order), batch_size):
            batch = [utts[i] for i in order[start : start + batch_size]]
            if len(batch) >= 2:
                yield batch


def _default_validation_accuracy(model: SimilarityModel, episodes: Sequence[Episode]) -> float:
    from .evaluation import NNPredictor, evaluate

    return evaluate(NNPredictor(model), episodes).mean_accuracy


def _clone_parameters(model: SimilarityModel) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def train(
    model: SimilarityModel,
    data: LabeledCorpus | Iterable[Episode],
    config: TrainConfig,
    validation_episodes: Sequence[Episode],
    validation_accuracy_fn: Callable[[SimilarityModel, Sequence[Episode]], float] | None = None,
) -> TrainState:
    """Run one training regime to its stopping point.

    ``data`` is a corpus for NE and an episode iterable for EP/EPSQ.
    Validation accuracy is measured every ``eval_every_updates`` updates
    (and once at the end if the budget ran out between evaluations);
    training stops after ``patience_evals`` consecutive evaluations
    without improvement or at the ``max_episodes`` update budget. The
    model is restored to its best-validation parameters before return.
    """
    if not validation_episodes:
        raise ValidationError("validation episodes must be non-empty")
    accuracy_fn = validation_accuracy_fn or _default_validation_accuracy
    optimizer = _optimizer(model, config)
    state = TrainState()

    if config.regime == "NE":
        if not isinstance(data, LabeledCorpus):
            raise ValidationError("non-episodic training takes a LabeledCorpus")
        stream: Iterator[object] = _ne_batches(data, config.batch_size, config.seed)
        step: Callable[..., float] = ne_step
    else:
        if isinstance(data, LabeledCorpus):
            raise ValidationError(f"{config.regime} training takes an episode stream")
        stream = iter(data)
        step = ep_step if config.regime == "EP" else epsq_step

    def run_eval() -> bool:
        """Evaluate; return True when training should stop."""
        model.eval()
        acc = accuracy_fn(model, validation_episodes)
        state.history.append((state.update_count, acc))
        if acc > state.best_validation_accuracy:
            state.best_validation_accuracy = acc
            state.best_update = state.update_count
            state.evals_since_improvement = 0
            state.best_parameters = _clone_parameters(model)
            return False
        state.evals_since_improvement += 1
        return state.evals_since_improvement >= config.patience_evals

    last_evaluated = -1
    while state.update_count < config.max_episodes:
        try:
            item = next(stream)
        except StopIteration:
            state.stop_reason = "data-exhausted"
            break
        try:
            step(model, item, optimizer, config)
        except NumericError as exc:
            raise NumericError(f"update {state.update_count + 1}: {exc}") from exc
        state.update_count += 1
        if state.update_count % config.eval_every_updates == 0:
            last_evaluated = state.update_count
            if run_eval():
                state.stop_reason = "patience"
                break

    if last_evaluated != state.update_count:
        run_eval()
    if state.best_parameters is not None:
        model.load_state_dict(state.best_parameters)
    model.eval()
    if isinstance(data, LabeledCorpus):
        state.rng_state = None  # the shuffle stream is re-derivable from config.seed
    return state


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------

CHECKPOINT_FORMAT = "fsic-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    model: SimilarityModel,
    train_config: TrainConfig | None = None,
    update_count: int = 0,
    rng_state: object | None = None,
    extra: dict[str, object] | None = None,
) -> None:
    """Write a self-describing checkpoint container.

    The container holds a JSON header (model/backbone construction
    arguments, the training config echo, update count, RNG state) and
    one named float array per parameter tensor. Round-trips are
    bit-exact.
    """
    cfg = model.config_dict()
    if "backbone" not in cfg:
        raise CheckpointError(
            "only backbones exposing config_dict() (e.g. the toy backbone) are checkpointable"
        )
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": cfg,
        "train_config": train_config.to_dict() if train_config else None,
        "update_count": update_count,
        "rng_state": rng_state,
        "extra": extra or {},
    }
    arrays = {
        f"param:{name}": tensor.detach().cpu().numpy()
        for name, tensor in model.state_dict().items()
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8),
                 **arrays)


def load_checkpoint(path: str | Path) -> tuple[SimilarityModel, dict[str, object]]:
    """Rebuild a model from a checkpoint; returns (model, header)."""
    path = Path(path)
    try:
        with np.load(path) as data:
            if "__meta__" not in data:
                raise CheckpointError(f"{path} is not a checkpoint container (missing header)")
            meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
            arrays = {key: np.array(data[key]) for key in data.files if key.startswith("param:")}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} has unknown format {meta.get('format')!r}")
    model_cfg = meta["model"]
    backbone = ToyBackbone(**model_cfg["backbone"])
    model = SimilarityModel(
        backbone,
        architecture=model_cfg["architecture"],
        scoring=model_cfg["scoring"],
        head_seed=int(model_cfg.get("head_seed", 0)),
        head_dropout=float(model_cfg.get("head_dropout", 0.0)),
        clamp_eps=float(model_cfg.get("clamp_eps", 1e-7)),
    )
    state = {key[len("param:"):]: torch.from_numpy(arr) for key, arr in arrays.items()}
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"{path} is missing parameters: {sorted(missing)}")
    model.load_state_dict(state)
    model.eval()
    return model, meta
