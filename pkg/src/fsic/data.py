"""Core domain types: utterances, labeled corpora, and intent fold splits.

An intent label is a plain string compared by exact equality. All types
here are immutable after construction and safe to share across workers.
Text normalization is whitespace trimming only; anything token-level
belongs to the encoder backbones.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import ValidationError

IntentLabel = str


@dataclass(frozen=True)
class Utterance:
    """One labeled utterance. ``id`` is unique within a corpus."""

    id: str
    text: str
    label: IntentLabel

    def __post_init__(self) -> None:
        object.__setattr__(self, "text", self.text.strip())
        if not self.id:
            raise ValidationError("utterance id must be non-empty")
        if not self.text:
            raise ValidationError(f"utterance {self.id!r} has empty text")
        if not self.label:
            raise ValidationError(f"utterance {self.id!r} has empty label")

    def to_dict(self) -> dict[str, str]:
        return {"id": self.id, "text": self.text, "label": self.label}

    @classmethod
    def from_dict(cls, d: Mapping[str, object]) -> "Utterance":
        try:
            return cls(id=str(d["id"]), text=str(d["text"]), label=str(d["label"]))
        except KeyError as exc:
            raise ValidationError(f"utterance record missing field {exc.args[0]!r}") from None


class LabeledCorpus:
    """An ordered, validated collection of utterances.

    Every utterance's label belongs to ``intents`` and every intent has
    at least one utterance (both hold by construction).
    """

    def __init__(self, utterances: Iterable[Utterance]):
        utts = tuple(utterances)
        if not utts:
            raise ValidationError("corpus has no utterances")
        seen: set[str] = set()
        by_intent: dict[IntentLabel, list[Utterance]] = {}
        for u in utts:
            if u.id in seen:
                raise ValidationError(f"duplicate utterance id {u.id!r}")
            seen.add(u.id)
            by_intent.setdefault(u.label, []).append(u)
        self._utterances = utts
        self._by_intent = {label: tuple(group) for label, group in by_intent.items()}

    @property
    def utterances(self) -> tuple[Utterance, ...]:
        return self._utterances

    @property
    def intents(self) -> frozenset[IntentLabel]:
        return frozenset(self._by_intent)

    def by_intent(self, label: IntentLabel) -> tuple[Utterance, ...]:
        try:
            return self._by_intent[label]
        except KeyError:
            raise ValidationError(f"unknown intent {label!r}") from None

    def restrict(self, intents: Iterable[IntentLabel]) -> "LabeledCorpus":
        """Sub-corpus containing only the given intents, order preserved."""
        keep = set(intents)
        return LabeledCorpus(u for u in self._utterances if u.label in keep)

    def __len__(self) -> int:
        return len(self._utterances)

    def __iter__(self):
        return iter(self._utterances)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, LabeledCorpus) and self._utterances == other._utterances

    def __repr__(self) -> str:
        return f"LabeledCorpus({len(self._utterances)} utterances, {len(self._by_intent)} intents)"


@dataclass(frozen=True)
class FoldSplit:
    """Disjoint train/valid/test intent sets for one fold."""

    train_intents: frozenset[IntentLabel]
    valid_intents: frozenset[IntentLabel]
    test_intents: frozenset[IntentLabel]
    fold_index: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.fold_index < 0:
            raise ValidationError("fold_index must be >= 0")
        if (
            self.train_intents & self.valid_intents
            or self.train_intents & self.test_intents
            or self.valid_intents & self.test_intents
        ):
            raise ValidationError("fold intent sets must be pairwise disjoint")

    def to_dict(self) -> dict[str, object]:
        return {
            "train_intents": sorted(self.train_intents),
            "valid_intents": sorted(self.valid_intents),
            "test_intents": sorted(self.test_intents),
            "fold_index": self.fold_index,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, object]) -> "FoldSplit":
        return cls(
            train_intents=frozenset(d["train_intents"]),  # type: ignore[arg-type]
            valid_intents=frozenset(d["valid_intents"]),  # type: ignore[arg-type]
            test_intents=frozenset(d["test_intents"]),  # type: ignore[arg-type]
            fold_index=int(d.get("fold_index", 0)),  # type: ignore[arg-type]
            seed=int(d.get("seed", 0)),  # type: ignore[arg-type]
        )


def validate_corpus(records: Sequence[tuple[str, str, str]]) -> LabeledCorpus:
    """Build a corpus from raw ``(id, text, label)`` records.

    Record order is preserved. Raises :class:`ValidationError` on an
    empty record list, empty text, or a duplicate id (named in the
    message).
    """
    if not records:
        raise ValidationError("no records to validate")
    return LabeledCorpus(Utterance(id=r[0], text=r[1], label=r[2]) for r in records)


def split_intents(
    corpus: LabeledCorpus,
    counts: tuple[int, int, int],
    seed: int,
    fold_index: int = 0,
) -> FoldSplit:
    """Randomly split corpus intents into disjoint train/valid/test sets.

    The shuffle is a Fisher-Yates pass over the lexicographically sorted
    intent list driven by ``random.Random(seed)`` (Mersenne Twister), so
    identical inputs give identical folds on every platform.
    """
    n_train, n_valid, n_test = counts
    if min(counts) < 0:
        raise ValidationError("split counts must be non-negative")
    available = sorted(corpus.intents)
    total = n_train + n_valid + n_test
    if total > len(available):
        raise ValidationError(
            f"split counts {counts} need {total} intents but corpus has {len(available)}"
        )
    rng = random.Random(seed)
    rng.shuffle(available)
    return FoldSplit(
        train_intents=frozenset(available[:n_train]),
        valid_intents=frozenset(available[n_train : n_train + n_valid]),
        test_intents=frozenset(available[n_train + n_valid : total]),
        fold_index=fold_index,
        seed=seed,
    )


def load_corpus(path: str | Path, fmt: str = "auto") -> LabeledCorpus:
    """Read a corpus file.

    Two formats are accepted:

    * ``jsonl`` -- one JSON object per line with string fields ``id``,
      ``text``, ``label``.
    * ``tsv`` -- two tab-separated columns ``text<TAB>label``; ids are
      assigned as zero-padded row numbers.

    ``fmt="auto"`` sniffs the first non-empty line (JSONL lines start
    with ``{``).
    """
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read corpus file {path}: {exc}") from exc
    lines = raw.splitlines()
    stripped = [ln for ln in lines if ln.strip()]
    if not stripped:
        raise ValidationError(f"corpus file {path} is empty")
    if fmt == "auto":
        fmt = "jsonl" if stripped[0].lstrip().startswith("{") else "tsv"
    records: list[tuple[str, str, str]] = []
    if fmt == "jsonl":
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ValidationError(f"{path}:{lineno}: expected a JSON object")
            try:
                records.append((str(obj["id"]), str(obj["text"]), str(obj["label"])))
            except KeyError as exc:
                raise ValidationError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
    elif fmt == "tsv":
        width = max(6, len(str(len(stripped))))
        row = 0
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValidationError(f"{path}:{lineno}: expected 'text<TAB>label'")
            records.append((str(row).zfill(width), parts[0], parts[1]))
            row += 1
    else:
        raise ValidationError(f"unknown corpus format {fmt!r}")
    return validate_corpus(records)


def save_corpus(path: str | Path, corpus: LabeledCorpus) -> None:
    """Write a corpus in the JSONL ingestion format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for u in corpus:
            fh.write(json.dumps(u.to_dict(), ensure_ascii=False) + "\n")
