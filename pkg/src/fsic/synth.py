"""Synthetic corpora for desk-scale experiments.

Each intent owns an unordered pair of "topic" atoms from a shared atom
pool; an utterance contains both atoms exactly once plus a burst of
filler words from a common vocabulary (a few filler types, each
repeated a small random number of times).

The construction is chosen so that intents are separable by lexical
evidence but not trivially: every atom appears in several intents, so
no single token identifies an intent; label-preserving evidence is the
atom *pair*, and unseen intents are new combinations of atoms that all
occurred during training. The bursty fillers give raw bag-of-words
similarity a heavy-tailed noise floor, which keeps untrained encoders
near chance without hurting a model that learns to match topic atoms.
"""

from __future__ import annotations

import itertools
import random

from .data import LabeledCorpus, validate_corpus
from .errors import ValidationError

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _pseudo_words(count: int, rng: random.Random, syllables: int = 2) -> list[str]:
    """Deterministic pronounceable nonsense words, collision-free."""
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < count:
        w = "".join(
            rng.choice(_CONSONANTS) + rng.choice(_VOWELS) for _ in range(syllables)
        )
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def make_synthetic_corpus(
    n_intents: int,
    utterances_per_intent: int,
    seed: int = 0,
    n_filler_words: int = 30,
    filler_types: tuple[int, int] = (3, 5),
    filler_repeats: tuple[int, int] = (1, 3),
) -> LabeledCorpus:
    """Generate a deterministic keyword-pair corpus.

    Intent ``k`` owns an unordered atom pair ``{a, b}``; each of its
    utterances shuffles ``a``, ``b`` and a filler burst into one line of
    text. ``filler_types`` and ``filler_repeats`` are inclusive ranges
    for the number of distinct fillers and the repetitions of each.
    Identical arguments produce identical corpora.
    """
    if n_intents < 1 or utterances_per_intent < 1:
        raise ValidationError("intent and utterance counts must be >= 1")
    if filler_types[0] < 1 or filler_repeats[0] < 1:
        raise ValidationError("filler ranges must start at 1 or higher")
    if n_filler_words < filler_types[1]:
        raise ValidationError("n_filler_words must cover the filler_types range")
    rng = random.Random(seed)
    # smallest atom pool whose unordered pairs cover n_intents
    n_atoms = 2
    while n_atoms * (n_atoms - 1) // 2 < n_intents:
        n_atoms += 1
    atoms = _pseudo_words(n_atoms, rng, syllables=2)
    # three-syllable fillers cannot collide with two-syllable atoms
    fillers = _pseudo_words(n_filler_words, rng, syllables=3)
    pairs = list(itertools.combinations(atoms, 2))
    rng.shuffle(pairs)  # spread atom usage evenly across the chosen intents
    pairs = pairs[:n_intents]
    records: list[tuple[str, str, str]] = []
    width = max(6, len(str(n_intents * utterances_per_intent)))
    row = 0
    for a, b in pairs:
        label = f"{a}_{b}"
        for _ in range(utterances_per_intent):
            tokens = [a, b]
            for f in rng.sample(fillers, rng.randint(*filler_types)):
                tokens.extend([f] * rng.randint(*filler_repeats))
            rng.shuffle(tokens)
            records.append((f"u{str(row).zfill(width)}", " ".join(tokens), label))
            row += 1
    return validate_corpus(records)
