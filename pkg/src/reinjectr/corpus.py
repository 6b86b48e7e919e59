"""Token-category corpora for recoverability probing.

Words carry one of five categories; a deterministic sub-word splitter stands
in for a real tokenizer and every sub-token inherits its word's label.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Sequence, Tuple

import numpy as np

from .errors import InvalidInput, IoError

CATEGORIES = ("noun", "adjective", "spatial-relation", "numeral", "others")
CATEGORY_INDEX = {name: i for i, name in enumerate(CATEGORIES)}
PREFIX = ("a", "photo", "of")


def split_word(word: str, max_len: int = 6) -> List[str]:
    """Words longer than ``max_len`` characters are cut in half."""
    if len(word) <= max_len:
        return [word]
    half = (len(word) + 1) // 2
    return [word[:half], word[half:]]


@dataclass(frozen=True)
class LabeledTokenCorpus:
    prompts: tuple
    labels: tuple
    train: tuple

    def __post_init__(self):
        if not (len(self.prompts) == len(self.labels) == len(self.train)):
            raise InvalidInput("prompts, labels and split flags must align")
        for toks, labs in zip(self.prompts, self.labels):
            if len(toks) != len(labs):
                raise InvalidInput("every token needs exactly one label")
            if any(not 0 <= y < len(CATEGORIES) for y in labs):
                raise InvalidInput("label outside the category range")

    @property
    def n_tokens(self) -> int:
        return sum(len(p) for p in self.prompts)

    def token_labels(self) -> np.ndarray:
        return np.array([y for labs in self.labels for y in labs], dtype=np.int64)

    def token_train_mask(self) -> np.ndarray:
        return np.array(
            [flag for toks, flag in zip(self.prompts, self.train) for _ in toks], dtype=bool
        )

    def token_prompt_index(self) -> np.ndarray:
        return np.array([i for i, toks in enumerate(self.prompts) for _ in toks], dtype=np.int64)

    def vocabulary(self) -> List[str]:
        return sorted({tok for p in self.prompts for tok in p})

    def to_json(self) -> dict:
        return {
            "categories": list(CATEGORIES),
            "prompts": [
                {"tokens": list(t), "labels": [CATEGORIES[y] for y in l], "split": "train" if s else "test"}
                for t, l, s in zip(self.prompts, self.labels, self.train)
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "LabeledTokenCorpus":
        try:
            items = data["prompts"]
            prompts = tuple(tuple(p["tokens"]) for p in items)
            labels = tuple(tuple(_label_id(y) for y in p["labels"]) for p in items)
            train = tuple(p["split"] == "train" for p in items)
        except (KeyError, TypeError) as exc:
            raise InvalidInput(f"malformed corpus document: {exc}") from exc
        return cls(prompts=prompts, labels=labels, train=train)

    def save(self, path) -> None:
        try:
            Path(path).write_text(json.dumps(self.to_json(), indent=1))
        except OSError as exc:
            raise IoError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "LabeledTokenCorpus":
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except OSError as exc:
            raise IoError(str(exc)) from exc


def _label_id(label) -> int:
    if isinstance(label, str):
        if label not in CATEGORY_INDEX:
            raise InvalidInput(f"unknown category label {label!r}")
        return CATEGORY_INDEX[label]
    if isinstance(label, (int, np.integer)) and 0 <= label < len(CATEGORIES):
        return int(label)
    raise InvalidInput(f"unknown category label {label!r}")


LabeledWords = Sequence[Tuple[str, str]]


def tokenize(words: LabeledWords, tokenizer: Callable[[str], List[str]] = split_word):
    """Drop the ``a photo of`` prefix and propagate word labels to sub-tokens."""
    words = [(w, _label_id(y)) for w, y in words]
    if tuple(w.lower() for w, _ in words[: len(PREFIX)]) == PREFIX:
        words = words[len(PREFIX):]
    tokens, labels = [], []
    for word, label in words:
        for piece in tokenizer(word):
            tokens.append(piece)
            labels.append(label)
    return tokens, labels


def build_corpus(
    raw_prompts: Sequence[LabeledWords],
    tokenizer: Callable[[str], List[str]] = split_word,
    train_count: int = 499,
    test_count: int = 54,
    seed: int = 0,
) -> LabeledTokenCorpus:
    """Tokenize, label and split prompts; original prompt order is kept."""
    if train_count < 0 or test_count < 0 or train_count + test_count > len(raw_prompts):
        raise InvalidInput(
            f"asked for {train_count}+{test_count} prompts, only {len(raw_prompts)} available"
        )
    tokenized = [tokenize(p, tokenizer) for p in raw_prompts]
    order = np.random.default_rng(seed).permutation(len(raw_prompts))
    role = {int(i): True for i in order[:train_count]}
    role.update({int(i): False for i in order[train_count:train_count + test_count]})
    keep = [i for i in range(len(raw_prompts)) if i in role and tokenized[i][0]]
    return LabeledTokenCorpus(
        prompts=tuple(tuple(tokenized[i][0]) for i in keep),
        labels=tuple(tuple(tokenized[i][1]) for i in keep),
        train=tuple(role[i] for i in keep),
    )


# Vocabulary for GenEval-style synthetic prompts.
NOUNS = (
    "dog", "cat", "horse", "bird", "elephant", "giraffe", "umbrella", "bicycle",
    "car", "bench", "toothbrush", "refrigerator", "banana", "apple", "clock", "vase",
    "suitcase", "backpack", "sandwich", "couch", "laptop", "teddy", "train", "boat",
)
COLORS = ("red", "blue", "green", "yellow", "purple", "orange", "black", "white", "golden", "wooden")
NUMERALS = ("two", "three", "four")
RELATIONS = (("left", "of"), ("right", "of"), ("above",), ("below",))


def _obj(rng, color=False):
    words = [("a", "others")]
    if color:
        words.append((str(rng.choice(COLORS)), "adjective"))
    words.append((str(rng.choice(NOUNS)), "noun"))
    return words


def geneval_like_prompts(count: int, seed: int = 0) -> List[List[Tuple[str, str]]]:
    """Labeled prompts mimicking GenEval's six task templates."""
    rng = np.random.default_rng(seed)
    prefix = [("a", "others"), ("photo", "others"), ("of", "others")]
    prompts = []
    for i in range(count):
        kind = i % 6
        if kind == 0:
            body = _obj(rng)
        elif kind == 1:
            body = _obj(rng) + [("and", "others")] + _obj(rng)
        elif kind == 2:
            body = [(str(rng.choice(NUMERALS)), "numeral"), (str(rng.choice(NOUNS)) + "s", "noun")]
        elif kind == 3:
            body = _obj(rng, color=True)
        elif kind == 4:
            rel = RELATIONS[rng.integers(len(RELATIONS))]
            body = _obj(rng) + [(w, "spatial-relation") for w in rel] + _obj(rng)
        else:
            body = _obj(rng, color=True) + [("and", "others")] + _obj(rng, color=True)
        prompts.append(prefix + body)
    return prompts
