"""Tokenization, vocabularies, dataset files, embedding files and a bAbI-style generator."""

from __future__ import annotations

import json
import logging
import random
import string
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1
MAX_LEN = 512
NUMBER_TOKEN = "qqq"
_PUNCT = set(string.punctuation)


class DatasetError(ValueError):
    """Malformed dataset or embedding file."""


@dataclass(frozen=True)
class Instance:
    """One labelled example.

    Single-sequence instances use ``tokens``; pair instances use ``p_tokens``
    (the attended sequence) and ``q_tokens``.
    """

    label: int
    tokens: tuple[str, ...] = ()
    p_tokens: tuple[str, ...] = ()
    q_tokens: tuple[str, ...] = ()

    @property
    def mode(self) -> str:
        return "pair" if self.q_tokens else "single"

    @property
    def attended(self) -> tuple[str, ...]:
        return self.p_tokens if self.q_tokens else self.tokens

    def to_json(self) -> dict:
        if self.mode == "pair":
            return {"p_tokens": list(self.p_tokens), "q_tokens": list(self.q_tokens),
                    "label": self.label}
        return {"tokens": list(self.tokens), "label": self.label}


# --------------------------------------------------------------------- tokens

def _split_word(word: str) -> list[str]:
    lead, trail = [], []
    start, end = 0, len(word)
    while start < end and word[start] in _PUNCT:
        lead.append(word[start])
        start += 1
    while end > start and word[end - 1] in _PUNCT:
        trail.append(word[end - 1])
        end -= 1
    core = word[start:end]
    out = lead
    if core:
        out.append(NUMBER_TOKEN if any(ch.isdigit() for ch in core) else core)
    out.extend(reversed(trail))
    return out


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, peel punctuation off word edges, map numbers to ``qqq``.

    >>> tokenize("The movie, in 1984!")
    ['the', 'movie', ',', 'in', 'qqq', '!']
    """
    tokens: list[str] = []
    for word in text.lower().split():
        tokens.extend(_split_word(word))
    return tokens


# ----------------------------------------------------------------- vocabulary

class Vocabulary:
    """Token <-> id map with ``<pad>`` = 0 and ``<unk>`` = 1."""

    def __init__(self, tokens: Iterable[str] = (), min_count: int = 1):
        self.min_count = min_count
        self._itos: list[str] = [PAD, UNK]
        self._stoi: dict[str, int] = {PAD: PAD_ID, UNK: UNK_ID}
        for tok in tokens:
            if tok not in self._stoi:
                self._stoi[tok] = len(self._itos)
                self._itos.append(tok)

    def __len__(self) -> int:
        return len(self._itos)

    def __contains__(self, token: str) -> bool:
        return token in self._stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._itos == other._itos

    @property
    def tokens(self) -> list[str]:
        return list(self._itos)

    def id(self, token: str) -> int:
        return self._stoi.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self._itos[idx]

    def encode(self, tokens: Sequence[str], max_len: int = MAX_LEN) -> list[int]:
        if len(tokens) > max_len:
            warnings.warn(f"sequence of {len(tokens)} tokens truncated to {max_len}", stacklevel=2)
            tokens = tokens[:max_len]
        return [self._stoi.get(t, UNK_ID) for t in tokens]

    def to_list(self) -> list[str]:
        return list(self._itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocabulary":
        if list(itos[:2]) != [PAD, UNK]:
            raise ValueError("vocabulary must start with the reserved <pad>, <unk> entries")
        return cls(itos[2:])


def _instance_tokens(inst: Instance) -> Iterable[str]:
    if inst.mode == "pair":
        yield from inst.p_tokens
        yield from inst.q_tokens
    else:
        yield from inst.tokens


def build_vocab(train: Sequence[Instance], min_count: int = 1) -> Vocabulary:
    """Vocabulary over the training split, tokens ordered by first appearance."""
    counts: Counter = Counter()
    order: list[str] = []
    for inst in train:
        for tok in _instance_tokens(inst):
            if tok not in counts:
                order.append(tok)
            counts[tok] += 1
    if not order:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    return Vocabulary((t for t in order if counts[t] >= min_count), min_count=min_count)


# -------------------------------------------------------------- dataset files

def _parse_tokens(obj: dict, key: str, lineno: int) -> tuple[str, ...]:
    if key not in obj:
        raise DatasetError(f"line {lineno}: missing field {key!r}")
    toks = obj[key]
    if not isinstance(toks, list) or not all(isinstance(t, str) for t in toks):
        raise DatasetError(f"line {lineno}: field {key!r} must be a list of strings")
    if not toks:
        raise DatasetError(f"line {lineno}: field {key!r} is empty")
    return tuple(toks)


def load_dataset(path, mode: str = "single", n_classes: int | None = None) -> list[Instance]:
    """Parse a JSON-lines split file, keeping line order."""
    if mode not in ("single", "pair"):
        raise ValueError(f"mode must be 'single' or 'pair', got {mode!r}")
    out: list[Instance] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DatasetError(f"line {lineno}: expected a JSON object")
            if "label" not in obj:
                raise DatasetError(f"line {lineno}: missing field 'label'")
            label = obj["label"]
            if isinstance(label, bool) or not isinstance(label, int):
                raise DatasetError(f"line {lineno}: label must be an integer")
            if label < 0 or (n_classes is not None and label >= n_classes):
                raise DatasetError(f"line {lineno}: label {label} out of range for {n_classes} classes")
            if mode == "single":
                out.append(Instance(label, tokens=_parse_tokens(obj, "tokens", lineno)))
            else:
                out.append(Instance(label, p_tokens=_parse_tokens(obj, "p_tokens", lineno),
                                    q_tokens=_parse_tokens(obj, "q_tokens", lineno)))
    return out


SPLITS = ("train", "valid", "test")


def split_paths(prefix) -> dict[str, Path]:
    prefix = str(prefix)
    return {s: Path(f"{prefix}.{s}.jsonl") for s in SPLITS}


def load_splits(prefix, mode: str, n_classes: int | None = None) -> dict[str, list[Instance]]:
    return {s: load_dataset(p, mode, n_classes) for s, p in split_paths(prefix).items()}


def write_dataset(path, instances: Iterable[Instance]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_json(), separators=(", ", ": ")) + "\n")
            n += 1
    return n


# ------------------------------------------------------------------ embeddings

@dataclass
class EmbeddingTable:
    dim: int
    vectors: dict[str, np.ndarray]


def init_embedding_rows(vocab_size: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    rows = rng.standard_normal((vocab_size, dim))
    rows[PAD_ID] = 0.0
    return rows


def load_embeddings(path, vocab: Vocabulary, rows: np.ndarray | None = None,
                    seed: int = 0) -> tuple[EmbeddingTable, np.ndarray]:
    """Read a text embedding file and copy matching vectors into the embedding rows.

    Rows for tokens missing from the file keep their random initialisation
    (``rows`` if given, otherwise a seeded uniform draw).
    """
    vectors: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            parts = [p for p in parts if p]
            if not parts:
                continue
            token, nums = parts[0], parts[1:]
            if dim is None:
                dim = len(nums)
                if dim == 0:
                    raise DatasetError(f"line {lineno}: no vector values")
            elif len(nums) != dim:
                raise DatasetError(f"line {lineno}: expected {dim} values, got {len(nums)}")
            try:
                vectors[token] = np.array([float(v) for v in nums])
            except ValueError:
                raise DatasetError(f"line {lineno}: non-numeric vector value") from None
    if dim is None:
        raise DatasetError("embedding file is empty")
    if rows is None:
        rows = init_embedding_rows(len(vocab), dim, np.random.default_rng(seed))
    elif rows.shape != (len(vocab), dim):
        raise ValueError(f"embedding rows shape {rows.shape} != ({len(vocab)}, {dim})")
    rows = rows.copy()
    for idx, tok in enumerate(vocab.tokens):
        if idx != PAD_ID and tok in vectors:
            rows[idx] = vectors[tok]
    return EmbeddingTable(dim, vectors), rows


# --------------------------------------------------------- bAbI-like generator

ACTORS = ("mary", "john", "daniel", "sandra")
PLACES = ("bathroom", "hallway", "garden", "office", "bedroom", "kitchen")
OBJECTS = ("football", "apple", "milk", "box")
MOVE_VERBS = ("went", "moved", "journeyed", "travelled")
GRAB = (("picked", "up"), ("got",), ("grabbed",))
DROP = (("dropped",), ("discarded",), ("left",))

_STORY_LENGTHS = {1: (3, 10), 2: (4, 12), 3: (6, 16)}


class _World:
    def __init__(self):
        self.actor_at: dict[str, str] = {}
        self.holder: dict[str, str] = {}
        self.object_at: dict[str, str] = {}
        self.history: dict[str, list[str]] = {o: [] for o in OBJECTS}

    def _visit(self, obj: str, place: str) -> None:
        self.object_at[obj] = place
        hist = self.history[obj]
        if not hist or hist[-1] != place:
            hist.append(place)

    def move(self, actor: str, place: str) -> None:
        self.actor_at[actor] = place
        for obj, who in self.holder.items():
            if who == actor:
                self._visit(obj, place)

    def grab(self, actor: str, obj: str) -> None:
        self.holder[obj] = actor
        self._visit(obj, self.actor_at[actor])

    def drop(self, obj: str) -> None:
        del self.holder[obj]


def _sentence_move(rng: random.Random, world: _World) -> list[str]:
    actor = rng.choice(ACTORS)
    here = world.actor_at.get(actor)
    place = rng.choice([p for p in PLACES if p != here])
    world.move(actor, place)
    return [actor, rng.choice(MOVE_VERBS), "to", "the", place, "."]


def _sentence_object(rng: random.Random, world: _World) -> list[str] | None:
    options = []
    for obj in OBJECTS:
        if obj in world.holder:
            options.append(("drop", world.holder[obj], obj))
            continue
        for actor, place in world.actor_at.items():
            if world.object_at.get(obj, place) == place:
                options.append(("grab", actor, obj))
    if not options:
        return None
    kind, actor, obj = rng.choice(options)
    if kind == "grab":
        world.grab(actor, obj)
        return [actor, *rng.choice(GRAB), "the", obj, "."]
    world.drop(obj)
    return [actor, *rng.choice(DROP), "the", obj, "."]


def _story(task: int, rng: random.Random) -> tuple[list[str], list[str], int] | None:
    world = _World()
    lo, hi = _STORY_LENGTHS[task]
    story: list[str] = []
    for _ in range(rng.randint(lo, hi)):
        sent = None
        if task > 1 and rng.random() < 0.45:
            sent = _sentence_object(rng, world)
        if sent is None:
            sent = _sentence_move(rng, world)
        story.extend(sent)

    if task == 1:
        actor = rng.choice(sorted(world.actor_at))
        return story, ["where", "is", actor, "?"], PLACES.index(world.actor_at[actor])
    if task == 2:
        held = [o for o in OBJECTS if o in world.holder]
        known = [o for o in OBJECTS if o in world.object_at]
        pool = held or known
        if not pool:
            return None
        obj = rng.choice(pool)
        return story, ["where", "is", "the", obj, "?"], PLACES.index(world.object_at[obj])
    candidates = []
    for obj in OBJECTS:
        hist = world.history[obj]
        for i in range(1, len(hist)):
            if hist.count(hist[i]) == 1:
                candidates.append((obj, hist[i], hist[i - 1]))
    if not candidates:
        return None
    obj, place, before = rng.choice(candidates)
    return story, ["where", "was", "the", obj, "before", "the", place, "?"], PLACES.index(before)


def generate_babi_like(task: int, n_per_split: Sequence[int] = (8500, 1500, 1000),
                       seed: int = 0) -> tuple[list[Instance], list[Instance], list[Instance]]:
    """Synthetic single/two/three-supporting-fact QA splits.

    The paragraph is the flattened story, the question is the query
    sentence, and the label indexes :data:`PLACES`.
    """
    if task not in _STORY_LENGTHS:
        raise ValueError(f"task must be 1, 2 or 3, got {task}")
    if len(n_per_split) != 3 or min(n_per_split) < 1:
        raise ValueError("need three split sizes, each >= 1")
    rng = random.Random(seed)
    splits = []
    for n in n_per_split:
        items = []
        while len(items) < n:
            made = _story(task, rng)
            if made is not None:
                story, question, label = made
                items.append(Instance(label, p_tokens=tuple(story), q_tokens=tuple(question)))
        splits.append(items)
    return tuple(splits)


def replay_answer(p_tokens: Sequence[str], q_tokens: Sequence[str]) -> str:
    """Rule-based reading of a generated story; returns the answer place.

    Works from the text alone, sentence by sentence.
    """
    actor_at: dict[str, str] = {}
    holder: dict[str, str] = {}
    where: dict[str, str] = {}
    trail: dict[str, list[str]] = {}

    def put(obj, place):
        where[obj] = place
        seen = trail.setdefault(obj, [])
        if not seen or seen[-1] != place:
            seen.append(place)

    sentence: list[str] = []
    for tok in p_tokens:
        if tok != ".":
            sentence.append(tok)
            continue
        who, verb = sentence[0], sentence[1]
        if sentence[-2] == "the" and sentence[-1] in PLACES and "to" in sentence:
            actor_at[who] = sentence[-1]
            for obj, h in holder.items():
                if h == who:
                    put(obj, sentence[-1])
        elif verb in ("picked", "got", "grabbed"):
            holder[sentence[-1]] = who
            put(sentence[-1], actor_at[who])
        elif verb in ("dropped", "discarded", "left"):
            holder.pop(sentence[-1], None)
        else:
            raise ValueError(f"unrecognised sentence: {' '.join(sentence)}")
        sentence = []

    q = list(q_tokens)
    if q[1] == "is" and q[2] != "the":
        return actor_at[q[2]]
    if q[1] == "is":
        return where[q[3]]
    obj, place = q[3], q[6]
    seen = trail[obj]
    return seen[seen.index(place) - 1]
