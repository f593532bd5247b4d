"""Prompt grammar, lexicon-based tokenization, and noun-token selection.

Prompts are generated from a closed grammar over a small fixed vocabulary:

    "a <color> <shape>" [" and a <color> <shape>" | " <relation> a <color> <shape>"]

Every word is tagged by lexicon lookup, so POS assignment is exact and
deterministic. The noun-token index set drives which attention-map slices
the calibration losses operate on.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import NoNounTokens, UnknownWord


class Pos(Enum):
    NOUN = "Noun"
    ADJECTIVE = "Adjective"
    ARTICLE = "Article"
    CONJUNCTION = "Conjunction"
    PREPOSITION = "Preposition"
    OTHER = "Other"


class Shape(Enum):
    SQUARE = "square"
    CIRCLE = "circle"
    TRIANGLE = "triangle"


class Color(Enum):
    RED = "red"
    GREEN = "green"
    BLUE = "blue"
    YELLOW = "yellow"
    MAGENTA = "magenta"
    CYAN = "cyan"


class Relation(Enum):
    LEFT_OF = "LeftOf"
    RIGHT_OF = "RightOf"
    ABOVE = "Above"
    BELOW = "Below"
    NONE = "None"


RELATION_PHRASES = {
    Relation.LEFT_OF: "to the left of",
    Relation.RIGHT_OF: "to the right of",
    Relation.ABOVE: "above",
    Relation.BELOW: "below",
}

PAD_WORD = "[pad]"


@dataclass(frozen=True)
class Token:
    surface: str
    vocab_id: int
    pos: Pos
    position: int


@dataclass(frozen=True)
class SubjectSpec:
    shape: Shape
    color: Color
    cell: tuple[int, int]  # (row, col) in the 2x2 layout


@dataclass
class PromptSpec:
    scene: list[SubjectSpec]
    relation: Relation
    text: str
    tokens: list[Token] = field(default_factory=list)


@dataclass(frozen=True)
class NounIndexSet:
    indices: tuple[int, ...]

    @property
    def count(self) -> int:
        return len(self.indices)


class Lexicon:
    """Closed-vocabulary word table: surface -> (vocab_id, POS)."""

    def __init__(self, entries: dict[str, tuple[int, Pos]]):
        self.entries = entries
        self.vocab_size = max(vid for vid, _ in entries.values()) + 1

    @classmethod
    def from_file(cls, path: str | Path) -> "Lexicon":
        entries = {}
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            word, pos, vid = line.split()
            entries[word] = (int(vid), Pos(pos))
        return cls(entries)

    @classmethod
    def default(cls) -> "Lexicon":
        ref = importlib.resources.files("ctcal_lab") / "data" / "lexicon.txt"
        with importlib.resources.as_file(ref) as path:
            return cls.from_file(path)

    def lookup(self, word: str) -> tuple[int, Pos]:
        try:
            return self.entries[word]
        except KeyError:
            raise UnknownWord(word) from None


_DEFAULT_LEXICON: Lexicon | None = None


def default_lexicon() -> Lexicon:
    global _DEFAULT_LEXICON
    if _DEFAULT_LEXICON is None:
        _DEFAULT_LEXICON = Lexicon.default()
    return _DEFAULT_LEXICON


def tokenize(text: str, lexicon: Lexicon | None = None) -> list[Token]:
    """Split on whitespace and tag each word by lexicon lookup."""
    lexicon = lexicon or default_lexicon()
    tokens = []
    for i, word in enumerate(text.split()):
        vid, pos = lexicon.lookup(word)
        tokens.append(Token(surface=word, vocab_id=vid, pos=pos, position=i))
    return tokens


def select_noun_indices(tokens: list[Token]) -> NounIndexSet:
    """Positions of all noun-tagged tokens, in prompt order."""
    indices = tuple(t.position for t in tokens if t.pos is Pos.NOUN)
    if not indices:
        raise NoNounTokens("prompt has no noun tokens")
    return NounIndexSet(indices)


def select_content_indices(tokens: list[Token], include_adjectives: bool = False) -> NounIndexSet:
    """Noun positions, optionally extended with adjective positions."""
    if not include_adjectives:
        return select_noun_indices(tokens)
    keep = (Pos.NOUN, Pos.ADJECTIVE)
    indices = tuple(t.position for t in tokens if t.pos in keep)
    noun_count = sum(1 for t in tokens if t.pos is Pos.NOUN)
    if noun_count == 0:
        raise NoNounTokens("prompt has no noun tokens")
    return NounIndexSet(indices)


def realize_text(scene: list[SubjectSpec], relation: Relation = Relation.NONE) -> str:
    """Render a scene description through the fixed grammar."""
    parts = [f"a {scene[0].color.value} {scene[0].shape.value}"]
    if len(scene) == 2:
        if relation is Relation.NONE:
            parts.append("and")
        else:
            parts.append(RELATION_PHRASES[relation])
        parts.append(f"a {scene[1].color.value} {scene[1].shape.value}")
    return " ".join(parts)


def token_ids(tokens: list[Token]) -> list[int]:
    return [t.vocab_id for t in tokens]


def make_prompt(scene: list[SubjectSpec], relation: Relation = Relation.NONE,
                lexicon: Lexicon | None = None) -> PromptSpec:
    text = realize_text(scene, relation)
    return PromptSpec(scene=list(scene), relation=relation, text=text,
                      tokens=tokenize(text, lexicon))
