"""Semantic-parse data model, bracketed linearization, and string metrics.

Parses are intent/slot trees in the bracketed TOP style, e.g.
``[IN:CREATE_ALARM set an alarm for [SL:DATE_TIME tomorrow ] ]``.
An open bracket is fused with its ontology symbol into a single token
(``[IN:CREATE_ALARM``), the closing bracket is its own token, and leaf
words sit between them.  Everything here is a pure function over
immutable values.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Sequence, Union

INTENT_PREFIX = "[IN:"
SLOT_PREFIX = "[SL:"
CLOSE_BRACKET = "]"

# Characters stripped by exact-match normalization.  Brackets, colon and
# underscore are structural in linearized parses and must survive.
_EM_PUNCT = "".join(c for c in string.punctuation if c not in "[]:_")
_EM_TABLE = str.maketrans("", "", _EM_PUNCT)


class MalformedParse(ValueError):
    """Token sequence is not a valid bracketed intent/slot tree."""


class EmptyReference(ValueError):
    """WER is undefined for an empty reference."""


@dataclass(frozen=True)
class SlotNode:
    """A slot spanning leaf words and optionally nested intents."""

    label: str
    children: tuple[Union[str, "IntentNode"], ...]

    def __post_init__(self) -> None:
        if not self.label.startswith("SL:"):
            raise MalformedParse(f"slot label must start with 'SL:': {self.label!r}")


@dataclass(frozen=True)
class IntentNode:
    """An intent spanning leaf words and slot children."""

    label: str
    children: tuple[Union[SlotNode, str], ...]

    def __post_init__(self) -> None:
        if not self.label.startswith("IN:"):
            raise MalformedParse(f"intent label must start with 'IN:': {self.label!r}")


@dataclass(frozen=True)
class SemanticParse:
    """A full parse: the root is always an intent."""

    root: IntentNode

    def leaf_words(self) -> list[str]:
        """All leaf words in left-to-right order."""
        words: list[str] = []

        def walk(node: Union[IntentNode, SlotNode]) -> None:
            for child in node.children:
                if isinstance(child, str):
                    words.append(child)
                else:
                    walk(child)

        walk(self.root)
        return words


def linearize(parse: SemanticParse) -> list[str]:
    """Serialize a parse to its canonical token sequence.

    Canonical form: one token per word, ``[IN:X`` / ``[SL:Y`` open
    tokens, and ``]`` as a standalone token.  Deterministic and
    round-trips with :func:`deserialize`.
    """
    tokens: list[str] = []

    def walk(node: Union[IntentNode, SlotNode]) -> None:
        tokens.append("[" + node.label)
        for child in node.children:
            if isinstance(child, str):
                tokens.append(child)
            else:
                walk(child)
        tokens.append(CLOSE_BRACKET)

    walk(parse.root)
    return tokens


def linearize_str(parse: SemanticParse) -> str:
    """Canonical single-space-joined form of :func:`linearize`."""
    return " ".join(linearize(parse))


def deserialize(tokens: Sequence[str]) -> SemanticParse:
    """Parse a token sequence back into a tree.

    Raises :class:`MalformedParse` on unbalanced brackets, a non-ontology
    symbol after an open bracket, trailing tokens, or an empty input.
    """
    if not tokens:
        raise MalformedParse("empty token sequence")

    pos = 0

    def parse_node() -> Union[IntentNode, SlotNode]:
        nonlocal pos
        opener = tokens[pos]
        if opener.startswith(INTENT_PREFIX) and len(opener) > len(INTENT_PREFIX):
            is_intent = True
        elif opener.startswith(SLOT_PREFIX) and len(opener) > len(SLOT_PREFIX):
            is_intent = False
        else:
            raise MalformedParse(f"expected '[IN:' or '[SL:' token, got {opener!r}")
        label = opener[1:]
        pos += 1
        children: list = []
        while True:
            if pos >= len(tokens):
                raise MalformedParse(f"unbalanced brackets: {label!r} never closed")
            tok = tokens[pos]
            if tok == CLOSE_BRACKET:
                pos += 1
                break
            if tok.startswith("["):
                child = parse_node()
                if is_intent and not isinstance(child, SlotNode):
                    raise MalformedParse("intent may only nest slots")
                if not is_intent and not isinstance(child, IntentNode):
                    raise MalformedParse("slot may only nest intents")
                children.append(child)
            else:
                children.append(tok)
                pos += 1
        if is_intent:
            return IntentNode(label, tuple(children))
        return SlotNode(label, tuple(children))

    if not tokens[0].startswith("["):
        raise MalformedParse(f"parse must start with an intent, got {tokens[0]!r}")
    root = parse_node()
    if pos != len(tokens):
        raise MalformedParse(f"trailing tokens after root closes: {tokens[pos:]!r}")
    if not isinstance(root, IntentNode):
        raise MalformedParse("root must be an intent")
    return SemanticParse(root)


def deserialize_str(text: str) -> SemanticParse:
    """Deserialize a whitespace-joined token string."""
    return deserialize(text.split())


def normalize_for_match(text: str) -> str:
    """Lowercase, drop non-structural punctuation, collapse whitespace."""
    return " ".join(text.lower().translate(_EM_TABLE).split())


def exact_match(hyp: str, ref: str) -> bool:
    """Whole-string equality after case/punctuation normalization."""
    return normalize_for_match(hyp) == normalize_for_match(ref)


def edit_distance(ref: Sequence[str], hyp: Sequence[str]) -> int:
    """Minimum number of substitutions, insertions, and deletions."""
    n, m = len(ref), len(hyp)
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            cur[j] = min(prev[j - 1] + cost, prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[m]


def wer(ref: Sequence[str], hyp: Sequence[str]) -> float:
    """Word error rate: edit distance divided by reference length.

    May exceed 1 when the hypothesis is much longer than the reference.
    Raises :class:`EmptyReference` when the reference is empty; the
    corpus generator never emits empty references, so that signals a
    pipeline bug rather than a score.
    """
    if len(ref) == 0:
        raise EmptyReference("WER undefined for empty reference")
    return edit_distance(ref, hyp) / len(ref)
