"""Prompt tokenization and hand-related token tagging.

A token is hand-related when it is a gerund verb (VBG) or contains ``hand``.
VBG detection is a lexicon plus an ``-ing`` suffix rule with exceptions; an
``-ing`` word right after a determiner or possessive is read as a noun
("a painting", "his ring").
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

VBG_LEXICON = frozenset(
    """
    holding taking using grabbing grasping gripping carrying lifting raising
    waving pointing touching clapping typing writing drawing painting playing
    pouring catching throwing pulling pushing squeezing stirring cutting
    slicing peeling eating drinking reading texting scrolling brushing combing
    knitting sewing shaking pressing tapping petting feeding washing wiping
    signing counting snapping hitting swinging folding opening closing
    """.split()
)

# -ing words that are not gerunds in ordinary prompts
NON_VBG = frozenset(
    """
    thing things something nothing anything everything ring rings king kings
    string strings spring springs wing wings sling slings sting swing ceiling
    morning evening during bring sing ping ding wedding clothing building
    pudding stuffing icing
    """.split()
)

DETERMINERS = frozenset(
    "a an the this that these those his her my your our their its one another each every some".split()
)

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:'[a-z]+)?")


@dataclass
class TokenizedPrompt:
    tokens: list[str]
    ids: list[int]
    hand_token_indices: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.tokens) != len(self.ids):
            raise ValueError("tokens and ids must have equal length")
        for i in self.hand_token_indices:
            if not 0 <= i < len(self.tokens):
                raise ValueError(f"hand token index {i} out of range")


def split_words(prompt: str) -> list[str]:
    return _TOKEN_RE.findall(prompt.lower())


def is_gerund(token: str, prev: str | None = None) -> bool:
    if token in NON_VBG:
        return False
    if prev in DETERMINERS:
        return False
    if token in VBG_LEXICON:
        return True
    return token.endswith("ing") and len(token) >= 5


def tag_hand_tokens(tokens: list[str]) -> list[int]:
    """Positions of hand-related tokens in ``tokens`` (expected lowercase)."""
    out = []
    for i, tok in enumerate(tokens):
        prev = tokens[i - 1] if i > 0 else None
        if "hand" in tok or is_gerund(tok, prev):
            out.append(i)
    return out


class Vocabulary:
    """Fixed word list; index 0 is padding, index 1 the unknown word."""

    PAD = "<pad>"
    UNK = "<unk>"

    def __init__(self, words):
        self.words = [self.PAD, self.UNK] + sorted(set(words) - {self.PAD, self.UNK})
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.index.get(t, 1) for t in tokens]

    def tokenize(self, prompt: str, n_max: int) -> TokenizedPrompt:
        tokens = split_words(prompt)[:n_max]
        return TokenizedPrompt(tokens, self.encode(tokens), tag_hand_tokens(tokens))
