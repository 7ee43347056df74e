"""Template prompts describing what a hand is doing."""
from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import numpy as np

from .render import SyntheticHandPose
from .tagging import Vocabulary, split_words

SUBJECTS = ["a person", "a man", "a woman", "a child", "someone"]
ACTIONS = [
    ("holding", ["a phone", "a cup", "a pen", "an apple"]),
    ("taking", ["a photo", "a card", "a bottle"]),
    ("using", ["a knife", "a remote", "a brush"]),
    ("waving", [""]),
    ("pointing", ["at the sky", "at a map"]),
    ("grabbing", ["a ball", "a bag"]),
    ("showing", ["an open palm", "five fingers"]),
]

TEMPLATES = [
    "{subject} {verb} {obj} with {side}",
    "{subject} is {verb} {obj} with {side}",
    "{side_of} of {subject} {verb} {obj}",
    "close up of {side} {verb} {obj}",
    "{subject} raising {side}",
    "a photo of {side} {verb} {obj}",
]

SIDES = {
    "left": ["the left hand", "their left hand"],
    "right": ["the right hand", "their right hand"],
    "both": ["both hands", "two hands"],
}
# sides that read well in front of "of"
SIDES_OF = {"left": "the left hand", "right": "the right hand", "both": "both hands"}


def _clean(text: str) -> str:
    return " ".join(text.split())


def make_prompt(pose: SyntheticHandPose, rng: np.random.Generator) -> str:
    """Draw a prompt consistent with ``pose.hand_type``; always mentions a hand."""
    template = TEMPLATES[rng.integers(len(TEMPLATES))]
    verb, objects = ACTIONS[rng.integers(len(ACTIONS))]
    obj = objects[rng.integers(len(objects))]
    sides = SIDES[pose.hand_type]
    side = sides[rng.integers(len(sides))]
    subject = SUBJECTS[rng.integers(len(SUBJECTS))]
    return _clean(template.format(subject=subject, verb=verb, obj=obj, side=side, side_of=SIDES_OF[pose.hand_type]))


def template_bank_words() -> set[str]:
    words: set[str] = set()
    for t in TEMPLATES:
        words.update(split_words(t.replace("{", " ").replace("}", " ")))
    for chunk in SUBJECTS + [o for _, objs in ACTIONS for o in objs] + [s for v in SIDES.values() for s in v]:
        words.update(split_words(chunk))
    words.update(v for v, _ in ACTIONS)
    return words - {"subject", "verb", "obj", "side", "side_of"}


def load_tagging_corpus() -> list[dict]:
    """Shipped prompts with hand-labelled hand-token positions."""
    text = resources.files("handgen.data").joinpath("tagging_corpus.jsonl").read_text()
    return [json.loads(line) for line in text.splitlines() if line.strip()]


@lru_cache(maxsize=1)
def default_vocabulary() -> Vocabulary:
    words = template_bank_words()
    for rec in load_tagging_corpus():
        words.update(rec["tokens"])
    return Vocabulary(words)
