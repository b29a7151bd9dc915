"""Semantic class vocabulary and the OSM tag -> class mapping table.

Class ids are 1-based and stable: areas, then ways, then nodes, each group
in the order of the shipped table. Id 0 is reserved for empty pixels.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Mapping

KINDS = ("node", "way", "area")
# raster channel index per kind
CHANNEL_OF_KIND = {"node": 0, "way": 1, "area": 2}

AREAS = ("building", "parking", "playground", "grass", "park", "forest", "water")
WAYS = ("fence", "wall", "hedge", "kerb", "cycleway", "path", "road", "busway", "tree row")
NODES = (
    "parking entrance", "street lamp", "junction", "traffic signal", "stop sign",
    "give way sign", "bus stop", "stop area", "crossing", "gate", "bollard",
    "gas station", "bicycle parking", "charging station", "shop", "restaurant",
    "bar", "vending machine", "pharmacy", "tree", "stone", "atm", "toilets",
    "water fountain", "bench", "waste basket", "post box", "artwork",
    "recycling station", "clock", "fire hydrant", "pole", "street cabinet",
)


@dataclass(frozen=True, order=True)
class SemanticClass:
    id: int
    name: str
    kind: str

    def __str__(self) -> str:
        return self.name


CLASSES: tuple[SemanticClass, ...] = tuple(
    SemanticClass(i + 1, name, kind)
    for i, (name, kind) in enumerate(
        [(n, "area") for n in AREAS] + [(n, "way") for n in WAYS] + [(n, "node") for n in NODES]
    )
)
VOCAB_SIZE = len(CLASSES)  # 49
# size of per-class lookup tables indexed by class id (slot 0 = empty)
N_IDS = VOCAB_SIZE + 1

_BY_NAME = {c.name: c for c in CLASSES}
_BY_ID = {c.id: c for c in CLASSES}

BUILDING = _BY_NAME["building"]


class UnknownClassError(KeyError):
    """Raised when a class name or id is not part of the vocabulary."""

    def __init__(self, token):
        super().__init__(token)
        self.token = token

    def __str__(self) -> str:
        return f"unknown semantic class: {self.token!r}"


def by_name(name: str) -> SemanticClass:
    try:
        return _BY_NAME[name]
    except KeyError:
        raise UnknownClassError(name) from None


def by_id(class_id: int) -> SemanticClass:
    try:
        return _BY_ID[int(class_id)]
    except KeyError:
        raise UnknownClassError(class_id) from None


def classes_of_kind(kind: str) -> tuple[SemanticClass, ...]:
    return tuple(c for c in CLASSES if c.kind == kind)


@lru_cache(maxsize=1)
def tag_table() -> dict:
    """Load the versioned tag map shipped in ``data/tag_map.json``."""
    text = resources.files("textmaploc").joinpath("data/tag_map.json").read_text("utf-8")
    table = json.loads(text)
    names = [entry["name"] for entry in table["classes"]]
    if names != [c.name for c in CLASSES]:
        raise ValueError("tag_map.json is out of sync with the class vocabulary")
    return table


@lru_cache(maxsize=None)
def _rules(kind: str) -> tuple[tuple[SemanticClass, str, str], ...]:
    table = tag_table()
    out = []
    for entry in table["classes"]:
        if entry["kind"] != kind:
            continue
        cls = _BY_NAME[entry["name"]]
        for key, value in entry["tags"]:
            out.append((cls, key, value))
    return tuple(out)


def _match(tags: Mapping[str, str], kind: str) -> SemanticClass | None:
    wildcard = tag_table()["wildcard"]
    for cls, key, value in _rules(kind):
        got = tags.get(key)
        if got is None:
            continue
        if value == wildcard and got != "no":
            return cls
        if got == value:
            return cls
    return None


def classify(tags: Mapping[str, str], closed: bool = False, node: bool = False) -> SemanticClass | None:
    """Map an OSM tag dictionary to one semantic class, or ``None``.

    Nodes only match node classes. A closed way tries the area classes first
    and falls back to way classes; an open way only matches way classes.
    The first matching rule in table order wins.
    """
    if node:
        return _match(tags, "node")
    if closed:
        found = _match(tags, "area")
        if found is not None:
            return found
    return _match(tags, "way")
