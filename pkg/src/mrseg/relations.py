"""Spatial relations between two boxes and their surface phrases."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

from .maskops import Box

SAME_AS_IOU = 0.95


class RelationLabel(str, enum.Enum):
    SAME_AS = "same-as"
    OVERLAPPING = "overlapping"
    LEFT_OF = "left-of"
    RIGHT_OF = "right-of"
    ABOVE = "above"
    BELOW = "below"
    TOP_LEFT_OF = "top-left-of"
    TOP_RIGHT_OF = "top-right-of"
    BOTTOM_LEFT_OF = "bottom-left-of"
    BOTTOM_RIGHT_OF = "bottom-right-of"


PHRASES = {
    RelationLabel.SAME_AS: "the same as",
    RelationLabel.OVERLAPPING: "overlapping with",
    RelationLabel.LEFT_OF: "to the left of",
    RelationLabel.RIGHT_OF: "to the right of",
    RelationLabel.ABOVE: "above",
    RelationLabel.BELOW: "below",
    RelationLabel.TOP_LEFT_OF: "to the top left of",
    RelationLabel.TOP_RIGHT_OF: "to the top right of",
    RelationLabel.BOTTOM_LEFT_OF: "to the bottom left of",
    RelationLabel.BOTTOM_RIGHT_OF: "to the bottom right of",
}

_DIAGONAL = {
    ("left", "above"): RelationLabel.TOP_LEFT_OF,
    ("right", "above"): RelationLabel.TOP_RIGHT_OF,
    ("left", "below"): RelationLabel.BOTTOM_LEFT_OF,
    ("right", "below"): RelationLabel.BOTTOM_RIGHT_OF,
}


def classify(target: Box, reference: Box) -> RelationLabel:
    """Relation of ``target`` with respect to ``reference``.

    Checked in order: box IoU >= 0.95 is same-as, any positive intersection
    is overlapping, otherwise the separated axes decide. y grows downward,
    so "above" means smaller y.
    """
    for b in (target, reference):
        if b.is_degenerate:
            raise ValueError(f"degenerate box {b.as_list()}")
    if target.iou(reference) >= SAME_AS_IOU:
        return RelationLabel.SAME_AS
    if target.intersection_area(reference) > 0:
        return RelationLabel.OVERLAPPING

    horiz = None
    if target.x2 <= reference.x1:
        horiz = "left"
    elif target.x1 >= reference.x2:
        horiz = "right"
    vert = None
    if target.y2 <= reference.y1:
        vert = "above"
    elif target.y1 >= reference.y2:
        vert = "below"

    if horiz and vert:
        return _DIAGONAL[(horiz, vert)]
    if horiz:
        return RelationLabel.LEFT_OF if horiz == "left" else RelationLabel.RIGHT_OF
    if vert:
        return RelationLabel.ABOVE if vert == "above" else RelationLabel.BELOW
    # zero intersection with positive extents implies a separated axis
    raise AssertionError("unreachable: disjoint boxes without a separated axis")


def phrase(label: RelationLabel | str) -> str:
    return PHRASES[RelationLabel(label)]


@dataclass(frozen=True)
class Eligibility:
    category: str
    count: int
    eligible: bool
    needs_location: tuple = ()


def ambiguity_filter(instances: Iterable, category: str) -> Eligibility:
    """Decide whether a category can be queried by name in one image.

    Eligible with one or two instances; with two, both instance ids are
    returned in ``needs_location`` because the name alone is ambiguous.
    """
    same = [i for i in instances if i.category == category]
    n = len(same)
    if n == 2:
        return Eligibility(category, n, True, tuple(i.instance_id for i in same))
    return Eligibility(category, n, n == 1)


_LOCATION_WORDS = {
    RelationLabel.LEFT_OF: "on the left",
    RelationLabel.RIGHT_OF: "on the right",
    RelationLabel.ABOVE: "at the top",
    RelationLabel.BELOW: "at the bottom",
    RelationLabel.TOP_LEFT_OF: "at the top left",
    RelationLabel.TOP_RIGHT_OF: "at the top right",
    RelationLabel.BOTTOM_LEFT_OF: "at the bottom left",
    RelationLabel.BOTTOM_RIGHT_OF: "at the bottom right",
}


def location_phrase(box: Box, other: Box) -> str:
    """Location words telling ``box`` apart from a same-category ``other``."""
    label = classify(box, other)
    if label in _LOCATION_WORDS:
        return _LOCATION_WORDS[label]
    (cx, cy), (ox, oy) = box.center, other.center
    dx, dy = cx - ox, cy - oy
    if abs(dx) >= abs(dy) and dx != 0:
        return "on the left" if dx < 0 else "on the right"
    if dy != 0:
        return "at the top" if dy < 0 else "at the bottom"
    return "in front" if box.area >= other.area else "behind"


def disambiguated_captions(pair: Sequence) -> dict:
    """Captions like ``"the dog on the left"`` for two same-category instances."""
    a, b = pair
    return {
        a.instance_id: f"the {a.category} {location_phrase(a.box, b.box)}",
        b.instance_id: f"the {b.category} {location_phrase(b.box, a.box)}",
    }
