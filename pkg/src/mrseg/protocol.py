"""Token-stream layouts, decoder query pairs and single-turn flattening.

Serialized layouts are plain strings. Markers are written in square
brackets (``[IMG]``, ``[USER]``, ``[ASSISTANT]``, ``[SEG]``, ``[MASK:r]``,
``[BOX:r]``, ``[REFPTR:r]``); a literal ``[`` inside text is doubled.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Any, Optional

from .convgen import SEG_TOKEN, SPAN_CLOSE, SPAN_OPEN, Conversation, Round

log = logging.getLogger(__name__)

TEXT = "text"
IMAGE = "image"
USER = "user"
ASSISTANT = "assistant"
SEG = "seg"
REF = "ref"
PAD = "pad"
MASK_SLOT = "mask"
BOX_SLOT = "box"
REF_POINTER = "refptr"

_SIMPLE = {IMAGE: "IMG", USER: "USER", ASSISTANT: "ASSISTANT", SEG: "SEG"}
_ROUND = {MASK_SLOT: "MASK", BOX_SLOT: "BOX", REF_POINTER: "REFPTR"}
_BY_NAME = {v: k for k, v in {**_SIMPLE, **_ROUND}.items()}

SPAN_RE = re.compile(re.escape(SPAN_OPEN) + r"([^" + SPAN_OPEN + SPAN_CLOSE + r"]*)"
                     + re.escape(SPAN_CLOSE))


@dataclass(frozen=True)
class Item:
    kind: str
    text: str = ""
    round: Optional[int] = None


@dataclass(frozen=True)
class TokenLayout:
    items: tuple

    def count(self, kind: str) -> int:
        return sum(1 for it in self.items if it.kind == kind)


class _Builder:
    def __init__(self):
        self.items: list[Item] = []

    def text(self, s: str) -> None:
        if not s:
            return
        if self.items and self.items[-1].kind == TEXT:
            self.items[-1] = Item(TEXT, self.items[-1].text + s)
        else:
            self.items.append(Item(TEXT, s))

    def add(self, kind: str, round_index: Optional[int] = None) -> None:
        self.items.append(Item(kind, round=round_index))

    def slots(self, round_index: int) -> None:
        self.add(MASK_SLOT, round_index)
        self.add(BOX_SLOT, round_index)


def teacher_forcing_layout(conv: Conversation, inline_refs: bool = True) -> TokenLayout:
    """Lay out a conversation with ground-truth embedding slots.

    Each ``[SEG]`` is followed by the mask and box slots of its own round.
    A reference span is rendered as its text followed by the referenced
    round's slots (``inline_refs``) or by a ``REFPTR`` back-pointer.
    A hard conversation's given mask is declared as round 0 right after
    the image.
    """
    b = _Builder()
    b.add(IMAGE)
    if any(r.reference_round == 0 for r in conv.rounds):
        b.slots(0)
    for rnd in conv.rounds:
        b.add(USER)
        m = SPAN_RE.search(rnd.query_text)
        if m and rnd.is_relational:
            b.text(rnd.query_text[:m.start()] + m.group(1))
            if inline_refs:
                b.slots(rnd.reference_round)
            else:
                b.add(REF_POINTER, rnd.reference_round)
            b.text(rnd.query_text[m.end():])
        else:
            b.text(rnd.query_text)
        b.add(ASSISTANT)
        pre, sep, post = rnd.answer_text.partition(SEG_TOKEN)
        b.text(pre)
        if sep:
            b.add(SEG)
            b.slots(rnd.index)
        b.text(post)
    return TokenLayout(tuple(b.items))


def serialize(layout: TokenLayout) -> str:
    out = []
    for it in layout.items:
        if it.kind == TEXT:
            out.append(it.text.replace("[", "[["))
        elif it.kind in _SIMPLE:
            out.append(f"[{_SIMPLE[it.kind]}]")
        elif it.kind in _ROUND:
            out.append(f"[{_ROUND[it.kind]}:{it.round}]")
        else:
            raise ValueError(f"marker {it.kind!r} cannot appear in a conversational stream")
    return "".join(out)


def parse_layout(s: str) -> TokenLayout:
    b = _Builder()
    i = 0
    buf = []
    while i < len(s):
        ch = s[i]
        if ch != "[":
            buf.append(ch)
            i += 1
            continue
        if s.startswith("[[", i):
            buf.append("[")
            i += 2
            continue
        end = s.find("]", i)
        if end < 0:
            raise ValueError(f"unterminated marker at offset {i}")
        name, _, arg = s[i + 1:end].partition(":")
        kind = _BY_NAME.get(name)
        if kind is None or (kind in _ROUND) != bool(arg):
            raise ValueError(f"unknown marker {s[i:end + 1]!r} at offset {i}")
        b.text("".join(buf))
        buf = []
        b.add(kind, int(arg) if arg else None)
        i = end + 1
    b.text("".join(buf))
    return TokenLayout(tuple(b.items))


@dataclass(frozen=True)
class DecoderQuerySpec:
    tokens: tuple
    target: str  # "reference-mask" or "target-mask"
    instance: Any = None
    reference_active: bool = True


def decoder_queries(rnd: Round) -> list[DecoderQuerySpec]:
    """Query pairs fed to the mask decoder for one round.

    A round with a reference yields (REF, PAD) matched to the referenced
    mask and (REF, SEG) matched to the target; a self-query yields only the
    second, with the reference channel inactive.
    """
    if rnd.is_relational:
        return [DecoderQuerySpec((REF, PAD), "reference-mask", rnd.reference_instance),
                DecoderQuerySpec((REF, SEG), "target-mask", rnd.target_instance)]
    return [DecoderQuerySpec((REF, SEG), "target-mask", rnd.target_instance,
                             reference_active=False)]


FLATTEN_MODES = ("tag-as-mask", "caption-substitute")


@dataclass(frozen=True)
class SingleTurnTask:
    conversation_id: str
    round_index: int
    image_id: Any
    query_text: str
    answer_text: str
    target_instance: Any

    def to_record(self) -> dict:
        return {"conversation_id": self.conversation_id, "round_index": self.round_index,
                "image_id": self.image_id, "query_text": self.query_text,
                "answer_text": self.answer_text, "target_instance": self.target_instance}


def strip_spans(text: str) -> str:
    """Drop sentinel characters, keeping the span contents."""
    return SPAN_RE.sub(lambda m: m.group(1), text)


def flatten(conv: Conversation, mode: str) -> list[SingleTurnTask]:
    """Turn an N-round conversation into N independent single-turn tasks.

    ``tag-as-mask`` replaces each reference span with "the mask";
    ``caption-substitute`` uses the referenced instance's first caption and
    falls back to "the mask" when it has none.
    """
    if mode not in FLATTEN_MODES:
        raise ValueError(f"unknown flatten mode {mode!r}")
    tasks = []
    for rnd in conv.rounds:
        replacement = "the mask"
        if mode == "caption-substitute" and rnd.is_relational:
            ref = conv.objects.get(rnd.reference_instance)
            if ref is not None and ref.captions:
                replacement = ref.captions[0]
            else:
                log.warning("%s round %d: reference %r has no caption, using 'the mask'",
                            conv.conversation_id, rnd.index, rnd.reference_instance)
        query = SPAN_RE.sub(lambda _m: replacement, rnd.query_text)
        tasks.append(SingleTurnTask(conv.conversation_id, rnd.index, conv.image_id, query,
                                    rnd.answer_text, rnd.target_instance))
    return tasks
