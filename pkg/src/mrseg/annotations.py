"""Parsers for COCO-style instance, referring, part-link and triple documents.

All parsers take an already-decoded JSON document (``dict`` or ``list``);
:func:`read_document` loads one from disk. Box convention: source boxes are
``(x, y, w, h)`` and are converted once to half-open ``Box(x1, y1, x2, y2)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np

from . import maskops
from .maskops import Box
from .records import RecordFormatError, id_key, iter_lines, render_lines


class ParseError(ValueError):
    """A source document could not be parsed; names the file and row."""

    def __init__(self, message: str, source=None, row=None):
        parts = []
        if source is not None:
            parts.append(str(source))
        if row is not None:
            parts.append(f"row {row}")
        prefix = ": ".join(parts)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.source = source
        self.row = row


@dataclass(frozen=True)
class MaskSpec:
    """Instance mask as either run-length counts or a set of polygon rings."""

    kind: str  # "rle" or "polygon"
    counts: tuple = ()
    size: tuple = ()
    polygons: tuple = ()

    def __post_init__(self) -> None:
        if self.kind == "rle":
            if len(self.size) != 2:
                raise ValueError("run-length mask needs size (h, w)")
            h, w = self.size
            if sum(self.counts) != h * w:
                raise ValueError(f"run lengths sum to {sum(self.counts)}, expected {h * w}")
        elif self.kind == "polygon":
            if not self.polygons:
                raise ValueError("polygon mask needs at least one ring")
            for ring in self.polygons:
                if len(ring) < 6 or len(ring) % 2:
                    raise ValueError("polygon ring needs at least 3 (x, y) vertices")
        else:
            raise ValueError(f"unknown mask kind {self.kind!r}")

    @classmethod
    def from_rle(cls, counts: Sequence[int], h: int, w: int) -> "MaskSpec":
        return cls("rle", counts=tuple(int(c) for c in counts), size=(int(h), int(w)))

    @classmethod
    def from_polygons(cls, rings: Iterable[Sequence[float]]) -> "MaskSpec":
        return cls("polygon", polygons=tuple(tuple(float(v) for v in r) for r in rings))

    @classmethod
    def from_grid(cls, mask: np.ndarray) -> "MaskSpec":
        h, w = mask.shape
        return cls.from_rle(maskops.rle_encode(mask), h, w)

    @classmethod
    def from_coco(cls, seg) -> "MaskSpec":
        """Accept a COCO ``segmentation`` value: polygon list, RLE list or RLE text."""
        if isinstance(seg, list):
            return cls.from_polygons(seg)
        if isinstance(seg, dict) and "counts" in seg and "size" in seg:
            h, w = seg["size"]
            counts = seg["counts"]
            if isinstance(counts, str):
                counts = maskops.rle_from_string(counts)
            return cls.from_rle(counts, h, w)
        if isinstance(seg, dict) and "polygons" in seg:
            return cls.from_polygons(seg["polygons"])
        raise ValueError("unrecognized segmentation payload")

    def to_grid(self, h: int, w: int) -> np.ndarray:
        if self.kind == "rle":
            if tuple(self.size) != (h, w):
                raise ValueError(f"mask size {self.size} does not match image {h}x{w}")
            return maskops.rle_decode(self.counts, h, w)
        return maskops.rasterize(self.polygons, h, w)

    def to_json(self, compressed: bool = False) -> dict:
        if self.kind == "polygon":
            return {"polygons": [list(r) for r in self.polygons]}
        counts = maskops.rle_to_string(self.counts) if compressed else list(self.counts)
        return {"size": list(self.size), "counts": counts}


@dataclass(frozen=True)
class ImageRecord:
    image_id: Any
    width: int
    height: int
    file_name: str = ""

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image {self.image_id!r} has non-positive size")

    @property
    def rect(self) -> Box:
        return Box(0, 0, self.width, self.height)


@dataclass(frozen=True)
class InstanceRecord:
    instance_id: Any
    image_id: Any
    category: str
    mask: MaskSpec
    box: Box
    captions: tuple = ()

    def grid(self, image: ImageRecord) -> np.ndarray:
        return self.mask.to_grid(image.height, image.width)


@dataclass(frozen=True)
class PartLink:
    parent_instance: Any
    part_instance: Any
    part_name: str


@dataclass(frozen=True)
class RelationshipTriple:
    subject_instance: Any
    predicate: str
    object_instance: Any


@dataclass(frozen=True)
class Corpus:
    """Images and instances of one source; treat as immutable once built."""

    images: dict = field(default_factory=dict)
    instances: dict = field(default_factory=dict)
    _by_image: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        index: dict = {}
        for inst in self.instances.values():
            index.setdefault(inst.image_id, []).append(inst)
        object.__setattr__(self, "_by_image", index)

    def instances_in(self, image_id) -> list:
        return list(self._by_image.get(image_id, ()))

    def image_ids(self) -> list:
        return sorted(self.images, key=id_key)


def read_document(path) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON at line {exc.lineno} ({exc.msg})", path) from None


def _rows(doc, key: str, source) -> list:
    if isinstance(doc, list):
        return doc
    if isinstance(doc, dict):
        rows = doc.get(key, [])
        if not isinstance(rows, list):
            raise ParseError(f"'{key}' must be an array", source)
        return rows
    raise ParseError("document must be an object or an array", source)


def _field(row, name: str, source, rownum, *alts: str):
    if not isinstance(row, dict):
        raise ParseError("row is not an object", source, rownum)
    for key in (name, *alts):
        if key in row:
            return row[key]
    raise ParseError(f"missing field '{name}'", source, rownum)


def parse_instances(doc, source=None) -> Corpus:
    """Parse a COCO instance document (``images``, ``annotations``, ``categories``).

    Annotations without ``bbox`` get one derived from the mask; annotations
    without ``segmentation`` get a rectangle mask from the box.
    """
    if not isinstance(doc, dict):
        raise ParseError("instance document must be an object", source)
    categories = {}
    for i, row in enumerate(_rows(doc, "categories", source)):
        categories[_field(row, "id", source, f"categories[{i}]")] = str(
            _field(row, "name", source, f"categories[{i}]"))

    images: dict = {}
    for i, row in enumerate(_rows(doc, "images", source)):
        where = f"images[{i}]"
        image_id = _field(row, "id", source, where)
        if image_id in images:
            raise ParseError(f"duplicate image id {image_id!r}", source, where)
        try:
            images[image_id] = ImageRecord(
                image_id, int(_field(row, "width", source, where)),
                int(_field(row, "height", source, where)), str(row.get("file_name", "")))
        except ValueError as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(str(exc), source, where) from None

    instances: dict = {}
    for i, row in enumerate(_rows(doc, "annotations", source)):
        where = f"annotations[{i}]"
        ann_id = _field(row, "id", source, where)
        if ann_id in instances:
            raise ParseError(f"duplicate annotation id {ann_id!r}", source, where)
        image_id = _field(row, "image_id", source, where)
        if image_id not in images:
            raise ParseError(f"annotation {ann_id!r} references unknown image {image_id!r}", source, where)
        cat_id = _field(row, "category_id", source, where)
        if cat_id not in categories:
            raise ParseError(f"annotation {ann_id!r} has unresolved category id {cat_id!r}", source, where)
        image = images[image_id]

        box = None
        if row.get("bbox") is not None:
            bbox = row["bbox"]
            if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
                raise ParseError("bbox must have 4 numbers", source, where)
            x, y, w, h = bbox
            if w <= 0 or h <= 0:
                raise ParseError(f"degenerate bbox {list(bbox)}", source, where)
            box = Box.from_xywh(x, y, w, h)

        seg = row.get("segmentation")
        try:
            if seg is not None and seg != []:
                mask = MaskSpec.from_coco(seg)
            elif box is not None:
                mask = MaskSpec.from_polygons([[box.x1, box.y1, box.x2, box.y1,
                                                box.x2, box.y2, box.x1, box.y2]])
            else:
                raise ParseError("annotation has neither bbox nor segmentation", source, where)
        except ValueError as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"bad segmentation: {exc}", source, where) from None
        if mask.kind == "rle" and tuple(mask.size) != (image.height, image.width):
            raise ParseError(f"mask size {list(mask.size)} does not match image "
                             f"{image.height}x{image.width}", source, where)

        if box is None:
            box = maskops.bbox_of(mask.to_grid(image.height, image.width))
            if box is None:
                raise ParseError("cannot derive a box from an empty mask", source, where)
        if not image.rect.contains(box):
            raise ParseError(f"box {box.as_list()} exceeds image {image.width}x{image.height}",
                             source, where)
        instances[ann_id] = InstanceRecord(ann_id, image_id, categories[cat_id], mask, box)
    return Corpus(images, instances)


def _sentences(row, source, where) -> list[str]:
    raw = _field(row, "sentences", source, where, "expressions")
    if isinstance(raw, str):
        raw = [raw]
    out = []
    for s in raw:
        if isinstance(s, dict):
            s = s.get("sent", s.get("raw"))
        if not isinstance(s, str):
            raise ParseError("sentence is not text", source, where)
        out.append(s)
    return out


def parse_referring(doc, corpus: Corpus, source=None) -> Corpus:
    """Attach referring expressions to the instances they describe.

    Returns a new corpus; captions are appended in document order and an
    instance may collect several.
    """
    rows = _rows(doc, "refs", source)
    extra: dict = {}
    dangling = []
    for i, row in enumerate(rows):
        where = f"refs[{i}]"
        ann_id = _field(row, "ann_id", source, where, "annotation_id")
        sents = _sentences(row, source, where)
        if ann_id not in corpus.instances:
            dangling.append(ann_id)
            continue
        extra.setdefault(ann_id, []).extend(sents)
    if dangling:
        raise ParseError(f"referring expressions reference unknown annotation ids {dangling!r}", source)
    if not extra:
        return corpus
    instances = {
        k: replace(v, captions=v.captions + tuple(extra[k])) if k in extra else v
        for k, v in corpus.instances.items()
    }
    return Corpus(corpus.images, instances)


def _resolve(corpus: Corpus, inst_id, source, where) -> InstanceRecord:
    try:
        return corpus.instances[inst_id]
    except KeyError:
        raise ParseError(f"unknown instance id {inst_id!r}", source, where) from None


@dataclass(frozen=True)
class PartLinkTable:
    links: tuple
    dropped_semantic: int = 0


def parse_part_links(doc, corpus: Corpus, source=None) -> PartLinkTable:
    """Read parent/part rows; semantic-level rows are dropped and counted."""
    links = []
    dropped = 0
    for i, row in enumerate(_rows(doc, "part_links", source)):
        where = f"part_links[{i}]"
        if not isinstance(row, dict):
            raise ParseError("row is not an object", source, where)
        if str(row.get("level", "instance")).lower() != "instance":
            dropped += 1
            continue
        parent_id = _field(row, "parent_id", source, where)
        part_id = _field(row, "part_id", source, where)
        if parent_id == part_id:
            raise ParseError(f"instance {parent_id!r} declared as a part of itself", source, where)
        parent = _resolve(corpus, parent_id, source, where)
        part = _resolve(corpus, part_id, source, where)
        if parent.image_id != part.image_id:
            raise ParseError(f"part {part_id!r} and parent {parent_id!r} are in different images",
                             source, where)
        if parent.box.intersection_area(part.box) <= 0:
            raise ParseError(f"part {part_id!r} box does not intersect parent {parent_id!r}",
                             source, where)
        name = row.get("part_name") or part.category.split(":")[-1]
        links.append(PartLink(parent_id, part_id, str(name)))
    return PartLinkTable(tuple(links), dropped)


def _triple_id(row, key: str, source, where):
    if f"{key}_id" in row:
        return row[f"{key}_id"]
    nested = row.get(key)
    if isinstance(nested, dict):
        for k in ("object_id", "id"):
            if k in nested:
                return nested[k]
    raise ParseError(f"missing field '{key}_id'", source, where)


def parse_triples(doc, corpus: Corpus, source=None) -> list:
    """Read (subject, predicate, object) rows; self-loops are discarded."""
    triples = []
    for i, row in enumerate(_rows(doc, "relationships", source)):
        where = f"relationships[{i}]"
        if not isinstance(row, dict):
            raise ParseError("row is not an object", source, where)
        subj_id = _triple_id(row, "subject", source, where)
        obj_id = _triple_id(row, "object", source, where)
        predicate = str(_field(row, "predicate", source, where)).strip()
        subj = _resolve(corpus, subj_id, source, where)
        obj = _resolve(corpus, obj_id, source, where)
        if subj_id == obj_id:
            continue
        if subj.image_id != obj.image_id:
            raise ParseError(f"subject {subj_id!r} and object {obj_id!r} are in different images",
                             source, where)
        triples.append(RelationshipTriple(subj_id, predicate, obj_id))
    return triples


def parse_descriptions(doc, corpus: Corpus, source=None) -> dict:
    """Map instance id to a stored attribute description."""
    out = {}
    for i, row in enumerate(_rows(doc, "descriptions", source)):
        where = f"descriptions[{i}]"
        ann_id = _field(row, "annotation_id", source, where, "ann_id")
        _resolve(corpus, ann_id, source, where)
        out[ann_id] = str(_field(row, "description", source, where))
    return out


# ---------------------------------------------------------------------------
# canonical dump
# ---------------------------------------------------------------------------

def _box_from(values) -> Box:
    return Box(*values)


def corpus_records(corpus: Corpus) -> list[dict]:
    recs = []
    for img in corpus.images.values():
        recs.append({"kind": "image", "image_id": img.image_id, "width": img.width,
                     "height": img.height, "file_name": img.file_name})
    for inst in corpus.instances.values():
        recs.append({"kind": "instance", "instance_id": inst.instance_id,
                     "image_id": inst.image_id, "category": inst.category,
                     "captions": list(inst.captions), "box": inst.box.as_list(),
                     "mask": inst.mask.to_json()})
    return recs


def dump_corpus(corpus: Corpus) -> str:
    return render_lines("corpus", corpus_records(corpus))


def load_corpus_dump(text: str, source=None) -> Corpus:
    images: dict = {}
    instances: dict = {}
    try:
        for lineno, rec in iter_lines(text, "corpus", source):
            kind = rec.get("kind")
            if kind == "image":
                images[rec["image_id"]] = ImageRecord(rec["image_id"], rec["width"], rec["height"],
                                                      rec.get("file_name", ""))
            elif kind == "instance":
                instances[rec["instance_id"]] = InstanceRecord(
                    rec["instance_id"], rec["image_id"], rec["category"],
                    MaskSpec.from_coco(rec["mask"]), _box_from(rec["box"]), tuple(rec["captions"]))
            else:
                raise ParseError(f"unknown record kind {kind!r}", source, lineno)
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed corpus record ({exc})", source) from None
    except RecordFormatError as exc:
        raise ParseError(str(exc)) from None
    return Corpus(images, instances)
