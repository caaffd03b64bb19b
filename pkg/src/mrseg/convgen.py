"""Multi-round conversation generation for each source family.

Every generator draws from a ``random.Random`` seeded by
:func:`derive_seed` on ``(master_seed, family, source, image_id)``, so the
output for one image never depends on which other images are processed, in
what order, or by how many workers.
"""

from __future__ import annotations

import hashlib
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Mapping, Optional, Protocol, Sequence

import numpy as np

from . import maskops, relations
from .annotations import (Corpus, ImageRecord, InstanceRecord, MaskSpec, PartLink,
                          RelationshipTriple)
from .maskops import Box
from .records import id_key
from .templates import TemplateSet, instantiate

log = logging.getLogger(__name__)

FAMILIES = ("hierarchical", "positional", "interactional", "attribute", "semantic", "hard")
SINGLE_ROUND = ("attribute", "semantic", "hard")
REFERENCE_MODES = ("caption", "instance-tag", "round-tag", "none")

SPAN_OPEN = "⟦"
SPAN_CLOSE = "⟧"
SEG_TOKEN = "[SEG]"
MAX_SAME_AS_REDRAWS = 8
# reference_round value of the pre-encoded mask that opens a hard conversation
PRELUDE_ROUND = 0

DEFAULT_RANGES = {
    "positional": (2, 18),
    "hierarchical_instances": (1, 4),
    "hierarchical_parts": (1, 4),
    "interactional": (1, 4),
}


class GenerationSkipped(Exception):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


@dataclass(frozen=True)
class GenConfig:
    p_self: float = 1 / 3
    p_caption: float = 0.5
    ranges: Mapping[str, tuple] = field(default_factory=lambda: dict(DEFAULT_RANGES))
    master_seed: int = 0

    def __post_init__(self) -> None:
        for name in ("p_self", "p_caption"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        merged = dict(DEFAULT_RANGES)
        merged.update({k: tuple(v) for k, v in self.ranges.items()})
        for name, (lo, hi) in merged.items():
            if name not in DEFAULT_RANGES:
                raise ValueError(f"unknown range {name!r}")
            if lo < 1 or hi < lo:
                raise ValueError(f"range {name} must satisfy 1 <= lo <= hi, got {(lo, hi)}")
        object.__setattr__(self, "ranges", merged)
        if not 0 <= self.master_seed < 2 ** 64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")


def derive_seed(master_seed: int, *parts) -> int:
    """Stable 64-bit seed from the master seed and an identifying tuple."""
    h = hashlib.blake2b(digest_size=8)
    h.update(repr((int(master_seed),) + tuple(parts)).encode("utf-8"))
    return int.from_bytes(h.digest(), "big")


# ---------------------------------------------------------------------------
# data model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Round:
    index: int
    query_text: str
    target_instance: Any
    answer_text: str
    reference_round: Optional[int] = None
    reference_mode: str = "none"
    reference_instance: Any = None

    @property
    def is_relational(self) -> bool:
        return self.reference_round is not None

    def to_record(self) -> dict:
        return {"index": self.index, "query_text": self.query_text,
                "target_instance": self.target_instance, "answer_text": self.answer_text,
                "reference_round": self.reference_round, "reference_mode": self.reference_mode,
                "reference_instance": self.reference_instance}

    @classmethod
    def from_record(cls, rec: Mapping) -> "Round":
        return cls(rec["index"], rec["query_text"], rec["target_instance"], rec["answer_text"],
                   rec.get("reference_round"), rec.get("reference_mode", "none"),
                   rec.get("reference_instance"))


@dataclass(frozen=True)
class ObjectInfo:
    """What a conversation needs to know about one referenced instance."""

    category: str
    captions: tuple
    box: Box
    mask: MaskSpec

    @classmethod
    def of(cls, inst: InstanceRecord, captions: Sequence[str] | None = None) -> "ObjectInfo":
        return cls(inst.category, tuple(inst.captions if captions is None else captions),
                   inst.box, inst.mask)


@dataclass(frozen=True)
class Conversation:
    conversation_id: str
    image_id: Any
    family: str
    rounds: tuple
    seed: int
    width: int
    height: int
    objects: Mapping = field(default_factory=dict)
    source: str = ""
    notes: tuple = ()

    def target_mask(self, round_index: int) -> np.ndarray:
        rnd = self.rounds[round_index - 1]
        return self.objects[rnd.target_instance].mask.to_grid(self.height, self.width)

    def to_record(self) -> dict:
        objects = []
        for inst_id in sorted(self.objects, key=id_key):
            o = self.objects[inst_id]
            objects.append({"instance_id": inst_id, "category": o.category,
                            "captions": list(o.captions), "box": o.box.as_list(),
                            "mask": o.mask.to_json(compressed=True)})
        return {"conversation_id": self.conversation_id, "image_id": self.image_id,
                "family": self.family, "source": self.source, "seed": self.seed,
                "width": self.width, "height": self.height,
                "rounds": [r.to_record() for r in self.rounds],
                "objects": objects, "notes": list(self.notes)}

    @classmethod
    def from_record(cls, rec: Mapping) -> "Conversation":
        objects = {}
        for o in rec.get("objects", []):
            objects[o["instance_id"]] = ObjectInfo(o["category"], tuple(o.get("captions", [])),
                                                   Box(*o["box"]), MaskSpec.from_coco(o["mask"]))
        return cls(rec["conversation_id"], rec["image_id"], rec["family"],
                   tuple(Round.from_record(r) for r in rec["rounds"]), int(rec["seed"]),
                   int(rec["width"]), int(rec["height"]), objects, rec.get("source", ""),
                   tuple(rec.get("notes", [])))


def sort_key(conv: Conversation) -> tuple:
    return (id_key(conv.image_id), conv.family, conv.seed, conv.conversation_id)


# ---------------------------------------------------------------------------
# text helpers
# ---------------------------------------------------------------------------

def span(text: str) -> str:
    return f"{SPAN_OPEN}{text}{SPAN_CLOSE}"


def tag_text(mode: str, round_index: int) -> str:
    if mode == "instance-tag":
        return f"<instance {round_index}>"
    if mode == "round-tag":
        return f"<the output of round {round_index}>"
    raise ValueError(f"not a tag mode: {mode!r}")


def render_reference(rng: random.Random, cfg: GenConfig, round_index: int,
                     caption: Optional[str]) -> tuple[str, str]:
    """Pick how an earlier round is mentioned; returns ``(span_text, mode)``.

    Two draws are always consumed so the random stream does not depend on
    whether a caption exists.
    """
    use_caption = rng.random() < cfg.p_caption
    instance_tag = rng.random() < 0.5
    if use_caption and caption:
        return span(caption), "caption"
    mode = "instance-tag" if instance_tag else "round-tag"
    return span(tag_text(mode, round_index)), mode


def dedup(captions: Iterable[str]) -> list[str]:
    seen = set()
    out = []
    for c in captions:
        key = " ".join(c.split()).lower()
        if key and key not in seen:
            seen.add(key)
            out.append(" ".join(c.split()))
    return out


def default_caption(inst: InstanceRecord) -> str:
    return f"the {inst.category}"


def _answer(pools: Mapping[str, TemplateSet], rng: random.Random) -> str:
    return instantiate(pools["answer"], {}, rng)


def _self_round(index: int, inst: InstanceRecord, description: str,
                pools: Mapping[str, TemplateSet], rng: random.Random) -> Round:
    query = instantiate(pools["referring"], {"description": description}, rng)
    return Round(index, query, inst.instance_id, _answer(pools, rng))


def _sample_count(rng: random.Random, bounds: tuple, available: int) -> int:
    lo, hi = bounds
    hi = min(hi, available)
    if hi < lo:
        return hi
    return rng.randint(lo, hi)


def _conversation(conv_id: str, image: ImageRecord, family: str, rounds: list, seed: int,
                  objects: Mapping, source: str, notes=()) -> Conversation:
    return Conversation(conv_id, image.image_id, family, tuple(rounds), seed, image.width,
                        image.height, dict(objects), source, tuple(notes))


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def gen_positional(image: ImageRecord, instances: Sequence[InstanceRecord], cfg: GenConfig,
                   pools: Mapping[str, TemplateSet], rng: random.Random, *,
                   conv_id: str = "", seed: int = 0, source: str = "") -> Conversation:
    """Positional conversation over ``(instance, caption)`` annotations.

    Round 1 is a self-query. Each later round is a self-query with
    probability ``p_self``; otherwise it asks for its object relative to a
    uniformly chosen earlier round. A same-as relation is re-drawn up to
    eight times before the round falls back to a self-query.
    """
    usable = [i for i in instances if not i.box.is_degenerate]
    if len({i.instance_id for i in usable}) < 2:
        raise GenerationSkipped("too-few-instances", f"{len(usable)} usable instance(s)")
    annotations = []
    for inst in sorted(usable, key=lambda i: id_key(i.instance_id)):
        for cap in dedup(inst.captions) or [default_caption(inst)]:
            annotations.append((inst, cap))
    k = _sample_count(rng, cfg.ranges["positional"], len(annotations))
    chosen = rng.sample(annotations, k)

    rounds: list[Round] = []
    notes = []
    for j, (inst, cap) in enumerate(chosen, start=1):
        if j == 1 or rng.random() < cfg.p_self:
            rounds.append(_self_round(j, inst, cap, pools, rng))
            continue
        ref_j = label = None
        for _attempt in range(MAX_SAME_AS_REDRAWS):
            cand = rng.randint(1, j - 1)
            lab = relations.classify(inst.box, chosen[cand - 1][0].box)
            if lab is not relations.RelationLabel.SAME_AS:
                ref_j, label = cand, lab
                break
            notes.append(f"round {j}: redrew same-as reference round {cand}")
        if ref_j is None:
            notes.append(f"round {j}: no non-degenerate reference, fell back to self-query")
            rounds.append(_self_round(j, inst, cap, pools, rng))
            continue
        ref_inst, ref_cap = chosen[ref_j - 1]
        ref_text, mode = render_reference(rng, cfg, ref_j, ref_cap)
        query = instantiate(pools["positional"], {"class": inst.category,
                                                  "relation": relations.phrase(label),
                                                  "reference": ref_text}, rng)
        rounds.append(Round(j, query, inst.instance_id, _answer(pools, rng), ref_j, mode,
                            ref_inst.instance_id))
    objects = {inst.instance_id: ObjectInfo.of(inst, dedup(inst.captions)) for inst, _ in chosen}
    return _conversation(conv_id, image, "positional", rounds, seed, objects, source, notes)


def lvis_instances(instances: Sequence[InstanceRecord]) -> list[InstanceRecord]:
    """Keep categories with one or two instances, captioning them by name.

    Pairs get location words so each caption names exactly one object.
    """
    out = []
    by_cat: dict = {}
    for inst in instances:
        by_cat.setdefault(inst.category, []).append(inst)
    for cat in sorted(by_cat):
        report = relations.ambiguity_filter(by_cat[cat], cat)
        if not report.eligible:
            continue
        group = by_cat[cat]
        if report.needs_location:
            caps = relations.disambiguated_captions(group)
            out.extend(replace(i, captions=(caps[i.instance_id],)) for i in group)
        else:
            out.extend(replace(i, captions=i.captions or (default_caption(i),)) for i in group)
    return out


def gen_hierarchical(image: ImageRecord, instances: Mapping[Any, InstanceRecord],
                     part_links: Sequence[PartLink], cfg: GenConfig,
                     pools: Mapping[str, TemplateSet], rng: random.Random, *,
                     conv_id: str = "", seed: int = 0, source: str = "") -> Conversation:
    """Each sampled parent gets a round, followed by rounds for its parts."""
    parts_of: dict = {}
    for link in part_links:
        parts_of.setdefault(link.parent_instance, []).append(link)
    if not parts_of:
        raise GenerationSkipped("no-parts")
    parents = sorted(parts_of, key=id_key)
    n_parents = _sample_count(rng, cfg.ranges["hierarchical_instances"], len(parents))
    rounds: list[Round] = []
    objects = {}
    for parent_id in rng.sample(parents, n_parents):
        parent = instances[parent_id]
        description = (dedup(parent.captions) or [default_caption(parent)])[0]
        parent_round = len(rounds) + 1
        rounds.append(_self_round(parent_round, parent, description, pools, rng))
        objects[parent_id] = ObjectInfo.of(parent, [description])
        links = sorted(parts_of[parent_id], key=lambda l: id_key(l.part_instance))
        n_parts = _sample_count(rng, cfg.ranges["hierarchical_parts"], len(links))
        for link in rng.sample(links, n_parts):
            part = instances[link.part_instance]
            ref_text, mode = render_reference(rng, cfg, parent_round, description)
            query = instantiate(pools["hierarchical"], {"part": link.part_name,
                                                        "reference": ref_text}, rng)
            rounds.append(Round(len(rounds) + 1, query, part.instance_id, _answer(pools, rng),
                                parent_round, mode, parent_id))
            objects[part.instance_id] = ObjectInfo.of(
                part, dedup(part.captions) or [f"the {link.part_name} of {description}"])
    return _conversation(conv_id, image, "hierarchical", rounds, seed, objects, source)


def gen_interactional(image: ImageRecord, triple: RelationshipTriple,
                      instances: Mapping[Any, InstanceRecord], cfg: GenConfig,
                      pools: Mapping[str, TemplateSet], rng: random.Random, *,
                      conv_id: str = "", seed: int = 0, source: str = "") -> Conversation:
    """Round 1 segments the subject; round 2 the object via the predicate."""
    subj = instances[triple.subject_instance]
    obj = instances[triple.object_instance]
    subj_desc = (dedup(subj.captions) or [default_caption(subj)])[0]
    first = _self_round(1, subj, subj_desc, pools, rng)
    ref_text, mode = render_reference(rng, cfg, 1, subj_desc)
    query = instantiate(pools["interactional"], {"class": obj.category,
                                                 "relation": triple.predicate,
                                                 "reference": ref_text}, rng)
    second = Round(2, query, obj.instance_id, _answer(pools, rng), 1, mode, subj.instance_id)
    objects = {subj.instance_id: ObjectInfo.of(subj, [subj_desc]),
               obj.instance_id: ObjectInfo.of(obj, dedup(obj.captions) or [default_caption(obj)])}
    return _conversation(conv_id, image, "interactional", [first, second], seed, objects, source)


class Captioner(Protocol):
    def describe(self, image: ImageRecord, instance: InstanceRecord) -> str:
        """Return an attribute description that avoids the class name."""


class CaptionerError(RuntimeError):
    pass


class StoredCaptioner:
    """Offline captioner serving descriptions recorded ahead of time."""

    def __init__(self, descriptions: Mapping[Any, str]):
        self.descriptions = dict(descriptions)

    def describe(self, image: ImageRecord, instance: InstanceRecord) -> str:
        try:
            return self.descriptions[instance.instance_id]
        except KeyError:
            raise CaptionerError(f"no stored description for {instance.instance_id!r}") from None


def gen_attribute(image: ImageRecord, instance: InstanceRecord, captioner: Captioner,
                  pools: Mapping[str, TemplateSet], rng: random.Random, *,
                  conv_id: str = "", seed: int = 0, source: str = "") -> Conversation:
    try:
        description = captioner.describe(image, instance)
    except Exception as exc:
        raise GenerationSkipped("captioner-failed", str(exc)) from None
    if not description or not description.strip():
        raise GenerationSkipped("captioner-failed", "empty description")
    query = instantiate(pools["attribute"], {"description": description.strip()}, rng)
    answer = instantiate(pools["attribute_answer"], {"class": instance.category}, rng)
    rnd = Round(1, query, instance.instance_id, answer)
    return _conversation(conv_id, image, "attribute", [rnd], seed,
                         {instance.instance_id: ObjectInfo.of(instance)}, source)


def gen_semantic(image: ImageRecord, region: InstanceRecord, pools: Mapping[str, TemplateSet],
                 rng: random.Random, *, conv_id: str = "", seed: int = 0,
                 source: str = "") -> Conversation:
    """Single self-query round for one semantic class region."""
    query = instantiate(pools["semantic"], {"class": region.category}, rng)
    rnd = Round(1, query, region.instance_id, _answer(pools, rng))
    return _conversation(conv_id, image, "semantic", [rnd], seed,
                         {region.instance_id: ObjectInfo.of(region)}, source)


def semantic_regions(image: ImageRecord, instances: Sequence[InstanceRecord]) -> list[InstanceRecord]:
    """One region per category; repeated category rows are merged by union."""
    by_cat: dict = {}
    for inst in sorted(instances, key=lambda i: id_key(i.instance_id)):
        by_cat.setdefault(inst.category, []).append(inst)
    out = []
    for cat in sorted(by_cat):
        group = by_cat[cat]
        if len(group) == 1:
            out.append(group[0])
            continue
        grid = np.zeros((image.height, image.width), dtype=bool)
        for inst in group:
            grid |= inst.grid(image)
        box = maskops.bbox_of(grid)
        if box is None:
            continue
        out.append(replace(group[0], mask=MaskSpec.from_grid(grid), box=box))
    return out


def hard_pairs(instances: Sequence[InstanceRecord]) -> list[tuple]:
    """Same-category pairs where the category has exactly two instances."""
    by_cat: dict = {}
    for inst in instances:
        by_cat.setdefault(inst.category, []).append(inst)
    pairs = []
    for cat in sorted(by_cat):
        group = by_cat[cat]
        if len(group) == 2:
            pairs.append(tuple(sorted(group, key=lambda i: id_key(i.instance_id))))
    return pairs


def gen_hard_pair(image: ImageRecord, x: InstanceRecord, y: InstanceRecord,
                  pools: Mapping[str, TemplateSet], cfg: GenConfig, *, source: str = "",
                  instances: Optional[Sequence[InstanceRecord]] = None) -> tuple:
    """Two mirrored single-round conversations: given one, segment the other.

    The given instance is the pre-encoded prelude (reference round 0). The
    result does not depend on argument order.
    """
    if x.instance_id == y.instance_id or x.category != y.category:
        raise GenerationSkipped("not-a-pair", "need two distinct same-category instances")
    if instances is not None:
        same = [i for i in instances if i.category == x.category]
        if len(same) != 2:
            raise GenerationSkipped("not-a-pair", f"{len(same)} instances of {x.category!r}")
    x, y = sorted((x, y), key=lambda i: id_key(i.instance_id))
    objects = {x.instance_id: ObjectInfo.of(x), y.instance_id: ObjectInfo.of(y)}
    convs = []
    for given, target in ((x, y), (y, x)):
        seed = derive_seed(cfg.master_seed, "hard", source, image.image_id, target.instance_id)
        rng = random.Random(seed)
        query = instantiate(pools["hard"], {
            "class": target.category,
            "reference": span(tag_text("instance-tag", PRELUDE_ROUND))}, rng)
        rnd = Round(1, query, target.instance_id, _answer(pools, rng), PRELUDE_ROUND,
                    "instance-tag", given.instance_id)
        conv_id = f"hard:{source}:{image.image_id}:{target.instance_id}"
        convs.append(_conversation(conv_id, image, "hard", [rnd], seed, objects, source))
    return tuple(convs)


def stub_featurize(obj_image: np.ndarray, image_size: Optional[tuple] = None) -> np.ndarray:
    """Deterministic 8-value stand-in for a learned mask embedding.

    Components: mean R, G, B in [0, 1]; crop width and height normalized by
    ``image_size`` ``(H, W)`` (default: the crop's longer side); fraction of
    non-black pixels; width/height aspect; a position-weighted checksum.
    """
    img = np.asarray(obj_image)
    if img.size == 0:
        raise ValueError("empty object image")
    if img.ndim == 2:
        img = img[..., None]
    h, w = img.shape[:2]
    rgb = img.astype(np.float64)
    if rgb.shape[2] == 1:
        rgb = np.repeat(rgb, 3, axis=2)
    means = rgb[..., :3].reshape(-1, 3).mean(axis=0) / 255.0
    ref_h, ref_w = image_size if image_size is not None else (max(h, w), max(h, w))
    area = float(np.any(img != 0, axis=2).mean())
    flat = img.astype(np.int64).reshape(-1)
    modulus = 2 ** 31 - 1
    checksum = int(((np.arange(flat.size, dtype=np.int64) + 1) * flat % modulus).sum() % modulus)
    return np.array([means[0], means[1], means[2], w / ref_w, h / ref_h, area, w / h,
                     checksum / modulus])


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FamilySource:
    """One configured source for a family, already parsed."""

    family: str
    name: str
    corpus: Corpus
    part_links: tuple = ()
    triples: tuple = ()
    captioner: Optional[Captioner] = None
    style: str = "refcoco"


@dataclass(frozen=True)
class Skip:
    family: str
    source: str
    image_id: Any
    reason: str
    detail: str = ""

    def to_record(self) -> dict:
        return {"family": self.family, "source": self.source, "image_id": self.image_id,
                "reason": self.reason, "detail": self.detail}


def _image_seed(cfg: GenConfig, src: FamilySource, image_id) -> int:
    return derive_seed(cfg.master_seed, src.family, src.name, image_id)


def generate_image(src: FamilySource, image_id, cfg: GenConfig,
                   pools: Mapping[str, TemplateSet]) -> tuple[list, list]:
    """All conversations (and skips) one source yields for one image."""
    image = src.corpus.images[image_id]
    instances = src.corpus.instances_in(image_id)
    base_seed = _image_seed(cfg, src, image_id)
    prefix = f"{src.family}:{src.name}:{image_id}"
    convs: list = []
    skips: list = []

    def attempt(fn: Callable[[], Any]) -> None:
        try:
            out = fn()
        except GenerationSkipped as exc:
            skips.append(Skip(src.family, src.name, image_id, exc.reason, exc.detail))
            return
        convs.extend(out if isinstance(out, tuple) else [out])

    fam = src.family
    if fam == "positional":
        pool = lvis_instances(instances) if src.style == "lvis" else instances
        attempt(lambda: gen_positional(image, pool, cfg, pools, random.Random(base_seed),
                                       conv_id=f"{prefix}:0", seed=base_seed, source=src.name))
    elif fam == "hierarchical":
        mine = {i.instance_id for i in instances}
        links = [l for l in src.part_links if l.parent_instance in mine]
        attempt(lambda: gen_hierarchical(image, src.corpus.instances, links, cfg, pools,
                                         random.Random(base_seed), conv_id=f"{prefix}:0",
                                         seed=base_seed, source=src.name))
    elif fam == "interactional":
        mine = {i.instance_id for i in instances}
        triples = [t for t in src.triples if t.subject_instance in mine]
        if not triples:
            skips.append(Skip(fam, src.name, image_id, "no-triples"))
        rng = random.Random(base_seed)
        k = min(len(triples), cfg.ranges["interactional"][1])
        for n, t in enumerate(rng.sample(triples, k)):
            seed = derive_seed(cfg.master_seed, fam, src.name, image_id, n)
            attempt(lambda t=t, seed=seed, n=n: gen_interactional(
                image, t, src.corpus.instances, cfg, pools, random.Random(seed),
                conv_id=f"{prefix}:{n}", seed=seed, source=src.name))
    elif fam == "attribute":
        captioner = src.captioner or StoredCaptioner({})
        for inst in sorted(instances, key=lambda i: id_key(i.instance_id)):
            seed = derive_seed(cfg.master_seed, fam, src.name, image_id, inst.instance_id)
            attempt(lambda inst=inst, seed=seed: gen_attribute(
                image, inst, captioner, pools, random.Random(seed),
                conv_id=f"{prefix}:{inst.instance_id}", seed=seed, source=src.name))
    elif fam == "semantic":
        for region in semantic_regions(image, instances):
            seed = derive_seed(cfg.master_seed, fam, src.name, image_id, region.category)
            attempt(lambda region=region, seed=seed: gen_semantic(
                image, region, pools, random.Random(seed),
                conv_id=f"{prefix}:{region.category}", seed=seed, source=src.name))
    elif fam == "hard":
        for x, y in hard_pairs(instances):
            attempt(lambda x=x, y=y: gen_hard_pair(image, x, y, pools, cfg, source=src.name,
                                                   instances=instances))
    else:
        raise ValueError(f"unknown family {fam!r}")
    return convs, skips


def generate(sources: Sequence[FamilySource], cfg: GenConfig,
             pools: Mapping[str, TemplateSet], workers: int = 1) -> tuple[list, list]:
    """Generate every source's conversations in canonical order."""
    tasks = [(src, image_id) for src in sources for image_id in src.corpus.image_ids()]

    def run(task):
        return generate_image(task[0], task[1], cfg, pools)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]
    convs = [c for cs, _ in results for c in cs]
    skips = [s for _, ss in results for s in ss]
    convs.sort(key=sort_key)
    skips.sort(key=lambda s: (id_key(s.image_id), s.family, s.source, s.reason, s.detail))
    return convs, skips
