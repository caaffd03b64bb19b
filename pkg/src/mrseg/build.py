"""Build configuration, dataset build, corpus validation and statistics."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from . import __version__, convgen, maskops, protocol
from .annotations import (ParseError, parse_descriptions, parse_instances, parse_part_links,
                          parse_referring, parse_triples, read_document)
from .convgen import (FAMILIES, PRELUDE_ROUND, SEG_TOKEN, Conversation, FamilySource, GenConfig,
                      StoredCaptioner, tag_text)
from .records import RecordFormatError, dumps, id_key, iter_lines, sha256_file, write_records
from .templates import (HttpRefiner, IdentityRefiner, ReplayRefiner, load_all, refine_many)

log = logging.getLogger(__name__)

ENV_PREFIX = "MRSEG_"
SOURCE_FILE_KEYS = ("instances", "refs", "parts", "triples", "descriptions")


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG: dict = {
    "seed": 0,
    "workers": 1,
    "split": "train",
    "template_dir": None,
    "output_dir": "mrseg_out",
    "families": None,
    "generation": {},
    "refiner": {
        "kind": "identity",
        "url": None,
        "timeout": 30.0,
        "retries": 2,
        "max_in_flight": 4,
        "transcript": None,
        "refine_queries": ["positional", "hierarchical", "interactional"],
        "refine_answers": [],
    },
    "sources": [],
}


def _merge(base: dict, extra: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def env_overrides(environ: Mapping[str, str]) -> dict:
    out: dict = {}
    if f"{ENV_PREFIX}SEED" in environ:
        out["seed"] = int(environ[f"{ENV_PREFIX}SEED"])
    if f"{ENV_PREFIX}WORKERS" in environ:
        out["workers"] = int(environ[f"{ENV_PREFIX}WORKERS"])
    for key in ("split", "template_dir", "output_dir"):
        name = f"{ENV_PREFIX}{key.upper()}"
        if name in environ:
            out[key] = environ[name]
    if f"{ENV_PREFIX}FAMILIES" in environ:
        out["families"] = [f for f in environ[f"{ENV_PREFIX}FAMILIES"].split(",") if f]
    refiner = {}
    for key, conv in (("url", str), ("timeout", float), ("retries", int)):
        name = f"{ENV_PREFIX}REFINER_{key.upper()}"
        if name in environ:
            refiner[key] = conv(environ[name])
    if refiner:
        if "url" in refiner:
            refiner["kind"] = "http"
        out["refiner"] = refiner
    return out


@dataclass(frozen=True)
class SourceSpec:
    family: str
    name: str
    instances: Path
    refs: Optional[Path] = None
    parts: Optional[Path] = None
    triples: Optional[Path] = None
    descriptions: Optional[Path] = None
    style: str = "refcoco"


@dataclass(frozen=True)
class BuildConfig:
    raw: Mapping
    sources: tuple
    gen: GenConfig
    families: tuple
    split: str
    template_dir: Optional[Path]
    output_dir: Path
    workers: int
    refiner: Mapping
    base_dir: Path = field(default=Path("."))

    def digest(self) -> str:
        """Hash of everything that determines the output, source bytes included."""
        doc = {k: v for k, v in self.raw.items() if k not in ("workers", "output_dir")}
        doc["source_digests"] = [
            {key: sha256_file(getattr(s, key)) for key in SOURCE_FILE_KEYS
             if getattr(s, key) is not None} for s in self.sources]
        return hashlib.sha256(dumps(doc).encode("utf-8")).hexdigest()


def _path(base: Path, value) -> Optional[Path]:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def load_config(path=None, overrides: Optional[Mapping] = None,
                environ: Optional[Mapping[str, str]] = None) -> BuildConfig:
    """Resolve a config: flags override the file, which overrides ``MRSEG_*`` variables."""
    environ = os.environ if environ is None else environ
    raw = _merge(DEFAULT_CONFIG, env_overrides(environ))
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} ({exc.msg})") from None
        if not isinstance(file_doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        raw = _merge(raw, file_doc)
        base = path.parent
    raw = _merge(raw, {k: v for k, v in (overrides or {}).items() if v is not None})
    return _resolve(raw, base)


def _resolve(raw: dict, base: Path) -> BuildConfig:
    try:
        gen = GenConfig(p_self=raw["generation"].get("p_self", 1 / 3),
                        p_caption=raw["generation"].get("p_caption", 0.5),
                        ranges=raw["generation"].get("ranges", {}),
                        master_seed=int(raw["seed"]))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad generation settings: {exc}") from None
    if raw["split"] not in ("train", "val"):
        raise ConfigError(f"split must be 'train' or 'val', got {raw['split']!r}")
    workers = int(raw["workers"])
    if workers < 1:
        raise ConfigError("workers must be at least 1")

    sources = []
    names = set()
    for i, s in enumerate(raw["sources"]):
        fam = s.get("family")
        if fam not in FAMILIES:
            raise ConfigError(f"sources[{i}]: unknown family {fam!r}")
        if "instances" not in s:
            raise ConfigError(f"sources[{i}]: missing 'instances' path")
        name = str(s.get("name", f"{fam}{i}"))
        if (fam, name) in names:
            raise ConfigError(f"sources[{i}]: duplicate source name {name!r} for {fam}")
        names.add((fam, name))
        spec = SourceSpec(fam, name, *(_path(base, s.get(k)) for k in SOURCE_FILE_KEYS),
                          style=s.get("style", "refcoco"))
        for key in SOURCE_FILE_KEYS:
            p = getattr(spec, key)
            if p is not None and not p.is_file():
                raise ConfigError(f"sources[{i}]: {key} file not found: {p}")
        needed = {"hierarchical": "parts", "interactional": "triples",
                  "attribute": "descriptions"}.get(fam)
        if needed and getattr(spec, needed) is None:
            raise ConfigError(f"sources[{i}]: {fam} source needs a '{needed}' file")
        if spec.style not in ("refcoco", "lvis"):
            raise ConfigError(f"sources[{i}]: unknown style {spec.style!r}")
        sources.append(spec)

    families = raw["families"]
    if families is None:
        families = sorted({s.family for s in sources}, key=FAMILIES.index)
    for f in families:
        if f not in FAMILIES:
            raise ConfigError(f"unknown family {f!r} in 'families'")
    template_dir = _path(base, raw["template_dir"])
    if template_dir is not None and not template_dir.is_dir():
        raise ConfigError(f"template directory not found: {template_dir}")
    refiner = raw["refiner"]
    if refiner.get("kind") not in ("identity", "http", "replay"):
        raise ConfigError(f"unknown refiner kind {refiner.get('kind')!r}")
    if refiner["kind"] == "replay":
        t = _path(base, refiner.get("transcript"))
        if t is None or not t.is_file():
            raise ConfigError(f"refiner transcript not found: {t}")
    if refiner["kind"] == "http" and not refiner.get("url"):
        raise ConfigError("http refiner needs a url")
    return BuildConfig(raw, tuple(sources), gen, tuple(families), raw["split"], template_dir,
                       _path(base, raw["output_dir"]), workers, refiner, base)


def make_refiner(cfg: BuildConfig):
    r = cfg.refiner
    if r["kind"] == "http":
        return HttpRefiner(r["url"], float(r.get("timeout", 30)), int(r.get("retries", 2)))
    if r["kind"] == "replay":
        return ReplayRefiner.from_file(_path(cfg.base_dir, r["transcript"]))
    return IdentityRefiner()


# ---------------------------------------------------------------------------
# build
# ---------------------------------------------------------------------------

def load_sources(cfg: BuildConfig) -> list[FamilySource]:
    cache: dict = {}

    def corpus_for(spec: SourceSpec):
        key = (spec.instances, spec.refs)
        if key not in cache:
            corpus = parse_instances(read_document(spec.instances), spec.instances)
            if spec.refs is not None:
                corpus = parse_referring(read_document(spec.refs), corpus, spec.refs)
            cache[key] = corpus
        return cache[key]

    out = []
    for spec in cfg.sources:
        if spec.family not in cfg.families:
            continue
        corpus = corpus_for(spec)
        kwargs: dict = {}
        if spec.parts is not None:
            kwargs["part_links"] = parse_part_links(read_document(spec.parts), corpus,
                                                    spec.parts).links
        if spec.triples is not None:
            kwargs["triples"] = tuple(parse_triples(read_document(spec.triples), corpus,
                                                    spec.triples))
        if spec.descriptions is not None:
            kwargs["captioner"] = StoredCaptioner(
                parse_descriptions(read_document(spec.descriptions), corpus, spec.descriptions))
        out.append(FamilySource(spec.family, spec.name, corpus, style=spec.style, **kwargs))
    return out


def _span_signature(text: str) -> list[str]:
    return protocol.SPAN_RE.findall(text)


def _accept_refined(original: str, refined: str) -> bool:
    return (bool(refined.strip()) and "{" not in refined and "}" not in refined
            and refined.count(SEG_TOKEN) == original.count(SEG_TOKEN)
            and _span_signature(refined) == _span_signature(original))


def refine_conversations(convs: Sequence[Conversation], refiner, queries: Sequence[str],
                         answers: Sequence[str], max_in_flight: int = 4) -> list[Conversation]:
    """Run text refinement on the selected families' query/answer texts.

    A refined text that loses or alters a reference span, a segmentation
    token, or introduces braces is discarded in favour of the original.
    """
    jobs = []
    for ci, conv in enumerate(convs):
        for ri, rnd in enumerate(conv.rounds):
            if conv.family in queries:
                jobs.append((ci, ri, "query_text", rnd.query_text))
            if conv.family in answers:
                jobs.append((ci, ri, "answer_text", rnd.answer_text))
    if not jobs:
        return list(convs)
    refined = refine_many(refiner, [j[3] for j in jobs], max_in_flight)
    rounds = [list(c.rounds) for c in convs]
    for (ci, ri, attr, original), new in zip(jobs, refined):
        if new != original and _accept_refined(original, new):
            rounds[ci][ri] = replace(rounds[ci][ri], **{attr: new})
        elif new != original:
            log.warning("%s round %d: refined %s rejected", convs[ci].conversation_id, ri + 1, attr)
    return [replace(c, rounds=tuple(r)) for c, r in zip(convs, rounds)]


def manifest(command: str, digest: str, outputs: Mapping[str, str], **extra) -> dict:
    doc = {"tool": "mrseg", "version": __version__, "command": command,
           "config_digest": digest, "outputs": dict(sorted(outputs.items()))}
    doc.update(extra)
    return doc


def write_manifest(out_dir: Path, doc: Mapping) -> Path:
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


@dataclass(frozen=True)
class BuildResult:
    conversations: list
    skips: list
    manifest: dict
    output_dir: Path


def run_build(cfg: BuildConfig) -> BuildResult:
    pools = load_all(cfg.template_dir, cfg.split)
    sources = load_sources(cfg)
    convs, skips = convgen.generate(sources, cfg.gen, pools, workers=cfg.workers)
    r = cfg.refiner
    convs = refine_conversations(convs, make_refiner(cfg), r.get("refine_queries", []),
                                 r.get("refine_answers", []), int(r.get("max_in_flight", 4)))
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    outputs = {
        "conversations.jsonl": write_records(out / "conversations.jsonl", "conversations",
                                             (c.to_record() for c in convs)),
        "skips.jsonl": write_records(out / "skips.jsonl", "skips",
                                     (s.to_record() for s in skips)),
    }
    counts = Counter(c.family for c in convs)
    skip_counts = Counter(f"{s.family}:{s.reason}" for s in skips)
    doc = manifest("build", cfg.digest(), outputs, seed=cfg.gen.master_seed, split=cfg.split,
                   family_counts={f: counts.get(f, 0) for f in FAMILIES},
                   skip_counts=dict(sorted(skip_counts.items())),
                   total_conversations=len(convs))
    write_manifest(out, doc)
    return BuildResult(convs, skips, doc, out)


# ---------------------------------------------------------------------------
# corpus loading, validation, statistics
# ---------------------------------------------------------------------------

def load_conversations(path) -> list[Conversation]:
    text = Path(path).read_text(encoding="utf-8")
    out = []
    for lineno, rec in iter_lines(text, "conversations", path):
        try:
            out.append(Conversation.from_record(rec))
        except (KeyError, TypeError, ValueError) as exc:
            raise RecordFormatError(f"malformed conversation ({exc})", path, lineno) from None
    return out


@dataclass(frozen=True)
class Violation:
    conversation_id: str
    problems: tuple

    def to_record(self) -> dict:
        return {"conversation_id": self.conversation_id, "problems": list(self.problems)}


def check_conversation(conv: Conversation) -> list[str]:
    """Every invariant of one conversation; returns human-readable problems."""
    problems = []
    n = len(conv.rounds)
    if n == 0:
        return ["conversation has no rounds"]
    if conv.family not in FAMILIES:
        problems.append(f"unknown family {conv.family!r}")
    if conv.family == "interactional" and n != 2:
        problems.append(f"interactional conversation has {n} rounds, expected 2")
    if conv.family in convgen.SINGLE_ROUND and n != 1:
        problems.append(f"{conv.family} conversation has {n} rounds, expected 1")
    if conv.family in ("positional", "hierarchical") and n < 2:
        problems.append(f"{conv.family} conversation has {n} round(s), expected at least 2")

    for obj_id, obj in conv.objects.items():
        problems.extend(_check_object(conv, obj_id, obj))

    for pos, rnd in enumerate(conv.rounds, start=1):
        where = f"round {rnd.index}"
        if rnd.index != pos:
            problems.append(f"{where}: index out of sequence (position {pos})")
        if rnd.target_instance not in conv.objects:
            problems.append(f"{where}: target {rnd.target_instance!r} not in object table")
        for attr in ("query_text", "answer_text"):
            text = getattr(rnd, attr)
            if "{" in text or "}" in text:
                problems.append(f"{where}: unresolved template slot in {attr}")
        if rnd.answer_text.count(SEG_TOKEN) != 1:
            problems.append(f"{where}: answer must contain exactly one {SEG_TOKEN}")
        spans = protocol.SPAN_RE.findall(rnd.query_text)
        if rnd.reference_mode not in convgen.REFERENCE_MODES:
            problems.append(f"{where}: unknown reference mode {rnd.reference_mode!r}")
            continue
        if (rnd.reference_mode == "none") != (rnd.reference_round is None):
            problems.append(f"{where}: reference mode {rnd.reference_mode!r} inconsistent "
                            f"with reference round {rnd.reference_round!r}")
            continue
        if rnd.reference_round is None:
            if spans:
                problems.append(f"{where}: self-query contains a reference span")
            continue
        ref = rnd.reference_round
        if not isinstance(ref, int) or ref >= rnd.index or ref < 0:
            problems.append(f"{where}: reference round {ref!r} is not an earlier round")
            continue
        if ref == PRELUDE_ROUND and conv.family != "hard":
            problems.append(f"{where}: reference to round 0 outside a hard conversation")
        if ref >= 1 and conv.rounds[ref - 1].target_instance != rnd.reference_instance:
            problems.append(f"{where}: reference instance {rnd.reference_instance!r} is not "
                            f"the target of round {ref}")
        if rnd.reference_instance not in conv.objects:
            problems.append(f"{where}: reference instance {rnd.reference_instance!r} unknown")
        if len(spans) != 1:
            problems.append(f"{where}: expected one reference span, found {len(spans)}")
        elif rnd.reference_mode in ("instance-tag", "round-tag"):
            if spans[0] != tag_text(rnd.reference_mode, ref):
                problems.append(f"{where}: tag {spans[0]!r} does not match "
                                f"{rnd.reference_mode} of round {ref}")
        elif not spans[0].strip() or spans[0].startswith("<"):
            problems.append(f"{where}: caption reference is empty or a tag")
    return problems


def _check_object(conv: Conversation, obj_id, obj) -> list[str]:
    where = f"object {obj_id!r}"
    if not maskops.Box(0, 0, conv.width, conv.height).contains(obj.box):
        return [f"{where}: box {obj.box.as_list()} outside the image"]
    try:
        grid = obj.mask.to_grid(conv.height, conv.width)
    except ValueError as exc:
        return [f"{where}: undecodable mask ({exc})"]
    mb = maskops.bbox_of(grid)
    if mb is None:
        return [f"{where}: empty mask"]
    if not (obj.box.expand(1).contains(mb) and mb.expand(1).contains(obj.box)):
        return [f"{where}: mask box {mb.as_list()} disagrees with box {obj.box.as_list()}"]
    return []


def check_corpus(convs: Sequence[Conversation]) -> list[Violation]:
    problems: dict = {}
    seen: Counter = Counter(c.conversation_id for c in convs)
    for conv in convs:
        p = check_conversation(conv)
        if seen[conv.conversation_id] > 1:
            p.append("duplicate conversation id")
        if p:
            problems.setdefault(conv.conversation_id, []).extend(p)
    # hard conversations must come in mirrored pairs
    hard = {}
    for conv in convs:
        if conv.family == "hard" and len(conv.rounds) == 1:
            rnd = conv.rounds[0]
            hard[(conv.source, conv.image_id, rnd.reference_instance, rnd.target_instance)] = conv
    for (src, img, given, target), conv in hard.items():
        if (src, img, target, given) not in hard:
            problems.setdefault(conv.conversation_id, []).append(
                "hard conversation has no mirrored partner")
    return [Violation(cid, tuple(p)) for cid, p in problems.items()]


def validate_file(path) -> list[Violation]:
    """Validate a corpus file; unreadable records count as violations."""
    text = Path(path).read_text(encoding="utf-8")
    convs = []
    bad = []
    for lineno, rec in iter_lines(text, "conversations", path):
        try:
            convs.append(Conversation.from_record(rec))
        except (KeyError, TypeError, ValueError) as exc:
            cid = rec.get("conversation_id", f"line {lineno}")
            bad.append(Violation(str(cid), (f"line {lineno}: malformed record ({exc})",)))
    return bad + check_corpus(convs)


def round_histogram(convs: Sequence[Conversation]) -> list[dict]:
    counts = Counter((len(c.rounds), c.family) for c in convs)
    return [{"round_count": rc, "family": fam, "count": n}
            for (rc, fam), n in sorted(counts.items(), key=lambda kv: (kv[0][0], FAMILIES.index(kv[0][1])
                                                                       if kv[0][1] in FAMILIES else 99))]


def stats_table(rows: Sequence[Mapping]) -> str:
    lines = ["rounds  family         count", "------  -------------  -----"]
    for r in rows:
        lines.append(f"{r['round_count']:6d}  {r['family']:<13}  {r['count']:5d}")
    lines.append(f"{'total':>6}  {'':<13}  {sum(r['count'] for r in rows):5d}")
    return "\n".join(lines) + "\n"


def input_digest(**inputs) -> str:
    doc = {}
    for k, v in sorted(inputs.items()):
        if isinstance(v, Path):
            doc[k] = sha256_file(v)
        else:
            doc[k] = v
    return hashlib.sha256(dumps(doc).encode("utf-8")).hexdigest()
