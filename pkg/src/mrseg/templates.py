"""Query template pools, slot filling and two-pass text refinement.

Template files live at ``<dir>/<pool>/<split>.txt``, one template per line;
blank lines and lines starting with ``#`` are skipped. Slots are written
``{name}``.
"""

from __future__ import annotations

import json
import logging
import os
import random
import re
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Protocol, Sequence

log = logging.getLogger(__name__)

SPLITS = ("train", "val")

ALLOWED_SLOTS = {
    "referring": {"description"},
    "positional": {"class", "relation", "reference"},
    "hierarchical": {"part", "reference"},
    "interactional": {"class", "relation", "reference"},
    "attribute": {"description"},
    "semantic": {"class"},
    "hard": {"class", "reference"},
    "answer": set(),
    "attribute_answer": {"class"},
}

# pools that back the multi-round conversation families
MULTI_ROUND_POOLS = ("referring", "positional", "hierarchical", "interactional")

_SLOT_RE = re.compile(r"\{([^{}]*)\}")


class TemplateError(ValueError):
    pass


def default_template_dir() -> Path:
    return Path(str(resources.files("mrseg") / "data" / "templates"))


def slots_of(template: str) -> set[str]:
    return set(_SLOT_RE.findall(template))


@dataclass(frozen=True)
class TemplateSet:
    family: str
    split: str
    entries: tuple

    def __len__(self) -> int:
        return len(self.entries)


def _read_pool(path: Path, family: str) -> list[str]:
    allowed = ALLOWED_SLOTS[family]
    entries = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        names = slots_of(line)
        stray = _SLOT_RE.sub("", line)
        if "{" in stray or "}" in stray:
            raise TemplateError(f"{path}:{lineno}: unbalanced brace in {line!r}")
        bad = names - allowed
        if bad:
            raise TemplateError(f"{path}:{lineno}: unknown slot(s) {sorted(bad)} for "
                                f"{family} templates: {line!r}")
        entries.append(line)
    return entries


def load(template_dir, family: str, split: str) -> TemplateSet:
    """Load one pool and check it shares no template with the other split."""
    if family not in ALLOWED_SLOTS:
        raise TemplateError(f"unknown template family {family!r}")
    if split not in SPLITS:
        raise TemplateError(f"unknown split {split!r}")
    base = Path(template_dir if template_dir is not None else default_template_dir()) / family
    path = base / f"{split}.txt"
    if not path.is_file():
        raise TemplateError(f"missing template file {path}")
    entries = _read_pool(path, family)
    if not entries:
        raise TemplateError(f"{path}: no templates")
    other = base / f"{SPLITS[1 - SPLITS.index(split)]}.txt"
    if other.is_file():
        overlap = set(entries) & set(_read_pool(other, family))
        if overlap:
            raise TemplateError(f"{family}: {len(overlap)} template(s) shared by train and val, "
                                f"e.g. {sorted(overlap)[0]!r}")
    log.debug("loaded %d %s/%s templates", len(entries), family, split)
    return TemplateSet(family, split, tuple(entries))


def load_all(template_dir, split: str) -> dict[str, TemplateSet]:
    return {fam: load(template_dir, fam, split) for fam in ALLOWED_SLOTS}


def fill(template: str, slots: Mapping[str, str]) -> str:
    missing = slots_of(template) - set(slots)
    if missing:
        raise TemplateError(f"missing slot value(s) {sorted(missing)} for {template!r}")

    def sub(m: re.Match) -> str:
        value = str(slots[m.group(1)])
        if "{" in value or "}" in value:
            raise TemplateError(f"slot value for {m.group(1)!r} contains a brace: {value!r}")
        return value

    return _SLOT_RE.sub(sub, template)


def instantiate(tset: TemplateSet, slots: Mapping[str, str], rng: random.Random) -> str:
    return fill(rng.choice(tset.entries), slots)


# ---------------------------------------------------------------------------
# refinement
# ---------------------------------------------------------------------------

class Refiner(Protocol):
    def exchange(self, request: dict) -> str:
        """Send one structured request and return the raw response text."""


class RefinerError(RuntimeError):
    pass


def correction_request(sentence: str) -> dict:
    prompt = ("Correct any grammatical or wording problems in the following sentence so it reads "
              "as fluent English. Reply with a JSON object {\"corrected\": <sentence>}. "
              f"Sentence: '{sentence}'")
    return {"pass": 1, "sentence": sentence, "prompt": prompt}


def verification_request(sentence: str, corrected: str) -> dict:
    prompt = (f"Original: '{sentence}'. Rewritten: '{corrected}'. Is the meaning unchanged? "
              "Reply with the JSON array [\"Same\", \"None\"] if it is, otherwise "
              "[\"Different\", <a rewrite that keeps the original meaning>].")
    return {"pass": 2, "sentence": sentence, "corrected": corrected, "prompt": prompt}


def _parse_correction(text: str) -> str:
    data = json.loads(text)
    corrected = data.get("corrected") if isinstance(data, dict) else None
    if not isinstance(corrected, str) or not corrected.strip():
        raise RefinerError(f"no 'corrected' sentence in {text!r}")
    return corrected


def _parse_verdict(text: str) -> tuple[str, Optional[str]]:
    data = json.loads(text)
    if isinstance(data, dict):
        # JSON-object response modes wrap the array
        data = next(iter(data.values()), None) if len(data) == 1 else data.get("answer")
    if not isinstance(data, list) or len(data) != 2 or data[0] not in ("Same", "Different"):
        raise RefinerError(f"unrecognized verdict {text!r}")
    if data[0] == "Different":
        if not isinstance(data[1], str) or not data[1].strip():
            raise RefinerError(f"'Different' verdict without replacement: {text!r}")
        return "Different", data[1]
    return "Same", None


def refine(refiner: Refiner, sentence: str) -> str:
    """Two-pass correction; any failure returns ``sentence`` unchanged."""
    try:
        corrected = _parse_correction(refiner.exchange(correction_request(sentence)))
        verdict, replacement = _parse_verdict(
            refiner.exchange(verification_request(sentence, corrected)))
    except Exception as exc:  # fail-open: a build never depends on the refiner
        log.warning("refinement failed, keeping original sentence: %s", exc)
        return sentence
    return replacement if verdict == "Different" else corrected


def refine_many(refiner: Refiner, sentences: Sequence[str], max_in_flight: int = 4) -> list[str]:
    if max_in_flight <= 1 or len(sentences) <= 1:
        return [refine(refiner, s) for s in sentences]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(lambda s: refine(refiner, s), sentences))


class IdentityRefiner:
    """Offline stub: accepts every sentence as already correct."""

    def exchange(self, request: dict) -> str:
        if request["pass"] == 1:
            return json.dumps({"corrected": request["sentence"]})
        return json.dumps(["Same", "None"])


class ReplayRefiner:
    """Answers from a recorded transcript keyed by pass and sentence."""

    def __init__(self, transcript: Sequence[Mapping]):
        self._answers = {}
        for entry in transcript:
            self._answers[(1, entry["sentence"])] = entry["pass1"]
            self._answers[(2, entry["sentence"])] = entry["pass2"]

    @classmethod
    def from_file(cls, path) -> "ReplayRefiner":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def exchange(self, request: dict) -> str:
        key = (request["pass"], request["sentence"])
        if key not in self._answers:
            raise RefinerError(f"no recorded answer for pass {key[0]} of {key[1]!r}")
        return self._answers[key]


class HttpRefiner:
    """POSTs the JSON request body to ``url``; the response body is the answer."""

    def __init__(self, url: str, timeout: float = 30.0, retries: int = 2):
        self.url = url
        self.timeout = timeout
        self.retries = retries

    @classmethod
    def from_env(cls, environ: Mapping[str, str] = os.environ) -> "HttpRefiner":
        url = environ.get("MRSEG_REFINER_URL")
        if not url:
            raise RefinerError("MRSEG_REFINER_URL is not set")
        return cls(url, float(environ.get("MRSEG_REFINER_TIMEOUT", 30)),
                   int(environ.get("MRSEG_REFINER_RETRIES", 2)))

    def exchange(self, request: dict) -> str:
        body = json.dumps(request).encode("utf-8")
        last: Exception | None = None
        for _ in range(self.retries + 1):
            req = urllib.request.Request(self.url, data=body, method="POST",
                                         headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return resp.read().decode("utf-8")
            except (urllib.error.URLError, OSError) as exc:
                last = exc
        raise RefinerError(f"refiner unreachable at {self.url}: {last}")
