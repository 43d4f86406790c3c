"""Static and dynamic entity-representation builders with an on-disk replay cache."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

from mmel.datamodel import EntityRecord
from mmel.erpipeline.cleaning import DEFAULT_MAX_TOKENS, clean_text
from mmel.erpipeline.clients import NOT_FOUND, KBPageClient, LLMClient

SYSTEM_PROMPT = (
    "You are a helpful assistant designed to give a comprehensive introduction about people. Who is this one?"
)
FOLLOW_UP_PROMPT = "Please provide more detailed information."

MODES = ("static", "dynamic")


class RefusalDetector:
    def __init__(self, patterns: Iterable[str]):
        self.patterns = tuple(p.casefold() for p in patterns if p.strip())
        if not self.patterns:
            raise ValueError("refusal detector needs at least one pattern")

    @classmethod
    def from_file(cls, path: str | Path) -> "RefusalDetector":
        return cls(_read_patterns(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def default(cls) -> "RefusalDetector":
        text = resources.files("mmel.erpipeline").joinpath("data/refusal_patterns.txt").read_text(encoding="utf-8")
        return cls(_read_patterns(text))

    def matches(self, response: str) -> bool:
        folded = response.casefold()
        return any(p in folded for p in self.patterns)


def _read_patterns(text: str) -> list[str]:
    return [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]


@dataclass(frozen=True)
class Round:
    messages: tuple[tuple[str, str], ...]
    response: str

    def to_json(self):
        return {"messages": [{"role": r, "content": c} for r, c in self.messages], "response": self.response}

    @classmethod
    def from_json(cls, obj):
        return cls(tuple((m["role"], m["content"]) for m in obj["messages"]), obj["response"])


@dataclass(frozen=True)
class ERBuild:
    qid: str
    mode: str
    er_text: Optional[str]
    reason: Optional[str] = None
    rounds: tuple[Round, ...] = ()
    cached: bool = False

    @property
    def dropped(self) -> bool:
        return self.er_text is None

    def to_json(self, version: str) -> dict:
        return {
            "qid": self.qid,
            "mode": self.mode,
            "version": version,
            "er_text": self.er_text,
            "dropped": self.dropped,
            "reason": self.reason,
            "rounds": [r.to_json() for r in self.rounds],
        }

    @classmethod
    def from_json(cls, obj) -> "ERBuild":
        return cls(obj["qid"], obj["mode"], obj["er_text"], obj.get("reason"),
                   tuple(Round.from_json(r) for r in obj.get("rounds", [])))


def build_static_er(entity: EntityRecord, kb: KBPageClient, max_tokens: int = DEFAULT_MAX_TOKENS) -> ERBuild:
    """Cleaned first two paragraphs of the entity's knowledge-base page.

    Entities without a page, or whose page cleans to nothing, are dropped.
    Transport failures propagate.
    """
    paragraphs = kb.fetch_extract(entity.name)
    if paragraphs is NOT_FOUND:
        return ERBuild(entity.qid, "static", None, "not_found")
    text = clean_text(" ".join(paragraphs[:2]), max_tokens)
    if not text:
        return ERBuild(entity.qid, "static", None, "empty_description")
    return ERBuild(entity.qid, "static", text)


def _messages(pairs) -> list[dict]:
    return [{"role": r, "content": c} for r, c in pairs]


def build_dynamic_er(entity: EntityRecord, llm: LLMClient, kb: KBPageClient, detector: RefusalDetector,
                     max_tokens: int = DEFAULT_MAX_TOKENS) -> ERBuild:
    """Ask the chat model for an introduction; on a refusal, retry once with the KB description as context."""
    first = (("system", SYSTEM_PROMPT), ("user", entity.name))
    reply = llm.chat(_messages(first))
    rounds = [Round(first, reply)]
    if detector.matches(reply):
        static = build_static_er(entity, kb, max_tokens)
        context = static.er_text or ""
        follow_up = f"{context} {FOLLOW_UP_PROMPT}" if context else FOLLOW_UP_PROMPT
        second = first + (("assistant", reply), ("user", follow_up))
        reply = llm.chat(_messages(second))
        rounds.append(Round(second, reply))
        if detector.matches(reply):
            return ERBuild(entity.qid, "dynamic", None, "refused_after_follow_up", tuple(rounds))
    text = clean_text(reply, max_tokens)
    if not text:
        return ERBuild(entity.qid, "dynamic", None, "empty_response", tuple(rounds))
    return ERBuild(entity.qid, "dynamic", text, None, tuple(rounds))


def pipeline_version(max_tokens: int, detector: Optional[RefusalDetector]) -> str:
    h = hashlib.sha256()
    for part in (SYSTEM_PROMPT, FOLLOW_UP_PROMPT, str(max_tokens), *(detector.patterns if detector else ())):
        h.update(part.encode("utf-8") + b"\x1f")
    return "er1-" + h.hexdigest()[:12]


class ERCache:
    """One JSON file per (qid, mode, pipeline version); writes are write-then-rename."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, qid: str, mode: str, version: str) -> Path:
        key = hashlib.sha256(f"{qid}\x1f{mode}\x1f{version}".encode("utf-8")).hexdigest()[:32]
        return self.root / f"{key}.json"

    def get(self, qid: str, mode: str, version: str) -> Optional[ERBuild]:
        path = self._path(qid, mode, version)
        if not path.exists():
            return None
        obj = json.loads(path.read_text(encoding="utf-8"))
        if (obj.get("qid"), obj.get("mode"), obj.get("version")) != (qid, mode, version):
            return None
        return replace(ERBuild.from_json(obj), cached=True)

    def put(self, build: ERBuild, version: str) -> None:
        path = self._path(build.qid, build.mode, version)
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-", suffix=".json")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(build.to_json(version), fh, ensure_ascii=False, sort_keys=True)
        os.replace(tmp, path)


@dataclass
class ERPipeline:
    kb: KBPageClient
    llm: Optional[LLMClient] = None
    detector: Optional[RefusalDetector] = None
    cache: Optional[ERCache] = None
    max_tokens: int = DEFAULT_MAX_TOKENS
    workers: int = 1
    version: str = field(init=False)

    def __post_init__(self):
        self.version = pipeline_version(self.max_tokens, self.detector)

    def build(self, entity: EntityRecord, mode: str) -> ERBuild:
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.cache is not None:
            hit = self.cache.get(entity.qid, mode, self.version)
            if hit is not None:
                return hit
        if mode == "static":
            result = build_static_er(entity, self.kb, self.max_tokens)
        else:
            if self.llm is None:
                raise ValueError("dynamic enhancement needs a chat client")
            result = build_dynamic_er(entity, self.llm, self.kb, self.detector or RefusalDetector.default(),
                                      self.max_tokens)
        if self.cache is not None:
            self.cache.put(result, self.version)
        return result

    def run(self, entities: Sequence[EntityRecord], mode: str) -> list[ERBuild]:
        """Build every entity; results keep input order whatever the worker count."""
        if self.workers <= 1:
            return [self.build(e, mode) for e in entities]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(lambda e: self.build(e, mode), entities))


def report_enhancement(builds: Sequence[ERBuild]) -> dict:
    summary: dict[str, dict] = {}
    for b in builds:
        s = summary.setdefault(b.mode, {"total": 0, "built": 0, "dropped": 0, "round2": 0, "cached": 0,
                                        "drop_reasons": {}})
        s["total"] += 1
        s["cached"] += int(b.cached)
        if len(b.rounds) >= 2:
            s["round2"] += 1
        if b.dropped:
            s["dropped"] += 1
            s["drop_reasons"][b.reason] = s["drop_reasons"].get(b.reason, 0) + 1
        else:
            s["built"] += 1
    return summary


def apply_builds(entities: Sequence[EntityRecord], builds: Sequence[ERBuild]) -> list[EntityRecord]:
    """Entities with their new representation; dropped entities are removed."""
    by_qid = {b.qid: b for b in builds}
    out = []
    for e in entities:
        b = by_qid.get(e.qid)
        if b is None:
            out.append(e)
        elif not b.dropped:
            out.append(replace(e, er_text=b.er_text, er_source=b.mode))
    return out
