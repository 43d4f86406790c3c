"""Core records, JSON-lines loading/validation and corpus statistics.

Sample files hold one JSON object per line with the keys ``sample_id``,
``mention``, ``text``, ``image_ref``, ``gold_qid`` and (optionally)
``provided_candidates``.  Entity files hold ``qid``, ``name``, ``type_tag``,
``er_text`` and ``er_source``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

ER_SOURCES = ("property", "static", "dynamic")

SAMPLE_KEYS = ("sample_id", "mention", "text", "image_ref", "gold_qid", "provided_candidates")
ENTITY_KEYS = ("qid", "name", "type_tag", "er_text", "er_source")


class DatasetError(ValueError):
    """Raised when a sample or entity file cannot be parsed."""

    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


@dataclass(frozen=True)
class EntityRecord:
    qid: str
    name: str
    type_tag: Optional[str] = None
    er_text: str = ""
    er_source: str = "static"

    def __post_init__(self):
        if not self.qid:
            raise ValueError("qid must be non-empty")
        if self.er_source not in ER_SOURCES:
            raise ValueError(f"er_source must be one of {ER_SOURCES}, got {self.er_source!r}")


@dataclass(frozen=True)
class MentionSample:
    sample_id: str
    mention: str
    text: str
    gold_qid: str
    image_ref: Optional[str] = None
    provided_candidates: Optional[tuple[str, ...]] = None

    def to_json(self) -> dict:
        out = asdict(self)
        if self.provided_candidates is not None:
            out["provided_candidates"] = list(self.provided_candidates)
        return {k: out[k] for k in SAMPLE_KEYS}


@dataclass
class ValidationReport:
    missing_gold: list[str] = field(default_factory=list)
    empty_er: list[str] = field(default_factory=list)
    empty_mentions: list[str] = field(default_factory=list)

    @property
    def counts(self) -> dict[str, int]:
        return {
            "missing_gold": len(self.missing_gold),
            "empty_er": len(self.empty_er),
            "empty_mentions": len(self.empty_mentions),
        }

    @property
    def ok(self) -> bool:
        return not (self.missing_gold or self.empty_er or self.empty_mentions)


@dataclass(frozen=True)
class DatasetStats:
    samples: int
    entities: int
    mentions: int
    mean_text_len: float


def _require(obj: dict, key: str, lineno: int, kind=str, optional: bool = False):
    if key not in obj or obj[key] is None:
        if optional:
            return None
        raise DatasetError("missing required field", lineno, key)
    value = obj[key]
    if not isinstance(value, kind):
        raise DatasetError(f"expected {kind.__name__}, got {type(value).__name__}", lineno, key)
    return value


def _iter_json_lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(obj, dict):
                raise DatasetError("record must be a JSON object", lineno)
            yield lineno, obj


def parse_sample(obj: dict, lineno: int = 0) -> MentionSample:
    sample_id = _require(obj, "sample_id", lineno)
    if not sample_id:
        raise DatasetError("sample_id must be non-empty", lineno, "sample_id")
    provided = _require(obj, "provided_candidates", lineno, list, optional=True)
    if provided is not None and not all(isinstance(q, str) for q in provided):
        raise DatasetError("candidate ids must be strings", lineno, "provided_candidates")
    return MentionSample(
        sample_id=sample_id,
        mention=_require(obj, "mention", lineno),
        text=_require(obj, "text", lineno),
        gold_qid=_require(obj, "gold_qid", lineno),
        image_ref=_require(obj, "image_ref", lineno, optional=True),
        provided_candidates=tuple(provided) if provided is not None else None,
    )


def load_samples(path: str | Path) -> list[MentionSample]:
    """Read a sample file, preserving file order.

    Raises DatasetError naming the line and field of the first malformed
    record, or the first repeated ``sample_id``.
    """
    samples: list[MentionSample] = []
    seen: dict[str, int] = {}
    for lineno, obj in _iter_json_lines(Path(path)):
        sample = parse_sample(obj, lineno)
        if sample.sample_id in seen:
            raise DatasetError(
                f"duplicate sample_id {sample.sample_id!r} (first seen on line {seen[sample.sample_id]})",
                lineno,
                "sample_id",
            )
        seen[sample.sample_id] = lineno
        samples.append(sample)
    return samples


def save_samples(samples: Iterable[MentionSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), ensure_ascii=False) + "\n")


def parse_entity(obj: dict, lineno: int = 0) -> EntityRecord:
    qid = _require(obj, "qid", lineno)
    if not qid:
        raise DatasetError("qid must be non-empty", lineno, "qid")
    source = obj.get("er_source", "static")
    if source not in ER_SOURCES:
        raise DatasetError(f"er_source must be one of {ER_SOURCES}", lineno, "er_source")
    return EntityRecord(
        qid=qid,
        name=_require(obj, "name", lineno),
        type_tag=_require(obj, "type_tag", lineno, optional=True),
        er_text=_require(obj, "er_text", lineno, optional=True) or "",
        er_source=source,
    )


def load_entities(path: str | Path) -> list[EntityRecord]:
    entities: list[EntityRecord] = []
    seen: dict[str, int] = {}
    for lineno, obj in _iter_json_lines(Path(path)):
        entity = parse_entity(obj, lineno)
        if entity.qid in seen:
            raise DatasetError(f"duplicate qid {entity.qid!r} (first seen on line {seen[entity.qid]})", lineno, "qid")
        seen[entity.qid] = lineno
        entities.append(entity)
    return entities


def save_entities(entities: Iterable[EntityRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entities:
            fh.write(json.dumps({k: getattr(e, k) for k in ENTITY_KEYS}, ensure_ascii=False) + "\n")


def validate_dataset(samples: Sequence[MentionSample], entities: Sequence[EntityRecord]) -> ValidationReport:
    """Report-only consistency check.

    Entities whose enhanced representation is empty are listed for dropping:
    an entity without a knowledge-base description cannot be linked.
    """
    qids = {e.qid for e in entities}
    report = ValidationReport()
    for s in samples:
        if s.gold_qid not in qids:
            report.missing_gold.append(s.sample_id)
        if not s.mention.strip():
            report.empty_mentions.append(s.sample_id)
    for e in entities:
        if not e.er_text.strip():
            report.empty_er.append(e.qid)
    return report


def drop_flagged(samples: Sequence[MentionSample], entities: Sequence[EntityRecord],
                 report: ValidationReport) -> tuple[list[MentionSample], list[EntityRecord]]:
    """Remove entities with empty ER and the samples that can no longer resolve."""
    dropped = set(report.empty_er)
    kept_entities = [e for e in entities if e.qid not in dropped]
    qids = {e.qid for e in kept_entities}
    kept_samples = [s for s in samples if s.gold_qid in qids]
    return kept_samples, kept_entities


def compute_stats(samples: Sequence[MentionSample], entities: Sequence[EntityRecord]) -> DatasetStats:
    """Corpus counts in the layout of the usual dataset statistics table.

    A sample is a distinct (text, image_ref) context; every record is one
    mention.  Text length is the mean number of tokenizer tokens per sample,
    sentinels excluded, rounded to one decimal.
    """
    from mmel.encoders import content_tokens

    contexts = sorted({(s.text, s.image_ref or "") for s in samples})
    if contexts:
        mean_len = sum(len(content_tokens(text)) for text, _ in contexts) / len(contexts)
    else:
        mean_len = 0.0
    return DatasetStats(
        samples=len(contexts),
        entities=len(entities),
        mentions=len(samples),
        mean_text_len=round(mean_len, 1),
    )
