"""Sound-attribute vocabulary, per-class description records, and rendering.

A sound class is described along seven attributes: its name, pitch, timbre,
onomatopoeia, simile, emotion, and an optional dictionary-style definition
(not every dataset provides one).  Descriptions are rendered into a single
natural-language string by concatenating the attribute texts in a fixed
canonical order with a sentence-like separator, which keeps the result
friendly to sentence encoders.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .errors import MissingAttributeError, MissingDescriptionError


class AttributeKind(Enum):
    """The seven description attributes, in canonical rendering order."""

    CLASS_NAME = "class_name"
    PITCH = "pitch"
    TIMBRE = "timbre"
    ONOMATOPOEIA = "onomatopoeia"
    SIMILE = "simile"
    EMOTION = "emotion"
    DEFINITION = "definition"


#: Canonical ordering over kinds (enum declaration order); total.
CANONICAL_ORDER: tuple[AttributeKind, ...] = tuple(AttributeKind)

#: Kinds that may legitimately be absent from a complete record.
OPTIONAL_KINDS: frozenset[AttributeKind] = frozenset({AttributeKind.DEFINITION})

#: Separator used when concatenating attribute texts.
SEPARATOR = ". "

#: Accepted provenance tags for stored descriptions.
PROVENANCE_TAGS = ("llm-generated", "manual", "few-shot-example")

#: Characters that would break the JSON-lines store's record framing.
_FORBIDDEN_CHARS = ("\n", "\r")


def canonical_sort(kinds: Iterable[AttributeKind]) -> tuple[AttributeKind, ...]:
    """Return ``kinds`` reordered into the canonical order (duplicates dropped)."""
    wanted = set(kinds)
    return tuple(k for k in CANONICAL_ORDER if k in wanted)


@dataclass(frozen=True)
class ClassDescription:
    """One sound class plus its per-attribute description texts."""

    class_id: str
    class_name: str
    attributes: dict[AttributeKind, str]

    def present_kinds(self) -> tuple[AttributeKind, ...]:
        """Kinds stored on this record, in canonical order."""
        return canonical_sort(self.attributes)

    def has(self, kind: AttributeKind) -> bool:
        return kind in self.attributes

    def text(self, kind: AttributeKind) -> str:
        try:
            return self.attributes[kind]
        except KeyError:
            raise MissingAttributeError(kind) from None

    def restricted(self, kinds: Iterable[AttributeKind]) -> "ClassDescription":
        """A copy keeping only ``kinds`` (the class name is always kept)."""
        keep = set(kinds) | {AttributeKind.CLASS_NAME}
        return ClassDescription(
            class_id=self.class_id,
            class_name=self.class_name,
            attributes={k: v for k, v in self.attributes.items() if k in keep},
        )


def make_description(
    class_id: str, class_name: str, texts: dict[AttributeKind, str]
) -> ClassDescription:
    """Build a record, forcing the class-name attribute to equal ``class_name``."""
    attributes = dict(texts)
    attributes[AttributeKind.CLASS_NAME] = class_name
    return ClassDescription(class_id=class_id, class_name=class_name, attributes=attributes)


def render_description(
    desc: ClassDescription,
    kinds: Sequence[AttributeKind],
    separator: str = SEPARATOR,
) -> str:
    """Join the attribute texts of ``desc`` in the given order.

    Deterministic and order-sensitive: a permutation of ``kinds`` yields a
    different string whenever the texts are distinct and separator-free.
    Raises MissingAttributeError naming the first absent kind.
    """
    if not kinds:
        raise ValueError("kinds must be non-empty")
    parts = []
    for kind in kinds:
        if kind not in desc.attributes:
            raise MissingAttributeError(kind)
        parts.append(desc.attributes[kind])
    return separator.join(parts)


def validate(desc: ClassDescription, require_definition: bool = False) -> list[str]:
    """Return a list of issues; empty iff the record is complete and consistent.

    Issues are data, not failures: each entry is a short human-readable
    string starting with a stable token (``missing:``, ``empty:``,
    ``separator-char:``, ``class-name-mismatch:``).
    """
    issues: list[str] = []
    required = [k for k in CANONICAL_ORDER if k not in OPTIONAL_KINDS]
    if require_definition:
        required.append(AttributeKind.DEFINITION)
    for kind in required:
        if kind not in desc.attributes:
            issues.append(f"missing: {kind.value}")
    for kind, text in desc.attributes.items():
        if not text or not text.strip():
            issues.append(f"empty: {kind.value}")
        elif any(ch in text for ch in _FORBIDDEN_CHARS):
            issues.append(f"separator-char: {kind.value}")
    name_text = desc.attributes.get(AttributeKind.CLASS_NAME)
    if name_text is not None and name_text != desc.class_name:
        issues.append(f"class-name-mismatch: {name_text!r} != {desc.class_name!r}")
    return issues


def description_to_record(desc: ClassDescription, provenance: str, **extra) -> dict:
    """Serialize one description to the JSON-lines store schema."""
    record = {
        "class_id": desc.class_id,
        "class_name": desc.class_name,
        "attributes": {k.value: v for k, v in sorted(desc.attributes.items(), key=lambda kv: CANONICAL_ORDER.index(kv[0]))},
        "provenance": provenance,
    }
    record.update(extra)
    return record


def description_from_record(record: dict) -> tuple[ClassDescription, str]:
    """Inverse of :func:`description_to_record`; unknown keys are ignored."""
    attributes = {AttributeKind(k): v for k, v in record["attributes"].items()}
    desc = ClassDescription(
        class_id=record["class_id"],
        class_name=record["class_name"],
        attributes=attributes,
    )
    return desc, record.get("provenance", "manual")


@dataclass
class DescriptionStore:
    """In-memory map class_id -> description, with per-entry provenance.

    Read-shared after load; mutation happens only during generation, which is
    single-writer.  Lookups by id are total over stored entries: a miss
    raises MissingDescriptionError.
    """

    entries: dict[str, ClassDescription] = field(default_factory=dict)
    provenance: dict[str, str] = field(default_factory=dict)

    def add(self, desc: ClassDescription, provenance: str) -> None:
        if desc.class_id in self.entries:
            raise ValueError(f"duplicate class_id '{desc.class_id}' in store")
        self.entries[desc.class_id] = desc
        self.provenance[desc.class_id] = provenance

    def get(self, class_id: str) -> ClassDescription:
        try:
            return self.entries[class_id]
        except KeyError:
            raise MissingDescriptionError(class_id) from None

    def __contains__(self, class_id: str) -> bool:
        return class_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def class_ids(self) -> list[str]:
        return sorted(self.entries)

    def items(self) -> Iterator[tuple[str, ClassDescription]]:
        return iter(self.entries.items())

    def save_jsonl(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for class_id in self.class_ids():
                record = description_to_record(self.entries[class_id], self.provenance[class_id])
                fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")

    @classmethod
    def load_jsonl(cls, path: str | Path) -> "DescriptionStore":
        store = cls()
        with Path(path).open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                desc, provenance = description_from_record(json.loads(line))
                store.add(desc, provenance)
        return store
