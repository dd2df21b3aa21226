"""Few-shot generation of class descriptions through a chat-completion service.

The generator sends one prompt per class.  Each prompt carries a fixed
preamble, a handful of worked query/answer examples, and the query for the
target class.  Answers are requested as one ``key: value`` line per
attribute with fixed keys, which parses robustly.  Results are cached to a
JSON-lines file (the description-store schema plus a ``prompt_hash`` field)
before being returned, so a re-run over the same classes issues zero
service calls.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import requests

from .attributes import (
    SEPARATOR,
    AttributeKind,
    ClassDescription,
    DescriptionStore,
    description_from_record,
    description_to_record,
    make_description,
    validate,
)
from .errors import DescriptionParseError, GenerationError, MissingAttributeError, ServiceError

logger = logging.getLogger(__name__)

#: Environment variables holding the chat service endpoint and credential.
ENDPOINT_ENV = "ATTRALIGN_API_ENDPOINT"
API_KEY_ENV = "ATTRALIGN_API_KEY"

#: Attribute kinds the model is asked to emit; the class name comes from the
#: job, never from the response.
_RESPONSE_KINDS = (
    AttributeKind.PITCH,
    AttributeKind.TIMBRE,
    AttributeKind.ONOMATOPOEIA,
    AttributeKind.SIMILE,
    AttributeKind.EMOTION,
)

_LINE_RE = re.compile(r"^\s*[-*]?\s*([a-zA-Z_ ]+?)\s*:\s*(.+?)\s*$")


@dataclass(frozen=True)
class PromptTemplate:
    """Prompt skeleton: preamble, worked examples, and the query format."""

    system_preamble: str
    few_shot_examples: tuple[tuple[str, ClassDescription], ...]
    query_format: str = "Sound class: {class_name}"
    include_definition: bool = False

    def __post_init__(self):
        for name, desc in self.few_shot_examples:
            issues = validate(desc, require_definition=self.include_definition)
            if issues:
                raise ValueError(f"few-shot example '{name}' is invalid: {issues}")

    def example_names(self) -> frozenset[str]:
        return frozenset(name for name, _ in self.few_shot_examples)

    def response_kinds(self) -> tuple[AttributeKind, ...]:
        kinds = _RESPONSE_KINDS
        if self.include_definition:
            kinds = kinds + (AttributeKind.DEFINITION,)
        return kinds


@dataclass(frozen=True)
class GenerationJob:
    """One batch of classes to describe, plus service and cache settings."""

    classes: tuple[tuple[str, str], ...]  # (class_id, class_name)
    model_name: str
    cache_path: Path
    temperature: float = 0.0
    max_retries: int = 5
    concurrency: int = 4

    def __post_init__(self):
        if not self.classes:
            raise ValueError("job has no classes")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        ids = [cid for cid, _ in self.classes]
        if len(set(ids)) != len(ids):
            dupes = sorted({c for c in ids if ids.count(c) > 1})
            raise ValueError(f"duplicate class_ids in job: {dupes}")


def format_answer(desc: ClassDescription, kinds: Sequence[AttributeKind]) -> str:
    """Render a description in the line-keyed answer format we request."""
    return "\n".join(f"{k.value}: {desc.attributes[k]}" for k in kinds)


def build_prompt(template: PromptTemplate, class_name: str) -> str:
    """Assemble the full prompt text for one class.

    Deterministic: identical template and class name yield byte-identical
    prompts.  Classes that already appear among the few-shot examples must
    not be prompted for; describe_all returns their stored answers instead.
    """
    if class_name in template.example_names():
        raise ValueError(
            f"'{class_name}' is a few-shot example; reuse its stored description"
        )
    kinds = template.response_kinds()
    blocks = [template.system_preamble.rstrip()]
    for name, desc in template.few_shot_examples:
        blocks.append(
            template.query_format.format(class_name=name) + "\n" + format_answer(desc, kinds)
        )
    blocks.append(template.query_format.format(class_name=class_name))
    return "\n\n".join(blocks)


def parse_response(
    raw: str,
    class_id: str,
    class_name: str,
    require_definition: bool = False,
) -> ClassDescription:
    """Parse a completion into a description record.

    The class name is filled from the job, not the response; a class-name
    line in the response is ignored.  Unknown keys are ignored.  Raises
    DescriptionParseError when no attribute line is recognizable at all,
    MissingAttributeError when a required kind is absent.
    """
    by_value = {k.value: k for k in AttributeKind}
    found: dict[AttributeKind, str] = {}
    for line in raw.splitlines():
        match = _LINE_RE.match(line)
        if not match:
            continue
        key = match.group(1).strip().lower().replace(" ", "_")
        kind = by_value.get(key)
        if kind is None or kind is AttributeKind.CLASS_NAME:
            continue
        # keep the first occurrence of each key
        found.setdefault(kind, match.group(2).strip())
    if not found:
        raise DescriptionParseError(
            f"no attribute lines recognized in response for '{class_name}'"
        )
    required = list(_RESPONSE_KINDS)
    if require_definition:
        required.append(AttributeKind.DEFINITION)
    for kind in required:
        if kind not in found:
            raise MissingAttributeError(kind)
    return make_description(class_id, class_name, found)


class ChatClient(Protocol):
    def complete(self, prompt: str) -> str: ...


class HttpChatClient:
    """Minimal OpenAI-style chat-completions client.

    Endpoint and API key come from the environment (ATTRALIGN_API_ENDPOINT,
    ATTRALIGN_API_KEY); the constructor only takes what varies per job.
    """

    def __init__(self, model_name: str, temperature: float = 0.0, timeout: float = 60.0):
        endpoint = os.environ.get(ENDPOINT_ENV)
        if not endpoint:
            raise ServiceError(f"{ENDPOINT_ENV} is not set")
        self.endpoint = endpoint
        self.api_key = os.environ.get(API_KEY_ENV, "")
        self.model_name = model_name
        self.temperature = temperature
        self.timeout = timeout

    def complete(self, prompt: str) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {
            "model": self.model_name,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": prompt}],
        }
        resp = requests.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
        resp.raise_for_status()
        body = resp.json()
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ServiceError(f"malformed completion payload: {exc}") from exc


class MockChatClient:
    """Table-driven offline client for tests; records every prompt it sees."""

    def __init__(self, answers: dict[str, str], query_format: str = "Sound class: {class_name}"):
        self.answers = dict(answers)
        self.query_format = query_format
        self.prompts: list[str] = []
        self._lock = threading.Lock()

    @property
    def call_count(self) -> int:
        return len(self.prompts)

    def complete(self, prompt: str) -> str:
        with self._lock:
            self.prompts.append(prompt)
        # the trailing query names the class being asked about
        tail = prompt.rsplit("\n\n", 1)[-1]
        for name, answer in self.answers.items():
            if tail == self.query_format.format(class_name=name):
                return answer
        raise ServiceError(f"mock client has no answer for query {tail!r}")


def _complete_with_retries(
    client: ChatClient,
    prompt: str,
    max_retries: int,
    base_delay: float = 0.5,
    sleep=time.sleep,
) -> str:
    """Call the client, retrying with jittered exponential backoff."""
    jitter = random.Random(hash(prompt) & 0xFFFF)
    last: Exception | None = None
    for attempt in range(max_retries + 1):
        try:
            return client.complete(prompt)
        except Exception as exc:  # noqa: BLE001 — any transport failure retries
            last = exc
            if attempt == max_retries:
                break
            delay = base_delay * (2**attempt) * (1.0 + 0.25 * jitter.random())
            logger.warning("completion attempt %d failed (%s); retrying in %.1fs", attempt + 1, exc, delay)
            sleep(delay)
    raise ServiceError(f"service unavailable after {max_retries + 1} attempts: {last}") from last


def _prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]


class _CacheWriter:
    """Append-only JSON-lines cache with a single serialized writer."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def load(self) -> DescriptionStore:
        store = DescriptionStore()
        if self.path.exists():
            with self.path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    desc, provenance = description_from_record(json.loads(line))
                    if desc.class_id not in store:
                        store.add(desc, provenance)
        return store

    def append(self, desc: ClassDescription, provenance: str, prompt_hash: str) -> None:
        record = description_to_record(desc, provenance, prompt_hash=prompt_hash)
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")


def describe_all(
    job: GenerationJob,
    template: PromptTemplate,
    client: ChatClient | None = None,
    sleep=time.sleep,
) -> DescriptionStore:
    """Produce a validated description for every class in the job.

    Entries already in the cache are reused without a service call; classes
    matching a few-shot example reuse the example's answer.  New entries are
    appended to the cache as soon as they validate, so a failure partway
    through still persists the successful ones.  Raises GenerationError
    listing the offending classes when any response fails to parse or
    validate, ServiceError when the service stays down past the retry
    budget.
    """
    if client is None:
        client = HttpChatClient(job.model_name, job.temperature)
    writer = _CacheWriter(job.cache_path)
    cached = writer.load()
    examples = {name: desc for name, desc in template.few_shot_examples}
    require_def = template.include_definition

    result = DescriptionStore()
    failures: dict[str, str] = {}
    pending: list[tuple[str, str]] = []

    for class_id, class_name in job.classes:
        if class_id in cached:
            result.add(cached.get(class_id), cached.provenance[class_id])
        elif class_name in examples:
            desc = make_description(class_id, class_name, examples[class_name].attributes)
            writer.append(desc, "few-shot-example", _prompt_hash(""))
            result.add(desc, "few-shot-example")
        else:
            pending.append((class_id, class_name))

    def generate(class_id: str, class_name: str) -> tuple[str, ClassDescription]:
        prompt = build_prompt(template, class_name)
        raw = _complete_with_retries(client, prompt, job.max_retries, sleep=sleep)
        desc = parse_response(raw, class_id, class_name, require_definition=require_def)
        issues = validate(desc, require_definition=require_def)
        if issues:
            raise DescriptionParseError(f"validation failed: {issues}")
        writer.append(desc, "llm-generated", _prompt_hash(prompt))
        return class_id, desc

    if pending:
        with ThreadPoolExecutor(max_workers=max(1, job.concurrency)) as pool:
            futures = {pool.submit(generate, cid, name): (cid, name) for cid, name in pending}
            for future, (cid, name) in futures.items():
                try:
                    class_id, desc = future.result()
                    result.add(desc, "llm-generated")
                except ServiceError:
                    raise
                except Exception as exc:  # parse/validation failures are collected
                    failures[cid] = str(exc)

    if failures:
        raise GenerationError(failures)
    return result


def load_seed_examples() -> tuple[tuple[str, ClassDescription], ...]:
    """The bundled hand-written few-shot seed descriptions."""
    path = Path(__file__).parent / "resources" / "seed_descriptions.jsonl"
    pairs = []
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            desc, _ = description_from_record(json.loads(line))
            pairs.append((desc.class_name, desc))
    return tuple(pairs)


DEFAULT_PREAMBLE = (
    "You describe how sound classes sound. For each queried sound class, "
    "answer with exactly one line per attribute, in the form 'key: value', "
    "using these keys: pitch, timbre, onomatopoeia, simile, emotion"
    "{definition}. Describe the sound itself, not the object that makes it."
)


def default_template(include_definition: bool = False) -> PromptTemplate:
    """Template seeded with the bundled few-shot examples."""
    preamble = DEFAULT_PREAMBLE.format(
        definition=", definition" if include_definition else ""
    )
    examples = load_seed_examples()
    if not include_definition:
        examples = tuple(
            (name, desc.restricted(set(desc.present_kinds()) - {AttributeKind.DEFINITION}))
            for name, desc in examples
        )
    return PromptTemplate(
        system_preamble=preamble,
        few_shot_examples=examples,
        include_definition=include_definition,
    )
