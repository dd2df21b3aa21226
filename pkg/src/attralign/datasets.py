"""Manifest ingestion, corpus filtering, and the balanced class-disjoint split.

The split keeps folds balanced by sample count: classes are sorted by count
descending (ties broken by ascending class id), consecutive groups of k are
shuffled with the seeded RNG, and each group member lands in a distinct
fold.  A final partial group is assigned to distinct folds chosen by a
seeded shuffle of the fold indices.  Training then uses k-1 folds and
evaluation the held-out one, so train and test class sets never intersect.
"""

from __future__ import annotations

import csv
import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import EmptyDatasetError, FoldError


def stable_hash64(text: str) -> int:
    """Process-independent 64-bit hash (used to derive per-key RNG streams)."""
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "big")

_SLUG_RE = re.compile(r"[^a-z0-9]+")


def slugify(name: str) -> str:
    """Lowercase, non-alphanumerics collapsed to single dashes."""
    return _SLUG_RE.sub("-", name.lower()).strip("-")


def class_id_for(dataset_tag: str, class_name: str) -> str:
    """Stable class identifier: dataset tag plus slugified class name."""
    return f"{dataset_tag}/{slugify(class_name)}"


@dataclass(frozen=True)
class SampleRecord:
    """One audio sample: id, class reference, and an opaque locator."""

    sample_id: str
    class_id: str
    audio_ref: str
    duration_s: float | None = None


@dataclass
class DatasetManifest:
    """The (possibly filtered) corpus for one dataset."""

    records: list[SampleRecord]
    dataset_tag: str
    multi_label_ids: frozenset[str] = field(default_factory=frozenset, repr=False)

    def __post_init__(self):
        ids = [r.sample_id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({s for s, n in Counter(ids).items() if n > 1})[:5]
            raise ValueError(f"duplicate sample_ids in manifest (first few: {dupes})")

    @property
    def class_counts(self) -> dict[str, int]:
        return dict(Counter(r.class_id for r in self.records))

    def class_ids(self) -> list[str]:
        return sorted(set(r.class_id for r in self.records))

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def from_csv(cls, path: str | Path, dataset_tag: str) -> "DatasetManifest":
        """Read a manifest CSV with header sample_id,class,audio_ref[,duration].

        The class column carries the class name; ids are derived by slugging
        it under the dataset tag.  Duplicate sample ids are tolerated here
        (multi-label rows) and resolved by filter_dataset.
        """
        rows: list[tuple[str, str, str, float | None]] = []
        with Path(path).open("r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            needed = {"sample_id", "class", "audio_ref"}
            if reader.fieldnames is None or not needed.issubset(reader.fieldnames):
                raise ValueError(f"manifest CSV needs columns {sorted(needed)}")
            for row in reader:
                duration = row.get("duration")
                rows.append(
                    (
                        row["sample_id"],
                        row["class"],
                        row["audio_ref"],
                        float(duration) if duration else None,
                    )
                )
        # multi-label rows (same sample, several classes) pass through here;
        # DatasetManifest construction enforces uniqueness, so expand ids
        seen = Counter(r[0] for r in rows)
        records = []
        for sample_id, name, ref, dur in rows:
            rid = sample_id if seen[sample_id] == 1 else f"{sample_id}#{class_id_for(dataset_tag, name)}"
            records.append(
                SampleRecord(rid, class_id_for(dataset_tag, name), ref, dur)
            )
        return cls(
            records=records,
            dataset_tag=dataset_tag,
            multi_label_ids=frozenset(s for s, n in seen.items() if n > 1),
        )

    def to_csv(self, path: str | Path, names: Mapping[str, str] | None = None) -> None:
        """Write the manifest back out; ``names`` maps class_id to class name."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "class", "audio_ref", "duration"])
            for r in self.records:
                name = names.get(r.class_id, r.class_id) if names else r.class_id
                writer.writerow([r.sample_id, name, r.audio_ref, r.duration_s or ""])


@dataclass(frozen=True)
class FilterRules:
    """Corpus filtering knobs: exclusions, count floor, per-class cap."""

    excluded_classes: frozenset[str] = frozenset()
    single_label_only: bool = True
    min_count: int = 100
    cap: int = 1500
    seed: int = 0


def load_excluded_classes(path: str | Path | None = None) -> frozenset[str]:
    """Read the excluded-class list (one name per line, # comments)."""
    if path is None:
        path = Path(__file__).parent / "resources" / "audioset_excluded_classes.txt"
    names = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            names.append(line)
    return frozenset(names)


def _per_class_rng(seed: int, class_id: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stable_hash64(class_id)]))


def filter_dataset(manifest: DatasetManifest, rules: FilterRules) -> DatasetManifest:
    """Apply exclusion, label-count, and down-sampling rules.

    Classes in the exclusion list (matched by id or by slug of the name) are
    dropped, multi-label samples are dropped when single_label_only is set,
    classes with fewer than min_count samples are dropped, and classes above
    cap are down-sampled to exactly cap via seeded uniform sampling without
    replacement.  Raises EmptyDatasetError when nothing survives.
    """
    excluded_ids = {
        class_id_for(manifest.dataset_tag, name) for name in rules.excluded_classes
    } | set(rules.excluded_classes)

    records = list(manifest.records)
    if rules.single_label_only and manifest.multi_label_ids:
        multi = manifest.multi_label_ids
        records = [r for r in records if r.sample_id.split("#")[0] not in multi]
    records = [r for r in records if r.class_id not in excluded_ids]

    counts = Counter(r.class_id for r in records)
    keep_classes = {c for c, n in counts.items() if n >= rules.min_count}
    records = [r for r in records if r.class_id in keep_classes]
    if not records:
        raise EmptyDatasetError("no class survived filtering")

    kept_ids: set[str] = set()
    for class_id in sorted(keep_classes):
        members = sorted(
            (r.sample_id for r in records if r.class_id == class_id)
        )
        if len(members) > rules.cap:
            rng = _per_class_rng(rules.seed, class_id)
            chosen = rng.choice(len(members), size=rules.cap, replace=False)
            kept_ids.update(members[i] for i in chosen)
        else:
            kept_ids.update(members)

    filtered = [r for r in records if r.sample_id in kept_ids]
    return DatasetManifest(records=filtered, dataset_tag=manifest.dataset_tag)


@dataclass
class FoldAssignment:
    """class_id -> fold index map defining the seen/unseen partition."""

    k: int
    fold_of: dict[str, int]
    seed: int

    def classes_in_fold(self, fold: int) -> list[str]:
        return sorted(c for c, f in self.fold_of.items() if f == fold)

    def classes_outside_fold(self, fold: int) -> list[str]:
        return sorted(c for c, f in self.fold_of.items() if f != fold)

    def to_json(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {"k": self.k, "seed": self.seed, "fold_of": self.fold_of}
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, path: str | Path) -> "FoldAssignment":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(k=payload["k"], fold_of=dict(payload["fold_of"]), seed=payload["seed"])


def split_folds(class_counts: Mapping[str, int], k: int = 5, seed: int = 0) -> FoldAssignment:
    """Balanced class-disjoint split.

    Classes sorted by count descending (ascending class id on ties) are
    taken k at a time; each group is shuffled and assigned one-per-fold, so
    every consecutive group of k in the sorted order spreads over all k
    folds.  A final partial group of size m < k goes to m distinct folds
    chosen by a seeded shuffle of the fold indices.
    """
    if len(class_counts) < k:
        raise FoldError(f"need at least {k} classes, got {len(class_counts)}")
    rng = np.random.default_rng(seed)
    ordered = sorted(class_counts, key=lambda c: (-class_counts[c], c))
    fold_of: dict[str, int] = {}
    for start in range(0, len(ordered), k):
        group = ordered[start : start + k]
        if len(group) == k:
            shuffled = list(group)
            rng.shuffle(shuffled)
            for fold, class_id in enumerate(shuffled):
                fold_of[class_id] = fold
        else:
            folds = list(range(k))
            rng.shuffle(folds)
            for class_id, fold in zip(group, folds):
                fold_of[class_id] = fold
    return FoldAssignment(k=k, fold_of=fold_of, seed=seed)


@dataclass
class DatasetView:
    """A slice of a manifest restricted to one side of a fold boundary."""

    records: list[SampleRecord]
    class_ids: tuple[str, ...]
    dataset_tag: str

    def __len__(self) -> int:
        return len(self.records)


def make_run_views(
    manifest: DatasetManifest, assignment: FoldAssignment, eval_fold: int
) -> tuple[DatasetView, DatasetView]:
    """Split a manifest into (train, test) views around ``eval_fold``.

    The class sets of the two views are disjoint by construction; samples of
    classes absent from the assignment are dropped with the eval fold rule
    applied to the remainder.
    """
    if not 0 <= eval_fold < assignment.k:
        raise FoldError(f"eval_fold {eval_fold} outside [0, {assignment.k})")
    test_classes = set(assignment.classes_in_fold(eval_fold))
    train_classes = set(assignment.classes_outside_fold(eval_fold))
    present = set(manifest.class_ids())
    train_classes &= present
    test_classes &= present
    train = DatasetView(
        records=[r for r in manifest.records if r.class_id in train_classes],
        class_ids=tuple(sorted(train_classes)),
        dataset_tag=manifest.dataset_tag,
    )
    test = DatasetView(
        records=[r for r in manifest.records if r.class_id in test_classes],
        class_ids=tuple(sorted(test_classes)),
        dataset_tag=manifest.dataset_tag,
    )
    return train, test
