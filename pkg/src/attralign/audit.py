"""Access-logging wrappers for the zero-shot hygiene audit.

Training code reaches samples only through the feature provider and
descriptions only through the store, so wrapping those two surfaces records
every id either stage touches.  The audit then checks the recorded sets
against the held-out fold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attributes import ClassDescription, DescriptionStore
from .datasets import SampleRecord
from .synthetic import FeatureProvider


@dataclass
class AccessLog:
    sample_reads: set[str] = field(default_factory=set)
    description_reads: set[str] = field(default_factory=set)

    def violations(self, forbidden_samples: set[str], forbidden_classes: set[str]) -> dict:
        return {
            "samples": sorted(self.sample_reads & forbidden_samples),
            "descriptions": sorted(self.description_reads & forbidden_classes),
        }


class LoggingDescriptionStore(DescriptionStore):
    """Store proxy recording every class id whose description is read."""

    def __init__(self, inner: DescriptionStore, log: AccessLog):
        super().__init__(entries=inner.entries, provenance=inner.provenance)
        self.log = log

    def get(self, class_id: str) -> ClassDescription:
        self.log.description_reads.add(class_id)
        return super().get(class_id)


class LoggingFeatureProvider(FeatureProvider):
    """Provider proxy recording every sample id whose features are read."""

    def __init__(self, inner: FeatureProvider, log: AccessLog):
        self.inner = inner
        self.log = log
        self.input_dim = inner.input_dim

    def __call__(self, record: SampleRecord) -> np.ndarray:
        self.log.sample_reads.add(record.sample_id)
        return self.inner(record)

    def batch(self, records: Sequence[SampleRecord]) -> np.ndarray:
        self.log.sample_reads.update(r.sample_id for r in records)
        return self.inner.batch(records)
