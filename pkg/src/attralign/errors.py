"""Exception types shared across the toolkit."""

from __future__ import annotations


class AttralignError(Exception):
    """Base class for every error raised by this package."""


class MissingAttributeError(AttralignError):
    """An attribute kind required for an operation is absent from a record."""

    def __init__(self, kind, message: str | None = None):
        self.kind = kind
        super().__init__(message or f"missing attribute: {getattr(kind, 'value', kind)}")


class MissingDescriptionError(AttralignError):
    """A class id has no entry in the description store."""

    def __init__(self, class_id: str):
        self.class_id = class_id
        super().__init__(f"no description stored for class '{class_id}'")


class DescriptionParseError(AttralignError):
    """An LLM completion could not be parsed into attribute fields."""


class GenerationError(AttralignError):
    """Description generation failed for one or more classes.

    Partial results are cached before this is raised; ``failures`` maps
    class_id to the reason string.
    """

    def __init__(self, failures: dict[str, str]):
        self.failures = dict(failures)
        names = ", ".join(sorted(self.failures))
        super().__init__(f"description generation failed for: {names}")


class ServiceError(AttralignError):
    """The chat completion service stayed unavailable past the retry budget."""


class EmptyDatasetError(AttralignError):
    """Filtering removed every class from a manifest."""


class FoldError(AttralignError):
    """Fold construction or fold/checkpoint consistency failed."""


class DimensionError(AttralignError):
    """An embedding or parameter block has an incompatible shape."""


class UnknownBackboneError(AttralignError):
    """A backbone name is not present in the encoder registry."""

    def __init__(self, name: str, known: list[str]):
        self.name = name
        super().__init__(f"unknown backbone '{name}'; registered: {', '.join(sorted(known))}")


class ConfigError(AttralignError):
    """A run configuration failed validation.

    ``path`` is the dotted key of the offending field.
    """

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class CheckpointError(AttralignError):
    """A checkpoint file is unreadable or incompatible with the run config."""
