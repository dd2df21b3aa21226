"""Audio/text encoder contracts, a backbone registry, and synthetic encoders.

The toolkit treats encoder backbones as opaque: anything registered under a
name that honors the contracts below can be plugged in through the run
config.  The text encoder is frozen (immutable parameters, deterministic
output); the audio encoder is trainable.  Two synthetic encoders make the
whole pipeline runnable and exactly reproducible on a laptop CPU:

* a hashing text encoder: token n-grams are feature-hashed into a fixed-dim
  vector with stable signs, L2-normalized, with class-name tokens weighted
  dominantly so the class name stays the cleanest signal in a description;
* an affine audio encoder standing in for a from-scratch backbone, fed by
  feature vectors (class prototype plus per-sample Gaussian noise for the
  synthetic corpus).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import DimensionError, UnknownBackboneError


def check_finite(name: str, array: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(array)):
        raise ValueError(f"{name} contains non-finite entries")
    return array


class TextEncoder:
    """Frozen deterministic text -> vector contract."""

    backbone_name: str = "text"
    output_dim: int
    trainable: bool = False

    def encode(self, text: str) -> np.ndarray:
        raise NotImplementedError

    def encode_batch(self, texts: Iterable[str]) -> np.ndarray:
        return np.stack([self.encode(t) for t in texts])


class AudioEncoder:
    """Trainable clip-features -> vector contract.

    Implementations used by the numpy trainer additionally expose
    forward/backward passes and a flat parameter dict so the training loop
    can apply gradient updates; adapters for external frameworks own their
    training integration instead.
    """

    backbone_name: str = "audio"
    input_dim: int
    output_dim: int
    trainable: bool = True

    def encode(self, clips: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def parameters(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def set_parameters(self, params: dict[str, np.ndarray]) -> None:
        raise NotImplementedError


def _hash_feature(token: str, dim: int) -> tuple[int, float]:
    """Stable bucket index and sign for one token."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=9).digest()
    idx = int.from_bytes(digest[:8], "big") % dim
    sign = 1.0 if digest[8] & 1 else -1.0
    return idx, sign


class HashingTextEncoder(TextEncoder):
    """Feature-hashing sentence encoder: frozen, deterministic, attribute-sensitive.

    Unigrams and order-sensitive bigrams are hashed into ``output_dim``
    signed buckets; the result is L2-normalized.  Tokens listed in
    ``classname_vocab`` receive ``classname_weight`` instead of 1.0, making
    class names dominate the embedding the way clean label text dominates a
    sentence embedding.
    """

    backbone_name = "hashing"

    def __init__(
        self,
        output_dim: int = 256,
        classname_vocab: frozenset[str] | None = None,
        classname_weight: float = 6.0,
        bigram_weight: float = 0.5,
    ):
        if output_dim <= 0:
            raise ValueError("output_dim must be positive")
        self.output_dim = output_dim
        self.classname_vocab = frozenset(classname_vocab or ())
        self.classname_weight = classname_weight
        self.bigram_weight = bigram_weight

    @staticmethod
    def tokenize(text: str) -> list[str]:
        out, cur = [], []
        for ch in text.lower():
            if ch.isalnum():
                cur.append(ch)
            elif cur:
                out.append("".join(cur))
                cur = []
        if cur:
            out.append("".join(cur))
        return out

    def encode(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ValueError("cannot encode empty text")
        tokens = self.tokenize(text)
        if not tokens:
            raise ValueError(f"no tokens in text {text!r}")
        vec = np.zeros(self.output_dim, dtype=np.float64)
        for tok in tokens:
            idx, sign = _hash_feature(tok, self.output_dim)
            weight = self.classname_weight if tok in self.classname_vocab else 1.0
            vec[idx] += sign * weight
        for a, b in zip(tokens, tokens[1:]):
            idx, sign = _hash_feature(a + "\x1f" + b, self.output_dim)
            vec[idx] += sign * self.bigram_weight
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise ValueError(f"hashed embedding of {text!r} is all-zero")
        return vec / norm


class AffineAudioEncoder(AudioEncoder):
    """Single trainable affine layer standing in for a from-scratch backbone."""

    backbone_name = "affine"

    def __init__(self, input_dim: int, output_dim: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.output_dim = output_dim
        scale = 1.0 / np.sqrt(input_dim)
        self.weight = rng.normal(0.0, scale, size=(output_dim, input_dim))
        self.bias = np.zeros(output_dim, dtype=np.float64)

    def encode(self, clips: np.ndarray) -> np.ndarray:
        """Batch (N, input_dim) -> (N, output_dim); order-preserving."""
        clips = np.asarray(clips, dtype=np.float64)
        squeeze = clips.ndim == 1
        if squeeze:
            clips = clips[None, :]
        if clips.shape[1] != self.input_dim:
            raise DimensionError(
                f"expected clip features of dim {self.input_dim}, got {clips.shape[1]}"
            )
        out = clips @ self.weight.T + self.bias
        return out[0] if squeeze else out

    # numpy-trainer integration -------------------------------------------------
    def forward(self, clips: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = self.encode(clips)
        return out, np.asarray(clips, dtype=np.float64)

    def backward(self, cache: np.ndarray, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        return {"weight": grad_out.T @ cache, "bias": grad_out.sum(axis=0)}

    def parameters(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def set_parameters(self, params: dict[str, np.ndarray]) -> None:
        weight = np.asarray(params["weight"], dtype=np.float64)
        bias = np.asarray(params["bias"], dtype=np.float64)
        if weight.shape != (self.output_dim, self.input_dim) or bias.shape != (self.output_dim,):
            raise DimensionError("parameter shapes do not match encoder dims")
        self.weight = check_finite("weight", weight.copy())
        self.bias = check_finite("bias", bias.copy())


# Backbone registry --------------------------------------------------------------

_AUDIO_BACKBONES: dict[str, Callable[..., AudioEncoder]] = {}
_TEXT_BACKBONES: dict[str, Callable[..., TextEncoder]] = {}


def register_audio_backbone(name: str):
    def wrap(factory: Callable[..., AudioEncoder]):
        _AUDIO_BACKBONES[name] = factory
        return factory

    return wrap


def register_text_backbone(name: str):
    def wrap(factory: Callable[..., TextEncoder]):
        _TEXT_BACKBONES[name] = factory
        return factory

    return wrap


def create_audio_encoder(name: str, **kwargs) -> AudioEncoder:
    try:
        factory = _AUDIO_BACKBONES[name]
    except KeyError:
        raise UnknownBackboneError(name, list(_AUDIO_BACKBONES)) from None
    return factory(**kwargs)


def create_text_encoder(name: str, **kwargs) -> TextEncoder:
    try:
        factory = _TEXT_BACKBONES[name]
    except KeyError:
        raise UnknownBackboneError(name, list(_TEXT_BACKBONES)) from None
    return factory(**kwargs)


register_audio_backbone("affine")(AffineAudioEncoder)
register_text_backbone("hashing")(HashingTextEncoder)
