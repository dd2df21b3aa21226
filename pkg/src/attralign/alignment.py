"""Similarity functions, contrastive losses, and attribute sampling.

Two audio-text similarity routes are supported:

* bilinear: s = a^T W t, the ranking baseline's scorer;
* projected cosine: both embeddings pass through affine projection heads and
  are compared by cosine, the supervised-contrastive scorer.

Two losses pair with them:

* a weighted max-margin ranking loss: for each anchor, every different-label
  description within ``margin`` of the anchor's own description contributes
  a hinge term, and all of an anchor's terms share a harmonic rank weight
  H(r) = sum_{q<=r} 1/q where r is the number of margin violators — the
  batch-level estimate of the violated rank;
* a supervised-contrastive softmax loss: for anchor i with label l,
  L_i = (-1/N_l) * sum_{j: l_j = l} log softmax_j(sims[i]/tau), where N_l
  counts batch members sharing the label (the anchor's own description
  included).

Every loss ships with its analytic gradient with respect to the similarity
matrix, and the head/bilinear paths propagate those gradients through to
parameters and audio embeddings in closed form; finite-difference checks in
the test suite pin them down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .attributes import (
    AttributeKind,
    ClassDescription,
    DescriptionStore,
    canonical_sort,
    render_description,
)
from .encoders import TextEncoder, check_finite
from .errors import DimensionError


# Parameter blocks ----------------------------------------------------------------


@dataclass
class BilinearParams:
    """Weight matrix of the bilinear similarity, shape (audio_dim, text_dim)."""

    weight: np.ndarray

    @classmethod
    def init(cls, audio_dim: int, text_dim: int, rng: np.random.Generator) -> "BilinearParams":
        scale = 1.0 / np.sqrt(audio_dim)
        return cls(weight=rng.normal(0.0, scale, size=(audio_dim, text_dim)))

    def parameters(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight}


@dataclass
class ProjectionHeads:
    """Affine projections of the audio and text embeddings into a shared space."""

    audio_weight: np.ndarray
    audio_bias: np.ndarray
    text_weight: np.ndarray
    text_bias: np.ndarray
    use_bias: bool = True

    @property
    def proj_dim(self) -> int:
        return self.audio_weight.shape[0]

    @classmethod
    def init(
        cls,
        audio_dim: int,
        text_dim: int,
        proj_dim: int,
        rng: np.random.Generator,
        use_bias: bool = True,
    ) -> "ProjectionHeads":
        return cls(
            audio_weight=rng.normal(0.0, 1.0 / np.sqrt(audio_dim), size=(proj_dim, audio_dim)),
            audio_bias=np.zeros(proj_dim),
            text_weight=rng.normal(0.0, 1.0 / np.sqrt(text_dim), size=(proj_dim, text_dim)),
            text_bias=np.zeros(proj_dim),
            use_bias=use_bias,
        )

    def project_audio(self, a: np.ndarray) -> np.ndarray:
        out = np.asarray(a, dtype=np.float64) @ self.audio_weight.T
        return out + self.audio_bias if self.use_bias else out

    def project_text(self, t: np.ndarray) -> np.ndarray:
        out = np.asarray(t, dtype=np.float64) @ self.text_weight.T
        return out + self.text_bias if self.use_bias else out

    def parameters(self) -> dict[str, np.ndarray]:
        params = {"audio_weight": self.audio_weight, "text_weight": self.text_weight}
        if self.use_bias:
            params["audio_bias"] = self.audio_bias
            params["text_bias"] = self.text_bias
        return params


@dataclass(frozen=True)
class LossConfig:
    """Which loss to run and its scalar knobs."""

    kind: str = "supcon"  # "supcon" | "ranking"
    temperature: float = 0.07
    margin: float = 1.0

    def __post_init__(self):
        if self.kind not in ("supcon", "ranking"):
            raise ValueError(f"unknown loss kind '{self.kind}'")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")


@dataclass(frozen=True)
class SamplingStrategy:
    """How training-time descriptions pick their attributes.

    deterministic: all present kinds, canonical order.
    random: each present kind kept with probability p, resampled if empty.
    with_class: class name forced in, the rest kept with probability p.
    """

    kind: str = "with_class"  # "deterministic" | "random" | "with_class"
    inclusion_probability: float = 0.5

    def __post_init__(self):
        if self.kind not in ("deterministic", "random", "with_class"):
            raise ValueError(f"unknown sampling strategy '{self.kind}'")
        if not 0.0 < self.inclusion_probability <= 1.0:
            raise ValueError("inclusion_probability must lie in (0, 1]")


@dataclass
class AlignmentBatch:
    """One loss step's worth of (audio embedding, text embedding, label) triples."""

    audio_embeddings: np.ndarray  # (B, audio_dim)
    text_embeddings: np.ndarray  # (B, text_dim)
    labels: tuple[str, ...]

    def __post_init__(self):
        b = len(self.labels)
        if b < 2:
            raise ValueError("a batch needs at least 2 samples")
        if self.audio_embeddings.shape[0] != b or self.text_embeddings.shape[0] != b:
            raise ValueError("embedding row counts must match the label count")

    @property
    def size(self) -> int:
        return len(self.labels)


# Similarities --------------------------------------------------------------------


def bilinear_similarity(a: np.ndarray, t: np.ndarray, params: BilinearParams) -> float:
    """s = a^T W t; unbounded real."""
    a = np.asarray(a, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if a.shape != (params.weight.shape[0],) or t.shape != (params.weight.shape[1],):
        raise DimensionError(
            f"bilinear expects dims {params.weight.shape}, got {a.shape[0]}x{t.shape[0]}"
        )
    return float(a @ params.weight @ t)


def bilinear_similarity_matrix(
    audio: np.ndarray, text: np.ndarray, params: BilinearParams
) -> np.ndarray:
    """All-pairs bilinear scores, shape (B_a, B_t)."""
    if audio.shape[1] != params.weight.shape[0] or text.shape[1] != params.weight.shape[1]:
        raise DimensionError("embedding dims do not match the bilinear weight shape")
    return audio @ params.weight @ text.T


def _normalize_rows(x: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise ValueError(f"zero-norm {what} vector cannot enter a cosine")
    return x / norms[:, None], norms


def cosine_similarity_projected(
    a: np.ndarray, t: np.ndarray, heads: ProjectionHeads
) -> float:
    """Cosine of the two projected embeddings; always in [-1, 1]."""
    ap = heads.project_audio(np.atleast_2d(a))
    tp = heads.project_text(np.atleast_2d(t))
    ap_hat, _ = _normalize_rows(ap, "projected audio")
    tp_hat, _ = _normalize_rows(tp, "projected text")
    return float(ap_hat[0] @ tp_hat[0])


def cosine_similarity_matrix(
    audio: np.ndarray, text: np.ndarray, heads: ProjectionHeads
) -> np.ndarray:
    """All-pairs projected cosine, shape (B_a, B_t)."""
    ap_hat, _ = _normalize_rows(heads.project_audio(audio), "projected audio")
    tp_hat, _ = _normalize_rows(heads.project_text(text), "projected text")
    return ap_hat @ tp_hat.T


# Losses ----------------------------------------------------------------------------


def _label_match_matrix(labels: Sequence[str]) -> np.ndarray:
    arr = np.asarray(list(labels), dtype=object)
    return (arr[:, None] == arr[None, :]).astype(np.float64)


def supcon_loss_and_grad(
    sims: np.ndarray, labels: Sequence[str], temperature: float
) -> tuple[float, np.ndarray]:
    """Supervised-contrastive loss and its gradient w.r.t. the sims matrix.

    loss = sum_i (-1/N_i) sum_{j: l_j = l_i} [ s_ij/tau - logsumexp_k(s_ik/tau) ]
    dloss/ds_ik = (P_ik - Y_ik / N_i) / tau, with P the row softmax of s/tau
    and Y the same-label indicator (diagonal included).
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    sims = check_finite("sims", np.asarray(sims, dtype=np.float64))
    b = sims.shape[0]
    if sims.shape != (b, b) or len(labels) != b:
        raise DimensionError("sims must be BxB aligned with labels")
    same = _label_match_matrix(labels)
    counts = same.sum(axis=1)  # N_{l_i} >= 1 (self always matches)

    logits = sims / temperature
    logits = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(logits)
    denom = exp.sum(axis=1, keepdims=True)
    log_prob = logits - np.log(denom)
    probs = exp / denom

    loss = float(-(same * log_prob).sum(axis=1).dot(1.0 / counts))
    grad = (probs - same / counts[:, None]) / temperature
    return loss, grad


def supcon_loss(sims: np.ndarray, labels: Sequence[str], config: LossConfig) -> float:
    loss, _ = supcon_loss_and_grad(sims, labels, config.temperature)
    return loss


def rank_weight(rank: int) -> float:
    """Harmonic weight H(r) = sum_{q=1}^{r} 1/q; H(0) = 0."""
    return sum(1.0 / q for q in range(1, rank + 1))


def ranking_loss_and_grad(
    sims: np.ndarray, labels: Sequence[str], margin: float
) -> tuple[float, np.ndarray]:
    """Weighted max-margin ranking loss and gradient w.r.t. the sims matrix.

    Per anchor i the violators are the different-label columns j with
    margin - s_ii + s_ij > 0; their hinge terms share the harmonic weight of
    the violator count, and the result is averaged over anchors.  The rank
    weight is treated as locally constant for the gradient (it is piecewise
    constant in the sims).
    """
    sims = check_finite("sims", np.asarray(sims, dtype=np.float64))
    b = sims.shape[0]
    if sims.shape != (b, b) or len(labels) != b:
        raise DimensionError("sims must be BxB aligned with labels")
    same = _label_match_matrix(labels).astype(bool)
    grad = np.zeros_like(sims)
    total = 0.0
    for i in range(b):
        neg = ~same[i]
        if not neg.any():
            continue
        violations = margin - sims[i, i] + sims[i, neg]
        violating = violations > 0.0
        r = int(violating.sum())
        if r == 0:
            continue
        w = rank_weight(r)
        total += w * float(violations[violating].sum())
        neg_idx = np.flatnonzero(neg)[violating]
        grad[i, neg_idx] += w
        grad[i, i] -= w * r
    return total / b, grad / b


def ranking_loss(sims: np.ndarray, labels: Sequence[str], config: LossConfig) -> float:
    loss, _ = ranking_loss_and_grad(sims, labels, config.margin)
    return loss


# Backprop through the two similarity routes ---------------------------------------


def supcon_forward_backward(
    audio: np.ndarray,
    text: np.ndarray,
    labels: Sequence[str],
    heads: ProjectionHeads,
    temperature: float,
) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Loss, head-parameter gradients, and d(loss)/d(audio embeddings).

    Forward: U = A Wa^T + ba, V = T Wt^T + bt, S = cos(U, V) row/col-wise.
    Backward through the cosine:
        dS/dU_i = (V_hat_j - s_ij U_hat_i) / ||U_i||  summed with dL/dS.
    """
    audio = np.asarray(audio, dtype=np.float64)
    text = np.asarray(text, dtype=np.float64)
    u = heads.project_audio(audio)
    v = heads.project_text(text)
    u_hat, u_norm = _normalize_rows(u, "projected audio")
    v_hat, v_norm = _normalize_rows(v, "projected text")
    sims = u_hat @ v_hat.T
    loss, g = supcon_loss_and_grad(sims, labels, temperature)

    du = (g @ v_hat - (g * sims).sum(axis=1, keepdims=True) * u_hat) / u_norm[:, None]
    dv = (g.T @ u_hat - (g * sims).sum(axis=0)[:, None] * v_hat) / v_norm[:, None]

    grads = {
        "audio_weight": du.T @ audio,
        "audio_bias": du.sum(axis=0),
        "text_weight": dv.T @ text,
        "text_bias": dv.sum(axis=0),
    }
    d_audio = du @ heads.audio_weight
    return loss, grads, d_audio


def ranking_forward_backward(
    audio: np.ndarray,
    text: np.ndarray,
    labels: Sequence[str],
    params: BilinearParams,
    margin: float,
) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Loss, bilinear-weight gradient, and d(loss)/d(audio embeddings)."""
    audio = np.asarray(audio, dtype=np.float64)
    text = np.asarray(text, dtype=np.float64)
    sims = bilinear_similarity_matrix(audio, text, params)
    loss, g = ranking_loss_and_grad(sims, labels, margin)
    grads = {"weight": audio.T @ g @ text}
    d_audio = g @ text @ params.weight.T
    return loss, grads, d_audio


# Attribute sampling ----------------------------------------------------------------


def sample_attributes(
    desc: ClassDescription,
    strategy: SamplingStrategy,
    rng: np.random.Generator,
) -> tuple[AttributeKind, ...]:
    """Choose which attributes form a training-time description.

    Output is always in canonical order and never empty: the random strategy
    resamples on an empty draw, and with_class always contains the class
    name.
    """
    present = desc.present_kinds()
    if strategy.kind == "deterministic":
        return present
    p = strategy.inclusion_probability
    if strategy.kind == "with_class":
        others = [k for k in present if k is not AttributeKind.CLASS_NAME]
        kept = [k for k in others if rng.random() < p]
        return canonical_sort([AttributeKind.CLASS_NAME, *kept])
    # random: independent keeps, conditioned on a non-empty outcome
    while True:
        kept = [k for k in present if rng.random() < p]
        if kept:
            return canonical_sort(kept)


def encode_batch_descriptions(
    labels: Sequence[str],
    store: DescriptionStore,
    strategy: SamplingStrategy,
    text_encoder: TextEncoder,
    rng: np.random.Generator,
    subset: Iterable[AttributeKind] | None = None,
    cache: dict | None = None,
) -> np.ndarray:
    """Sample, render, and encode one description per batch label.

    Draws are independent per sample, so equal labels may receive different
    texts under the stochastic strategies.  ``subset`` restricts the
    attribute pool before sampling (the class name is always kept), and
    ``cache`` memoizes encodings per (label, kinds) pair — safe because the
    text encoder is frozen and deterministic.
    """
    rows = []
    subset = tuple(subset) if subset is not None else None
    for label in labels:
        desc = store.get(label)
        if subset is not None:
            desc = desc.restricted(subset)
        kinds = sample_attributes(desc, strategy, rng)
        key = (label, kinds)
        if cache is not None and key in cache:
            rows.append(cache[key])
            continue
        embedding = text_encoder.encode(render_description(desc, kinds))
        if cache is not None:
            cache[key] = embedding
        rows.append(embedding)
    return np.stack(rows)
