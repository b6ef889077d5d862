"""Multi-modal embedding fusion.

KB entries are indexed by the plain concatenation of their image and text
embeddings; queries use the same layout with an ``alpha`` weight on the visual
block and ``1 - alpha`` on the text block. Embeddings are 1-D float64 numpy
arrays throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Tuned modality weights per dataset profile.
ALPHA_EVQA = 0.59
ALPHA_INFOSEEK = 0.63


class ZeroNormError(ValueError):
    """Raised when a vector with zero L2 norm reaches an operation that needs a direction."""


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = ALPHA_EVQA
    d_vis: int = 64
    d_text: int = 64
    per_modality_normalize: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.d_vis < 1 or self.d_text < 1:
            raise ValueError("d_vis and d_text must be positive")

    @property
    def dim(self) -> int:
        return self.d_vis + self.d_text


def as_vector(values, dim: int | None = None) -> np.ndarray:
    """Coerce ``values`` into a finite 1-D float64 array, optionally checking its length."""
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1 or vec.shape[0] == 0:
        raise ValueError("embedding must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(vec)):
        raise ValueError("embedding contains non-finite values")
    if dim is not None and vec.shape[0] != dim:
        raise ValueError(f"dimension mismatch: expected {dim}, got {vec.shape[0]}")
    return vec


def _unit(vec: np.ndarray, what: str) -> np.ndarray:
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        raise ZeroNormError(f"{what} embedding has zero norm")
    return vec / norm


def _blocks(img_emb, txt_emb, cfg: FusionConfig) -> tuple[np.ndarray, np.ndarray]:
    img = as_vector(img_emb, cfg.d_vis)
    txt = as_vector(txt_emb, cfg.d_text)
    if cfg.per_modality_normalize:
        img = _unit(img, "image")
        txt = _unit(txt, "text")
    return img, txt


def build_kb_vector(img_emb, txt_emb, cfg: FusionConfig) -> np.ndarray:
    """Concatenate image and text embeddings into an (unweighted) index vector."""
    img, txt = _blocks(img_emb, txt_emb, cfg)
    return np.concatenate([img, txt])


def build_query_vector(img_emb, txt_emb, cfg: FusionConfig) -> np.ndarray:
    """Concatenate ``alpha * image`` and ``(1 - alpha) * text`` into a query vector.

    Normalization (when enabled) happens before weighting, so with alpha=1 the
    text block is exactly zero and retrieval reduces to visual-only cosine.
    """
    img, txt = _blocks(img_emb, txt_emb, cfg)
    return np.concatenate([cfg.alpha * img, (1.0 - cfg.alpha) * txt])


def cosine_similarity(a, b) -> float:
    a = as_vector(a)
    b = as_vector(b, a.shape[0])
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine similarity is undefined for a zero vector")
    value = float(np.dot(a, b) / (na * nb))
    # rounding can push |value| a hair above 1
    return min(1.0, max(-1.0, value))
