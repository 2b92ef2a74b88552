"""Face-side trial scoring over precomputed face embeddings.

Detection and embedding networks are external; this module selects enrollment
frames, gates detections by overlap with the annotated boxes and aggregates
pairwise cosine similarities between two templates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, MissingScoreError


class EnrollmentFailure(MissingScoreError):
    """No detection survived gating, so the trial has no enrollment template."""


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ContractError(f"bounding box needs positive size, got {self.w}x{self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class MatchPolicy:
    mode: str = "top_k"
    k: int = 10
    p: float = 0.20
    iou_threshold: float = 0.5

    def __post_init__(self):
        if self.mode not in ("top_k", "top_percent"):
            raise ConfigError(f"unknown match mode {self.mode!r}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 0 < self.p <= 1:
            raise ConfigError("p must be in (0, 1]")
        if not 0 <= self.iou_threshold <= 1:
            raise ConfigError("iou_threshold must be in [0, 1]")


@dataclass
class FaceTemplate:
    embeddings: np.ndarray
    frame_ids: list = field(default_factory=list)

    def __post_init__(self):
        E = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        if E.shape[0] < 1 or E.size == 0:
            raise MissingScoreError("face template is empty")
        if not np.all(np.isfinite(E)):
            raise ContractError("face embeddings contain NaN or Inf")
        norms = np.linalg.norm(E, axis=1)
        if np.any(norms == 0):
            raise ContractError("face embedding with zero norm")
        off = np.abs(norms - 1.0) > 1e-6
        if np.any(off):
            E = E.copy()
            E[off] /= norms[off, None]
        self.embeddings = E
        if not self.frame_ids:
            self.frame_ids = list(range(E.shape[0]))

    def __len__(self):
        return self.embeddings.shape[0]


def iou(a: BoundingBox, b: BoundingBox) -> float:
    if a == b:
        return 1.0
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    # edge arithmetic can push the ratio a rounding error past 1
    return min(1.0, inter / (a.area + b.area - inter))


def select_enroll_frames(given_frames, num_frames: int | None = None, radius: int = 2) -> list:
    """Given annotated frames plus ``radius`` neighbours each side, clipped and sorted."""
    selected = set()
    for g in given_frames:
        if g < 0:
            raise ContractError(f"frame index must be >= 0, got {g}")
        lo = max(0, g - radius)
        hi = g + radius if num_frames is None else min(num_frames - 1, g + radius)
        selected.update(range(lo, hi + 1))
    return sorted(selected)


def sample_test_frames(duration: float, rate: float = 1.0) -> list:
    """Timestamps (seconds) at ``rate`` frames per second strictly below ``duration``."""
    if duration < 0:
        raise ContractError("duration must be >= 0")
    count = math.ceil(duration * rate)
    return [i / rate for i in range(count)]


def gate_detections(detections, given, threshold: float = 0.5) -> FaceTemplate:
    """Keep detections whose best IoU with any given box exceeds ``threshold``.

    ``detections`` is a sequence of ``(BoundingBox, embedding)`` or
    ``(BoundingBox, embedding, frame_id)``.
    """
    kept, frames = [], []
    for i, det in enumerate(detections):
        box, emb = det[0], det[1]
        frame = det[2] if len(det) > 2 else i
        if given and max(iou(box, g) for g in given) > threshold:
            kept.append(np.asarray(emb, dtype=np.float64))
            frames.append(frame)
    if not kept:
        raise EnrollmentFailure("no detection overlaps the given boxes above threshold")
    return FaceTemplate(np.vstack(kept), frames)


def cosine_matrix(enroll: FaceTemplate, test: FaceTemplate) -> np.ndarray:
    return np.clip(enroll.embeddings @ test.embeddings.T, -1.0, 1.0)


def template_score(enroll: FaceTemplate, test: FaceTemplate, policy: MatchPolicy | None = None) -> float:
    """Average of the best pairwise cosine similarities between two templates.

    ``top_k`` averages the ``min(k, N*M)`` highest pairs, ``top_percent`` the
    ``max(1, ceil(p*N*M))`` highest. Ties are broken by (enroll row, test row).
    """
    policy = policy or MatchPolicy()
    if len(enroll) == 0 or len(test) == 0:
        raise MissingScoreError("cannot score an empty template")
    sims = cosine_matrix(enroll, test)
    n_pairs = sims.size
    if policy.mode == "top_k":
        count = min(policy.k, n_pairs)
    else:
        # round before ceil so that p * N * M landing on an integer is not bumped up
        count = max(1, math.ceil(round(policy.p * n_pairs, 9)))
    rows, cols = np.indices(sims.shape)
    order = np.lexsort((cols.ravel(), rows.ravel(), -sims.ravel()))
    top = sims.ravel()[order[:count]]
    return float(np.clip(np.sum(top) / count, -1.0, 1.0))
