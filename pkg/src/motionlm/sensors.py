"""Sparse 6-DoF sensor streams and per-frame video embedding tracks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, ShapeMismatch

POINT_WIDTH = 18  # position 3, velocity 3, rotation 6D, angular velocity 6D
SENSOR_POINTS = {"three_points": ("head", "l_wrist", "r_wrist"), "one_point": ("head",)}


@dataclass
class SensorStream:
    kind: str
    features: np.ndarray  # (T, 18 * points)

    def __post_init__(self):
        if self.kind not in SENSOR_POINTS:
            raise ValueError(f"unknown sensor kind {self.kind!r}")
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[1] != self.width:
            raise ShapeMismatch(f"{self.kind} stream needs width {self.width}, got {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise ValueError("non-finite sensor features")

    @property
    def width(self) -> int:
        return POINT_WIDTH * len(SENSOR_POINTS[self.kind])

    @property
    def T(self) -> int:
        return self.features.shape[0]

    def __len__(self):
        return self.T

    def slice(self, start: int, stop: int) -> "SensorStream":
        return SensorStream(self.kind, self.features[start:stop])

    def localized(self) -> np.ndarray:
        """Positions relative to the first frame's head position (height unknown to the model)."""
        f = self.features.copy()
        origin = f[0, 0:3].copy()
        for p in range(len(SENSOR_POINTS[self.kind])):
            f[:, p * POINT_WIDTH:p * POINT_WIDTH + 3] -= origin
        return f

    def to_one_point(self) -> "SensorStream":
        return SensorStream("one_point", self.features[:, :POINT_WIDTH])


@dataclass
class VideoEmbeddingTrack:
    """Precomputed per-frame image embeddings, one per ``r`` motion frames."""

    embeddings: np.ndarray  # (T_v, E)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        if self.embeddings.ndim != 2:
            raise DimMismatch("video embeddings must be (frames, dim)")
        if not np.isfinite(self.embeddings).all():
            raise ValueError("non-finite video embeddings")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self):
        return self.embeddings.shape[0]

    def slice(self, start: int, stop: int) -> "VideoEmbeddingTrack":
        return VideoEmbeddingTrack(self.embeddings[start:stop])
