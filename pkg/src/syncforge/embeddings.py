"""Time-indexed unit-norm embedding sequences, one per modality per video."""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput


@dataclass(frozen=True)
class EmbeddingSequence:
    vectors: np.ndarray      # (T, D), rows unit-norm
    video_id: str = ""
    modality: str = ""

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise InvalidInput(f"expected a (T, D) array, got shape {v.shape}")
        norms = np.linalg.norm(v, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise InvalidInput("rows must be unit-norm; use from_array to normalize")
        object.__setattr__(self, "vectors", v)

    @classmethod
    def from_array(cls, arr, video_id: str = "", modality: str = ""):
        """Row-normalize arr and wrap it; zero rows are rejected."""
        v = np.asarray(arr, dtype=np.float64)
        if v.ndim != 2:
            raise InvalidInput(f"expected a (T, D) array, got shape {v.shape}")
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise InvalidInput("cannot normalize a zero embedding row")
        return cls(vectors=v / norms, video_id=video_id, modality=modality)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]
