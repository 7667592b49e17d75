"""Timestamped pose sequences."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import InvalidInputError
from .pointcloud import RigidTransform


@dataclass(frozen=True)
class Trajectory:
    timestamps: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray

    def __post_init__(self):
        t = np.array(self.timestamps, dtype=float).reshape(-1)
        R = np.array(self.rotations, dtype=float).reshape(-1, 3, 3)
        p = np.array(self.translations, dtype=float).reshape(-1, 3)
        if not (len(t) == len(R) == len(p)):
            raise InvalidInputError("timestamps, rotations and translations must align")
        if np.any(np.diff(t) <= 0):
            raise InvalidInputError("trajectory timestamps must be strictly increasing")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(R)) and np.all(np.isfinite(p))):
            raise InvalidInputError("trajectory entries must be finite")
        for a in (t, R, p):
            a.setflags(write=False)
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "rotations", R)
        object.__setattr__(self, "translations", p)

    @classmethod
    def from_poses(cls, samples: Iterable[tuple[float, RigidTransform]]) -> "Trajectory":
        samples = list(samples)
        return cls(
            [s for s, _ in samples],
            np.array([T.rotation for _, T in samples]).reshape(-1, 3, 3),
            np.array([T.translation for _, T in samples]).reshape(-1, 3),
        )

    def __len__(self):
        return len(self.timestamps)

    def pose(self, i: int) -> RigidTransform:
        return RigidTransform(self.rotations[i], self.translations[i])

    def poses(self):
        return [self.pose(i) for i in range(len(self))]

    def subset(self, idx) -> "Trajectory":
        return Trajectory(self.timestamps[idx], self.rotations[idx], self.translations[idx])

    def transformed(self, T: RigidTransform) -> "Trajectory":
        """Left-multiply every pose by ``T``."""
        return Trajectory(
            self.timestamps,
            np.einsum("ij,njk->nik", T.rotation, self.rotations),
            self.translations @ T.rotation.T + T.translation,
        )

    def path_length(self) -> np.ndarray:
        """Cumulative distance along the positions, starting at zero."""
        steps = np.linalg.norm(np.diff(self.translations, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])
