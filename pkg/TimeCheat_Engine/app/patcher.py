from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from app.errors import ConfigError
from app.models import ISMTSInstance, Observation


@dataclass(frozen=True)
class Patch:
    index: int
    start: float
    end: float
    observations: Tuple[Observation, ...]

    @property
    def width(self) -> float:
        return self.end - self.start

    def relative_time(self, time: float) -> float:
        return (time - self.start) / self.width


@dataclass(frozen=True)
class ReferenceGrid:
    tau: Tuple[float, ...]
    relative: Tuple[float, ...]

    @property
    def size(self) -> int:
        return len(self.tau)


# Boundaries p/P for p = 0..P.
def patch_boundaries(num_patches: int) -> np.ndarray:
    if num_patches < 1:
        raise ConfigError(f"number of patches must be >= 1, got {num_patches}")
    return np.arange(num_patches + 1, dtype=np.float64) / num_patches


# Index of the half-open patch holding ``time``; times at or past 1.0 fall in the last patch.
def patch_index(time: float, num_patches: int, boundaries: np.ndarray = None) -> int:
    if boundaries is None:
        boundaries = patch_boundaries(num_patches)
    index = int(np.searchsorted(boundaries, time, side="right")) - 1
    return min(max(index, 0), num_patches - 1)


def segment(instance: ISMTSInstance, num_patches: int) -> List[Patch]:
    """Assign every observation of a normalized instance to one of P equal patches."""
    boundaries = patch_boundaries(num_patches)
    buckets: List[List[Observation]] = [[] for _ in range(num_patches)]
    for obs in sorted(instance.observations, key=lambda o: (o.time, o.channel)):
        buckets[patch_index(obs.time, num_patches, boundaries)].append(obs)
    return [
        Patch(index=p, start=float(boundaries[p]), end=float(boundaries[p + 1]), observations=tuple(bucket))
        for p, bucket in enumerate(buckets)
    ]


def reference_grid(patch: Patch, num_points: int) -> ReferenceGrid:
    """K cell-centre timestamps inside the patch interval."""
    if num_points < 1:
        raise ConfigError(f"number of reference points must be >= 1, got {num_points}")
    relative = (np.arange(num_points, dtype=np.float64) + 0.5) / num_points
    tau = patch.start + relative * patch.width
    return ReferenceGrid(tau=tuple(float(t) for t in tau), relative=tuple(float(r) for r in relative))


def reference_grids(patches: Sequence[Patch], num_points: int) -> List[ReferenceGrid]:
    return [reference_grid(patch, num_points) for patch in patches]
