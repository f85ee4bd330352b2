"""Query points seeding the tracker."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class QuerySet:
    """Ordered cell ids with their (x, y) pixel locations at one frame."""

    ids: np.ndarray
    xy: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        if ids.shape[0] != xy.shape[0]:
            raise ValueError(f"{ids.shape[0]} ids for {xy.shape[0]} points")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("query ids must be unique")
        if not np.all(np.isfinite(xy)):
            raise ValueError("query locations must be finite")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "xy", xy)

    def __len__(self) -> int:
        return len(self.ids)

    def concat(self, other: "QuerySet") -> "QuerySet":
        return QuerySet(np.concatenate([self.ids, other.ids]), np.concatenate([self.xy, other.xy]))
