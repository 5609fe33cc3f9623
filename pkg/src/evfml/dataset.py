"""Snapshot dataset container shared by the simulators and the manifold code."""

from dataclasses import dataclass, field

import numpy as np

__all__ = ["Dataset"]


@dataclass
class Dataset:
    """M x N snapshot matrix with one scalar provenance tag per row."""

    X: np.ndarray
    tags: np.ndarray = field(default=None)
    tag_name: str = "tag"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2:
            raise ValueError("X must be a 2-D matrix")
        if self.tags is None:
            self.tags = np.zeros(self.X.shape[0])
        self.tags = np.asarray(self.tags, dtype=float)
        if self.tags.shape != (self.X.shape[0],):
            raise ValueError("need exactly one tag per row")

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def n_cols(self) -> int:
        return self.X.shape[1]
