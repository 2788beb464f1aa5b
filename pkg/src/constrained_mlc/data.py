"""Tabular datasets with train/validation/test splits."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rules import ClassTable


@dataclass
class TabularDataset:
    X: np.ndarray
    Y: np.ndarray
    classes: ClassTable
    train_idx: np.ndarray
    test_idx: np.ndarray
    val_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.int8)
        n = self.X.shape[0]
        if self.X.ndim != 2 or self.Y.ndim != 2 or self.Y.shape[0] != n:
            raise ValueError("features and labels must be 2-D with matching rows")
        if self.Y.shape[1] != len(self.classes):
            raise ValueError("label columns must match the class table")
        parts = [np.asarray(p, dtype=np.intp) for p in (self.train_idx, self.val_idx, self.test_idx)]
        self.train_idx, self.val_idx, self.test_idx = parts
        joined = np.concatenate(parts)
        if joined.size != n or not np.array_equal(np.sort(joined), np.arange(n)):
            raise ValueError("splits must be disjoint and cover every row")

    @property
    def num_features(self) -> int:
        return self.X.shape[1]

    @property
    def num_classes(self) -> int:
        return self.Y.shape[1]

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[name]
        return self.X[idx], self.Y[idx]

    def train_and_val(self) -> tuple[np.ndarray, np.ndarray]:
        idx = np.concatenate([self.train_idx, self.val_idx])
        return self.X[idx], self.Y[idx]
