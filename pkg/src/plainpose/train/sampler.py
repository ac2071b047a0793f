from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping, Sized

import numpy as np


class EmptyDatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Batch:
    step: int
    items: tuple[tuple[str, int], ...]  # (dataset_id, index) pairs

    def by_dataset(self) -> dict[str, list[int]]:
        """Indices grouped per dataset, in first-appearance order."""
        out: dict[str, list[int]] = {}
        for ds, i in self.items:
            out.setdefault(ds, []).append(i)
        return out


class MultiDatasetSampler:
    """Instance-level sampling over the union of several datasets.

    Each epoch is one permutation of all instances, so a dataset's share of
    draws equals its share of instances. Batch ``s`` is a pure function of
    ``(seed, s)``, which is what makes resumed runs reproduce exactly.
    """

    def __init__(self, datasets: Mapping[str, Sized | int], batch_size: int, seed: int = 0):
        if not datasets:
            raise EmptyDatasetError("need at least one dataset")
        self.ids = list(datasets)
        self.sizes = [d if isinstance(d, int) else len(d) for d in datasets.values()]
        empty = [k for k, n in zip(self.ids, self.sizes) if n <= 0]
        if empty:
            raise EmptyDatasetError(f"empty dataset(s): {empty}")
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.batch_size = batch_size
        self.seed = seed
        self.total = sum(self.sizes)
        self._offsets = np.cumsum([0] + self.sizes)
        self._perm_epoch = -1
        self._perm = None

    def _permutation(self, epoch: int) -> np.ndarray:
        if epoch != self._perm_epoch:
            self._perm = np.random.default_rng([self.seed, epoch, 0x5A]).permutation(self.total)
            self._perm_epoch = epoch
        return self._perm

    def _locate(self, flat: int) -> tuple[str, int]:
        d = int(np.searchsorted(self._offsets, flat, side="right")) - 1
        return self.ids[d], int(flat - self._offsets[d])

    def batch(self, step: int) -> Batch:
        start = step * self.batch_size
        items = []
        for pos in range(start, start + self.batch_size):
            epoch, off = divmod(pos, self.total)
            items.append(self._locate(int(self._permutation(epoch)[off])))
        return Batch(step, tuple(items))

    def __iter__(self) -> Iterator[Batch]:
        step = 0
        while True:
            yield self.batch(step)
            step += 1


def multi_dataset_sampler(datasets: Mapping[str, Sized | int], batch_size: int, seed: int = 0) -> Iterator[Batch]:
    return iter(MultiDatasetSampler(datasets, batch_size, seed))
