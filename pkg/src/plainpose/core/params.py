from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import Tensor


@dataclass
class Entry:
    tensor: Tensor
    group: str
    trainable: bool = True
    buffer: bool = False


class ParamStore:
    """Insertion-ordered name -> tensor map with trainable flags and submodule labels.

    ``group`` labels the submodule a tensor belongs to (``embed``, ``mhsa``,
    ``ffn``, ``norm``, ``head``, ...); freeze masks key off it. Buffers (batch
    norm running statistics) live here so checkpoints carry them, but never
    count as parameters and never receive gradients.
    """

    def __init__(self):
        self._entries: dict[str, Entry] = {}

    def add(self, name: str, value, group: str, trainable: bool = True, buffer: bool = False) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.name = name
        t.requires_grad = trainable and not buffer
        self._entries[name] = Entry(t, group, trainable and not buffer, buffer)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def entry(self, name: str) -> Entry:
        return self._entries[name]

    def items(self):
        return ((k, e.tensor) for k, e in self._entries.items())

    def entries(self):
        return self._entries.items()

    def params(self):
        """(name, tensor) for every non-buffer entry."""
        return ((k, e.tensor) for k, e in self._entries.items() if not e.buffer)

    def trainable(self):
        return ((k, e.tensor) for k, e in self._entries.items() if e.trainable)

    def set_trainable(self, name: str, flag: bool) -> None:
        e = self._entries[name]
        if e.buffer:
            return
        e.trainable = flag
        e.tensor.requires_grad = flag

    def num_params(self, trainable_only: bool = False) -> int:
        return sum(
            e.tensor.size
            for e in self._entries.values()
            if not e.buffer and (e.trainable or not trainable_only)
        )

    def zero_grad(self) -> None:
        for e in self._entries.values():
            e.tensor.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: e.tensor.data.copy() for k, e in self._entries.items()}

    def astype(self, dtype) -> None:
        for e in self._entries.values():
            e.tensor.data = e.tensor.data.astype(dtype)
