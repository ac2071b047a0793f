"""Keypoint dataset schemas shipped as JSON data files."""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

_BUILTIN = ("coco", "aic", "mpii")


@dataclass(frozen=True)
class Schema:
    name: str
    num_keypoints: int
    keypoints: tuple[str, ...]
    sigmas: tuple[float, ...] | None = None
    head_joints: tuple[int, int] | None = None
    flip_pairs: tuple[tuple[int, int], ...] = ()
    skeleton: tuple[tuple[int, int], ...] = field(default=())

    @property
    def sigma_array(self) -> np.ndarray:
        if self.sigmas is None:
            raise ValueError(f"schema {self.name!r} has no OKS sigmas")
        return np.asarray(self.sigmas, dtype=np.float64)


def schema_from_dict(d: dict) -> Schema:
    nk = int(d["num_keypoints"])
    names = tuple(d["keypoints"])
    if len(names) != nk:
        raise ValueError(f"schema {d.get('name')}: {len(names)} names for {nk} keypoints")
    sigmas = d.get("sigmas")
    if sigmas is not None and len(sigmas) != nk:
        raise ValueError(f"schema {d.get('name')}: {len(sigmas)} sigmas for {nk} keypoints")
    head = d.get("head_joints")
    return Schema(
        name=d["name"],
        num_keypoints=nk,
        keypoints=names,
        sigmas=tuple(float(s) for s in sigmas) if sigmas is not None else None,
        head_joints=tuple(head) if head is not None else None,
        flip_pairs=tuple(tuple(p) for p in d.get("flip_pairs", ())),
        skeleton=tuple(tuple(p) for p in d.get("skeleton", ())),
    )


def schema_names() -> tuple[str, ...]:
    return _BUILTIN


@functools.lru_cache(maxsize=None)
def load_schema(name_or_path: str) -> Schema:
    """Built-in schema by name (``coco``, ``aic``, ``mpii``) or a JSON file path."""
    if name_or_path in _BUILTIN:
        text = resources.files("plainpose").joinpath("data", f"{name_or_path}.json").read_text()
    else:
        text = Path(name_or_path).read_text()
    return schema_from_dict(json.loads(text))
