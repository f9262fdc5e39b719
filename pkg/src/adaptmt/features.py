"""Context features for source test cases.

The built-in extractor yields 88 values in [0, 1]: an 8x8 area-averaged
grayscale thumbnail followed by an 8-bin histogram per RGB channel.
Externally computed vectors (e.g. CNN embeddings) come from a sidecar CSV
whose header reads ``id,n=<dimension>``.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .images import RasterImage

THUMB = 8
BINS = 8
BUILTIN_DIM = THUMB * THUMB + 3 * BINS

_LUMA = np.array([0.299, 0.587, 0.114])


class FeatureError(ValueError):
    pass


def _area_weights(size: int, cells: int) -> np.ndarray:
    """(cells, size) matrix averaging pixel spans of width size/cells."""
    weights = np.zeros((cells, size))
    span = size / cells
    for c in range(cells):
        lo, hi = c * span, (c + 1) * span
        for p in range(int(math.floor(lo)), min(size, int(math.ceil(hi)))):
            weights[c, p] = min(hi, p + 1) - max(lo, p)
    return weights / weights.sum(axis=1, keepdims=True)


def extract_builtin(image: RasterImage) -> np.ndarray:
    px = image.pixels.astype(np.float64)
    gray = (px @ _LUMA) / 255.0
    thumb = _area_weights(image.height, THUMB) @ gray @ _area_weights(image.width, THUMB).T
    total = image.width * image.height
    hists = [
        np.bincount((image.pixels[..., ch] // (256 // BINS)).ravel(), minlength=BINS) / total
        for ch in range(3)
    ]
    return np.concatenate([np.clip(thumb.ravel(), 0.0, 1.0), *hists])


@dataclass(frozen=True)
class FeatureSpec:
    source: str = "builtin"
    path: str | None = None

    def __post_init__(self):
        if self.source not in ("builtin", "sidecar"):
            raise FeatureError(f"unknown feature source {self.source!r}")
        if self.source == "sidecar" and not self.path:
            raise FeatureError("sidecar features need a path")

    @classmethod
    def from_dict(cls, data: dict | None, base_dir: str = ".") -> "FeatureSpec":
        data = dict(data or {})
        path = data.get("path")
        if path is not None:
            path = os.path.join(base_dir, path)
        return cls(data.get("source", "builtin"), path)


class Sidecar:
    """Validated in-memory view of a sidecar feature file."""

    def __init__(self, path: str | os.PathLike):
        self.path = str(path)
        self.vectors: dict[str, np.ndarray] = {}
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise FeatureError(f"{path}: empty sidecar file") from None
            if len(header) != 2 or header[0].strip() != "id" or not header[1].strip().startswith("n="):
                raise FeatureError(f"{path}: header must read 'id,n=<dimension>'")
            try:
                self.dimension = int(header[1].strip()[2:])
            except ValueError:
                raise FeatureError(f"{path}: bad dimension in header {header[1]!r}") from None
            if self.dimension < 1:
                raise FeatureError(f"{path}: dimension must be positive")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                sid, values = row[0].strip(), row[1:]
                if len(values) != self.dimension:
                    raise FeatureError(
                        f"{path}:{lineno}: {sid!r} has {len(values)} values, expected {self.dimension}")
                if sid in self.vectors:
                    raise FeatureError(f"{path}:{lineno}: duplicate id {sid!r}")
                try:
                    vec = np.array([float(v) for v in values])
                except ValueError as exc:
                    raise FeatureError(f"{path}:{lineno}: {exc}") from None
                if not np.all(np.isfinite(vec)):
                    raise FeatureError(f"{path}:{lineno}: non-finite value for {sid!r}")
                self.vectors[sid] = vec

    def require(self, ids) -> None:
        missing = [i for i in ids if i not in self.vectors]
        if missing:
            raise FeatureError(f"{self.path}: no features for {len(missing)} source(s), e.g. {missing[:3]}")

    def __getitem__(self, source_id: str) -> np.ndarray:
        try:
            return self.vectors[source_id]
        except KeyError:
            raise FeatureError(f"{self.path}: no features for {source_id!r}") from None


def load_sidecar(path, source_id: str) -> np.ndarray:
    return Sidecar(path)[source_id]


class FeatureExtractor:
    """Context vectors for a campaign's sources, cached per source id."""

    def __init__(self, spec: FeatureSpec):
        self.spec = spec
        self.sidecar = Sidecar(spec.path) if spec.source == "sidecar" else None
        self._cache: dict[str, np.ndarray] = {}

    @property
    def dimension(self) -> int:
        return self.sidecar.dimension if self.sidecar else BUILTIN_DIM

    def validate(self, ids) -> None:
        if self.sidecar:
            self.sidecar.require(ids)

    def context(self, source_id: str, load_image) -> np.ndarray:
        vec = self._cache.get(source_id)
        if vec is None:
            vec = self.sidecar[source_id] if self.sidecar else extract_builtin(load_image())
            self._cache[source_id] = vec
        return vec
