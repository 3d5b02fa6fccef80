"""Slide bags: patch and cell instances of one whole-slide image."""

from dataclasses import dataclass

import numpy as np

from .._validation import check_array
from ..exceptions import InputValidationError

# 256 px patches at 20x cover 512 px at 40x, the resolution of cell centroids
PATCH_SIZE_40X = 512.0
N_CELL_CLASSES = 5


@dataclass(frozen=True)
class CellInstance:
    embedding: np.ndarray
    centroid: tuple
    cell_class: int = 0


@dataclass(frozen=True)
class PatchInstance:
    embedding: np.ndarray
    grid: tuple


@dataclass
class SlideBag:
    """One slide stored column-wise.

    patch_emb : (k, P) patch embeddings
    grid : (k, 2) integer patch indices (gx, gy) at 20x
    cell_emb : (m, d_cell) cell embeddings
    centroids : (m, 2) cell centroids in 40x pixels
    cell_class : (m,) integer classes in [0, 5)
    label : 1 for BASAL, 0 for CLASSICAL, None when unknown
    """

    slide_id: str
    patch_emb: np.ndarray
    grid: np.ndarray
    cell_emb: np.ndarray = None
    centroids: np.ndarray = None
    cell_class: np.ndarray = None
    label: int = None

    def __post_init__(self):
        self.patch_emb = check_array(self.patch_emb, ndim=2, name=f"{self.slide_id}: patch_emb")
        k = self.patch_emb.shape[0]
        if k < 1:
            raise InputValidationError(f"{self.slide_id}: bag has no patches")
        grid = np.asarray(self.grid)
        if grid.shape != (k, 2) or np.any(grid < 0) or not np.all(grid == np.round(grid)):
            raise InputValidationError(f"{self.slide_id}: grid must be ({k}, 2) non-negative ints")
        self.grid = grid.astype(np.int64)
        if len({tuple(g) for g in self.grid.tolist()}) != k:
            raise InputValidationError(f"{self.slide_id}: duplicate patch grid coordinates")

        if self.cell_emb is None:
            self.cell_emb = np.zeros((0, 0))
        self.cell_emb = check_array(self.cell_emb, ndim=2, name=f"{self.slide_id}: cell_emb")
        m = self.cell_emb.shape[0]
        if self.centroids is None:
            self.centroids = np.zeros((0, 2))
        self.centroids = check_array(self.centroids, name=f"{self.slide_id}: centroids").reshape(-1, 2)
        if self.centroids.shape[0] != m:
            raise InputValidationError(f"{self.slide_id}: {m} cells but {len(self.centroids)} centroids")
        if self.cell_class is None:
            self.cell_class = np.zeros(m, dtype=np.int64)
        self.cell_class = np.asarray(self.cell_class, dtype=np.int64).reshape(-1)
        if self.cell_class.shape[0] != m or np.any((self.cell_class < 0) | (self.cell_class >= N_CELL_CLASSES)):
            raise InputValidationError(f"{self.slide_id}: cell classes must be {m} ints in [0, 5)")
        if self.label is not None and self.label not in (0, 1):
            raise InputValidationError(f"{self.slide_id}: label must be 0, 1 or None")

    @property
    def n_patches(self):
        return self.patch_emb.shape[0]

    @property
    def n_cells(self):
        return self.cell_emb.shape[0]

    @property
    def d_cell(self):
        return self.cell_emb.shape[1]

    @classmethod
    def from_instances(cls, slide_id, patches, cells=(), label=None):
        patches = list(patches)
        cells = list(cells)
        return cls(
            slide_id=slide_id,
            patch_emb=np.array([p.embedding for p in patches], dtype=np.float64),
            grid=np.array([p.grid for p in patches]).reshape(-1, 2),
            cell_emb=np.array([c.embedding for c in cells], dtype=np.float64).reshape(len(cells), -1),
            centroids=np.array([c.centroid for c in cells], dtype=np.float64).reshape(-1, 2),
            cell_class=np.array([c.cell_class for c in cells], dtype=np.int64),
            label=label,
        )

    def without_cells(self):
        return SlideBag(self.slide_id, self.patch_emb, self.grid, label=self.label)


def assign_cells_to_patches(bag):
    """Group cell indices by the patch whose 512x512 px (40x) square holds the centroid.

    Returns ``(groups, n_dropped)`` where ``groups[i]`` lists the cells of
    patch ``i`` and ``n_dropped`` counts cells landing on grid positions
    without a patch.
    """
    if bag.n_cells and np.any(bag.centroids < 0):
        raise InputValidationError(f"{bag.slide_id}: negative cell coordinates")
    index = {(int(gx), int(gy)): i for i, (gx, gy) in enumerate(bag.grid)}
    groups = [[] for _ in range(bag.n_patches)]
    cells = np.floor(bag.centroids / PATCH_SIZE_40X).astype(np.int64)
    dropped = 0
    for j, (cx, cy) in enumerate(cells.tolist()):
        i = index.get((cx, cy))
        if i is None:
            dropped += 1
        else:
            groups[i].append(j)
    return groups, dropped
