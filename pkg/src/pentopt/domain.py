"""Core geometry types: levels, density fields, boundary conditions.

The density vector uses a column-major layout: entry ``i + d*j`` (0-based)
holds the element in row ``i``, column ``j`` of the mesh. All other modules
adopt this layout so element numbering matches the classic 88-line
convention and results can be compared element-for-element.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

X_MIN_DEFAULT = 0.001


@dataclass(frozen=True)
class Level:
    """Curriculum level: each increment doubles the mesh side length."""

    lam: int = 1
    d_inp: int = 8

    def __post_init__(self):
        if self.lam < 1:
            raise ValueError(f"level must be >= 1, got {self.lam}")

    @property
    def d(self) -> int:
        return self.d_inp * 2 ** (self.lam - 1)

    @property
    def node_count(self) -> int:
        return (self.d + 1) ** 2

    @property
    def scale(self) -> int:
        """Node-index stride of level-1 nodes inside this level's grid."""
        return 2 ** (self.lam - 1)


def reshape_to_matrix(x: np.ndarray) -> np.ndarray:
    """Density vector of length d^2 -> d x d matrix (column-major)."""
    x = np.asarray(x)
    if x.ndim != 1:
        raise ValueError(f"expected a vector, got shape {x.shape}")
    d = int(round(np.sqrt(x.size)))
    if d * d != x.size:
        raise ValueError(f"vector length {x.size} is not a perfect square")
    return x.reshape((d, d), order="F")


def reshape_to_vector(m: np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`reshape_to_matrix`."""
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    return m.ravel(order="F")


@dataclass
class DensityField:
    """Geometry as a density vector at a given level."""

    level: Level
    x: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.shape != (self.level.d ** 2,):
            raise ValueError(
                f"density vector has length {self.x.size}, "
                f"expected {self.level.d ** 2} at level {self.level.lam}"
            )

    @property
    def d(self) -> int:
        return self.level.d

    def as_matrix(self) -> np.ndarray:
        return reshape_to_matrix(self.x)

    @property
    def fill_degree(self) -> float:
        return float(np.mean(self.x))

    def clamped(self, x_min: float = X_MIN_DEFAULT) -> "DensityField":
        """Clamp all entries into [x_min, 1]. Idempotent."""
        return DensityField(self.level, np.clip(self.x, x_min, 1.0))


def upsample_field(f: DensityField) -> DensityField:
    """Quarter every element: each density is copied to its 4 children.

    Preserves the fill degree exactly.
    """
    m = f.as_matrix()
    m2 = np.repeat(np.repeat(m, 2, axis=0), 2, axis=1)
    lvl = Level(f.level.lam + 1, f.level.d_inp)
    return DensityField(lvl, reshape_to_vector(m2))


@dataclass
class BoundaryConditionSet:
    """Kinematic (boolean) and static (force) conditions on the level-1 node grid.

    ``rkx[r, c]`` is True when the x-displacement of node (row r, col c) is
    fixed; ``rsx[r, c]`` holds the x-component of a force in N. The left edge
    of the domain is column 0.
    """

    rkx: np.ndarray
    rky: np.ndarray
    rsx: np.ndarray
    rsy: np.ndarray

    def __post_init__(self):
        self.rkx = np.asarray(self.rkx, dtype=bool)
        self.rky = np.asarray(self.rky, dtype=bool)
        self.rsx = np.asarray(self.rsx, dtype=float)
        self.rsy = np.asarray(self.rsy, dtype=float)
        shape = self.rkx.shape
        if len(shape) != 2 or shape[0] != shape[1]:
            raise ValueError(f"boundary matrices must be square, got {shape}")
        for name in ("rky", "rsx", "rsy"):
            if getattr(self, name).shape != shape:
                raise ValueError(
                    f"{name} has shape {getattr(self, name).shape}, expected {shape}"
                )
        if np.any(self.rkx & (self.rsx != 0.0)) or np.any(self.rky & (self.rsy != 0.0)):
            raise ValueError("force applied in a fixed displacement direction")

    @property
    def d_inp(self) -> int:
        return self.rkx.shape[0] - 1

    @classmethod
    def empty(cls, d_inp: int = 8) -> "BoundaryConditionSet":
        n = d_inp + 1
        z = np.zeros((n, n))
        return cls(z.astype(bool), z.astype(bool), z.copy(), z.copy())

    @classmethod
    def left_edge_clamped(cls, d_inp: int = 8) -> "BoundaryConditionSet":
        bc = cls.empty(d_inp)
        bc.rkx[:, 0] = True
        bc.rky[:, 0] = True
        return bc

    def rk_vector(self) -> np.ndarray:
        """Flattened kinematic vector, length 2*(d_inp+1)^2, entries in {0,1}."""
        return np.concatenate(
            [reshape_to_vector(self.rkx), reshape_to_vector(self.rky)]
        ).astype(float)

    def rs_vector(self) -> np.ndarray:
        """Flattened static vector, length 2*(d_inp+1)^2."""
        return np.concatenate([reshape_to_vector(self.rsx), reshape_to_vector(self.rsy)])

    def at_level(self, level: Level) -> "BoundaryConditionSet":
        """Map the level-1 conditions onto a finer node grid.

        Level-1 nodes coincide with every ``2^(lam-1)``-th node of the finer
        grid; new nodes carry no conditions.
        """
        if level.d_inp != self.d_inp:
            raise ValueError(
                f"level expects d_inp={level.d_inp}, boundary set has {self.d_inp}"
            )
        s = level.scale
        n = level.d + 1
        rkx = np.zeros((n, n), dtype=bool)
        rky = np.zeros((n, n), dtype=bool)
        rsx = np.zeros((n, n))
        rsy = np.zeros((n, n))
        rkx[::s, ::s] = self.rkx
        rky[::s, ::s] = self.rky
        rsx[::s, ::s] = self.rsx
        rsy[::s, ::s] = self.rsy
        return BoundaryConditionSet(rkx, rky, rsx, rsy)


@dataclass
class InputSample:
    """One training/inference input: boundary conditions + target fill degree."""

    bc: BoundaryConditionSet
    m_tar: float

    def __post_init__(self):
        if not 0.0 <= self.m_tar <= 1.0:
            raise ValueError(f"target fill degree {self.m_tar} outside [0, 1]")

    def input_vector(self) -> np.ndarray:
        """Network input: concat(Rk, Rs, Mtar), length 4*(d_inp+1)^2 + 1."""
        return np.concatenate(
            [self.bc.rk_vector(), self.bc.rs_vector(), [self.m_tar]]
        )


# --- file formats -----------------------------------------------------------


def save_geometry(f: DensityField, path: str) -> None:
    record = {
        "level": f.level.lam,
        "d_inp": f.level.d_inp,
        "d": f.d,
        "x": [float(v) for v in f.x],
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(record, fh)
    os.replace(tmp, path)


def load_geometry(path: str) -> DensityField:
    with open(path) as fh:
        record = json.load(fh)
    lvl = Level(int(record["level"]), int(record.get("d_inp", 8)))
    return DensityField(lvl, np.asarray(record["x"], dtype=float))


def export_image(f: DensityField, path: str) -> None:
    """Grayscale export: density 1 -> black, low density -> white."""
    from PIL import Image

    m = f.as_matrix()
    gray = np.clip((1.0 - m) * 255.0, 0, 255).astype(np.uint8)
    Image.fromarray(gray, mode="L").save(path)
