"""Atomic configurations and collections of them."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .units import temperature


def _frozen(a, dtype=float, shape=None):
    if a is None:
        return None
    arr = np.array(a, dtype=dtype, copy=True)
    if shape is not None:
        arr = arr.reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Frame:
    """One periodic, orthorhombic atomic configuration.

    ``species`` holds 1-based species ids. ``masses`` is indexed by species id
    minus one, so ``masses[0]`` is the mass of species 1.
    """

    species: np.ndarray
    positions: np.ndarray
    cell: np.ndarray
    pbc: tuple = (True, True, True)
    energy: Optional[float] = None
    forces: Optional[np.ndarray] = None
    velocities: Optional[np.ndarray] = None
    masses: tuple = ()

    def __post_init__(self):
        species = _frozen(self.species, dtype=np.int64).reshape(-1)
        n = len(species)
        positions = _frozen(self.positions, shape=(n, 3)) if n else _frozen(np.zeros((0, 3)))
        object.__setattr__(self, "species", species)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "cell", _frozen(self.cell).reshape(3))
        object.__setattr__(self, "pbc", tuple(bool(b) for b in self.pbc))
        object.__setattr__(self, "masses", tuple(float(m) for m in self.masses))
        if self.energy is not None:
            object.__setattr__(self, "energy", float(self.energy))
        for name in ("forces", "velocities"):
            value = getattr(self, name)
            if value is not None:
                arr = np.array(value, dtype=float)
                if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] != n:
                    raise ValidationError(
                        f"{name} has {arr.shape[0] if arr.ndim else 0} rows, expected {n}"
                    )
                object.__setattr__(self, name, _frozen(arr))
        self.validate()

    def validate(self):
        if len(self.pbc) != 3:
            raise ValidationError("pbc needs exactly 3 flags")
        if not np.all(self.cell > 0):
            raise ValidationError(f"cell lengths must be positive, got {self.cell.tolist()}")
        if not np.all(np.isfinite(self.positions)):
            raise ValidationError("positions contain non-finite values")
        if len(self.species) and self.species.min() < 1:
            raise ValidationError("species ids are 1-based")
        if self.masses and len(self.species) and self.species.max() > len(self.masses):
            raise ValidationError(
                f"species id {self.species.max()} has no mass entry ({len(self.masses)} given)"
            )

    @property
    def n_atoms(self) -> int:
        return len(self.species)

    @property
    def volume(self) -> float:
        return float(np.prod(self.cell))

    def atom_masses(self) -> np.ndarray:
        if not self.masses:
            raise ValidationError("frame carries no masses")
        return np.asarray(self.masses)[self.species - 1]

    def temperature(self) -> float:
        if self.velocities is None:
            raise ValidationError("frame carries no velocities")
        return temperature(self.atom_masses(), self.velocities)

    def with_(self, **changes) -> "Frame":
        return replace(self, **changes)

    def wrapped(self) -> "Frame":
        pos = np.array(self.positions)
        for k in range(3):
            if self.pbc[k]:
                pos[:, k] = pos[:, k] % self.cell[k]
        return self.with_(positions=pos)

    def equals(self, other: "Frame", atol: float = 0.0) -> bool:
        if not isinstance(other, Frame):
            return False
        if not np.array_equal(self.species, other.species) or self.pbc != other.pbc:
            return False
        if self.masses != other.masses:
            return False
        if (self.energy is None) != (other.energy is None):
            return False
        if self.energy is not None and abs(self.energy - other.energy) > atol * max(1.0, abs(self.energy)):
            return False
        pairs = [(self.positions, other.positions), (self.cell, other.cell),
                 (self.forces, other.forces), (self.velocities, other.velocities)]
        for a, b in pairs:
            if (a is None) != (b is None):
                return False
            if a is not None and not np.allclose(a, b, rtol=atol, atol=atol):
                return False
        return True


@dataclass(frozen=True, eq=False)
class Dataset:
    frames: tuple = field(default_factory=tuple)
    composition: str = ""

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        n_species = {len(f.masses) for f in self.frames if f.masses}
        if len(n_species) > 1:
            raise ValidationError("frames disagree on the species mass table")

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return Dataset(self.frames[idx], self.composition)
        return self.frames[idx]

    def equals(self, other: "Dataset", atol: float = 0.0) -> bool:
        return (
            self.composition == other.composition
            and len(self) == len(other)
            and all(a.equals(b, atol) for a, b in zip(self.frames, other.frames))
        )

    def split(self, n_last: int):
        """Split off the last ``n_last`` frames (e.g. as validation set)."""
        if n_last <= 0:
            return self, Dataset((), self.composition)
        return self[: len(self) - n_last], self[len(self) - n_last:]


def parse_composition(ratio: str) -> tuple:
    """``"1:1.55"`` -> ``(1.0, 1.55)``."""
    try:
        parts = tuple(float(p) for p in ratio.split(":"))
    except ValueError as exc:
        raise ValidationError(f"bad composition {ratio!r}") from exc
    if len(parts) < 1 or any(p < 0 for p in parts) or sum(parts) <= 0:
        raise ValidationError(f"bad composition {ratio!r}")
    return parts


def composition_counts(ratio: str, n_total: int) -> list:
    """Integer atom counts for a ratio string at fixed total.

    Each species gets ``round(n_total * w / sum(w))`` atoms (half away from
    zero); the last species absorbs the rounding remainder so counts always
    sum to ``n_total``.
    """
    weights = parse_composition(ratio)
    total = sum(weights)
    counts = [int(np.floor(n_total * w / total + 0.5)) for w in weights[:-1]]
    counts.append(n_total - sum(counts))
    if counts[-1] < 0:
        raise ValidationError(f"composition {ratio!r} cannot be realised with {n_total} atoms")
    return counts


def species_counts(species: Sequence[int]) -> dict:
    ids, counts = np.unique(np.asarray(species), return_counts=True)
    return {int(i): int(c) for i, c in zip(ids, counts)}
