"""Cutoff-radius edge graphs under the minimum-image convention."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement, product

import numpy as np

from .errors import PreconditionError
from .frame import Frame

#: above this atom count build_graph switches to a cell list
CELL_LIST_THRESHOLD = 256


@dataclass(frozen=True, eq=False)
class EdgeGraph:
    """Directed edges (src -> dst) sorted by (src, dst).

    ``disp[e] = r[dst] - r[src] + shift[e]`` where ``shift`` is the periodic
    image correction; keeping it separately lets a model differentiate the
    displacement with respect to the raw positions.
    """

    src: np.ndarray
    dst: np.ndarray
    disp: np.ndarray
    dist: np.ndarray
    shift: np.ndarray
    r_max: float
    n_atoms: int

    @property
    def f(self) -> int:
        return len(self.src)

    @property
    def edges(self) -> np.ndarray:
        return np.stack([self.src, self.dst], axis=1)


def _check_cutoff(frame: Frame, r_max: float):
    if not r_max > 0:
        raise PreconditionError(f"r_max must be positive, got {r_max}")
    for axis, (length, periodic) in enumerate(zip(frame.cell, frame.pbc)):
        if periodic and r_max > length / 2:
            raise PreconditionError(
                f"r_max={r_max} exceeds half the cell along axis {'xyz'[axis]} "
                f"(L={length}); minimum image is ambiguous"
            )


def _min_image(d: np.ndarray, cell: np.ndarray, pbc) -> np.ndarray:
    """Image correction to add to raw displacements ``d`` (..., 3)."""
    shift = np.zeros_like(d)
    for k in range(3):
        if pbc[k]:
            shift[..., k] = -cell[k] * np.round(d[..., k] / cell[k])
    return shift


def _pairs_brute(pos, cell, pbc, r_max):
    n = len(pos)
    raw = pos[None, :, :] - pos[:, None, :]  # raw[i, j] = r_j - r_i
    shift = _min_image(raw, cell, pbc)
    disp = raw + shift
    dist = np.sqrt(np.sum(disp * disp, axis=-1))
    mask = dist <= r_max
    mask[np.arange(n), np.arange(n)] = False
    src, dst = np.nonzero(mask)  # row-major => sorted by (src, dst)
    return src, dst, shift[src, dst], disp[src, dst], dist[src, dst]


def _pairs_cells(pos, cell, pbc, r_max):
    ncell = np.maximum(np.floor(cell / r_max).astype(int), 1)
    wrapped = pos.copy()
    for k in range(3):
        if pbc[k]:
            wrapped[:, k] %= cell[k]
    lo = wrapped.min(axis=0)
    span = np.where(pbc, cell, np.maximum(wrapped.max(axis=0) - lo, 1e-12) * (1 + 1e-9))
    origin = np.where(pbc, 0.0, lo)
    idx = np.floor((wrapped - origin) / span * ncell).astype(int)
    idx = np.clip(idx, 0, ncell - 1)
    flat = np.ravel_multi_index(idx.T, ncell)
    order = np.argsort(flat, kind="stable")
    starts = np.searchsorted(flat[order], np.arange(np.prod(ncell) + 1))
    members = [order[starts[c] : starts[c + 1]] for c in range(np.prod(ncell))]

    srcs, dsts = [], []
    for c in range(np.prod(ncell)):
        a = members[c]
        if len(a) == 0:
            continue
        cidx = np.array(np.unravel_index(c, ncell))
        neigh = set()
        for off in product((-1, 0, 1), repeat=3):
            nb = cidx + off
            ok = True
            for k in range(3):
                if pbc[k]:
                    nb[k] %= ncell[k]
                elif not 0 <= nb[k] < ncell[k]:
                    ok = False
            if ok:
                neigh.add(int(np.ravel_multi_index(nb, ncell)))
        b = np.concatenate([members[m] for m in sorted(neigh)])
        srcs.append(np.repeat(a, len(b)))
        dsts.append(np.tile(b, len(a)))
    if not srcs:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)
    src = np.concatenate(srcs)
    dst = np.concatenate(dsts)
    keep = src != dst
    src, dst = src[keep], dst[keep]
    raw = pos[dst] - pos[src]
    shift = _min_image(raw, cell, pbc)
    disp = raw + shift
    dist = np.sqrt(np.sum(disp * disp, axis=-1))
    mask = dist <= r_max
    src, dst, shift, disp, dist = src[mask], dst[mask], shift[mask], disp[mask], dist[mask]
    order = np.lexsort((dst, src))
    return src[order], dst[order], shift[order], disp[order], dist[order]


def build_graph(frame: Frame, r_max: float, method: str = "auto") -> EdgeGraph:
    """All directed pairs within ``r_max`` (inclusive) under minimum image."""
    _check_cutoff(frame, r_max)
    pos = np.asarray(frame.positions, dtype=float)
    if method == "auto":
        method = "cells" if frame.n_atoms > CELL_LIST_THRESHOLD else "brute"
    if frame.n_atoms < 2:
        src = dst = np.zeros(0, dtype=np.int64)
        shift = disp = np.zeros((0, 3))
        dist = np.zeros(0)
    elif method == "brute":
        src, dst, shift, disp, dist = _pairs_brute(pos, frame.cell, frame.pbc, r_max)
    elif method == "cells":
        src, dst, shift, disp, dist = _pairs_cells(pos, frame.cell, frame.pbc, r_max)
    else:
        raise ValueError(f"unknown neighbor method {method!r}")
    return EdgeGraph(
        src=src.astype(np.int64),
        dst=dst.astype(np.int64),
        disp=disp,
        dist=dist,
        shift=shift,
        r_max=float(r_max),
        n_atoms=frame.n_atoms,
    )


def species_pairs(n_species: int) -> list:
    """The C(C+1)/2 unordered species pairs, 1-based, as (a, b) with a <= b."""
    return list(combinations_with_replacement(range(1, n_species + 1), 2))


def min_pair_distances(frame: Frame, n_species: int | None = None) -> dict:
    """Minimum-image minimum distance for each unordered species pair.

    Entries are ``None`` when the pair cannot be formed (a same-species pair
    needs two atoms of that species; a mixed pair needs one of each).
    """
    if n_species is None:
        n_species = len(frame.masses) or (int(frame.species.max()) if frame.n_atoms else 0)
    pos = np.asarray(frame.positions, dtype=float)
    raw = pos[None, :, :] - pos[:, None, :]
    disp = raw + _min_image(raw, frame.cell, frame.pbc)
    dist = np.sqrt(np.sum(disp * disp, axis=-1))
    np.fill_diagonal(dist, np.inf)
    out = {}
    for a, b in species_pairs(n_species):
        ia = np.flatnonzero(frame.species == a)
        ib = np.flatnonzero(frame.species == b)
        if len(ia) == 0 or len(ib) == 0 or (a == b and len(ia) < 2):
            out[(a, b)] = None
            continue
        out[(a, b)] = float(dist[np.ix_(ia, ib)].min())
    return out
