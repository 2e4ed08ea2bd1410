"""Trajectory stability scoring, force diagnostics and radial distribution functions."""

from __future__ import annotations

import csv
import io as _io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import ConfigError, PreconditionError, ValidationError
from .frame import Frame
from .graph import min_pair_distances, species_pairs
from .io import atomic_write
from .trajectory import Snapshot, TrajectoryRecord

log = logging.getLogger(__name__)


class StabilityConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha: float = Field(1.0, ge=0)
    beta: float = Field(0.25, ge=0)
    T_set: float = Field(1200.0, gt=0)
    mode: Literal["ratio", "literal"] = "ratio"
    clamp: bool = True
    n_species: Optional[int] = Field(None, ge=1)


@dataclass(frozen=True)
class SnapshotSummary:
    """What the per-transition score needs from one snapshot."""

    step: int
    n_atoms: int
    temperature: Optional[float]
    r_min: dict
    finite: bool = True


@dataclass(frozen=True)
class SnapshotScore:
    value: float
    atom_factor: float
    temp_factor: float
    dist_factor: float
    pairs: tuple


def _n_species(traj: TrajectoryRecord, cfg: StabilityConfig) -> int:
    if cfg.n_species is not None:
        return cfg.n_species
    if traj.masses:
        return len(traj.masses)
    return max((int(s.types.max()) for s in traj.snapshots if s.n_atoms), default=1)


def summarize(s: Snapshot, n_species: int) -> SnapshotSummary:
    finite = s.is_finite()
    r_min = {}
    if finite and s.n_atoms >= 2:
        frame = Frame(s.types, s.positions - s.box[:, 0], s.lengths)
        r_min = min_pair_distances(frame, n_species)
    return SnapshotSummary(s.step, s.n_atoms, s.temperature, r_min, finite)


def snapshot_index(prev: SnapshotSummary, cur: SnapshotSummary, cfg: StabilityConfig, n0: int) -> SnapshotScore:
    """Score of the transition ``prev -> cur``: atom x temperature x distance factors."""
    atom = (cur.n_atoms / n0) ** cfg.alpha if n0 else 0.0
    T = cur.temperature
    if T is None or not math.isfinite(T) or T <= 0:
        return SnapshotScore(0.0, atom, 0.0, 0.0, ())
    temp = (cfg.T_set / T) ** cfg.beta
    pairs = []
    dist = 1.0
    for pair, rb in prev.r_min.items():
        ra = cur.r_min.get(pair)
        if ra is None or rb is None:
            log.debug("species pair %s absent; skipped from the distance product", pair)
            continue
        pairs.append(pair)
        if cfg.mode == "literal":
            dist *= ra - rb
        else:
            hi = max(ra, rb)
            dist *= min(ra, rb) / hi if hi > 0 else 0.0
    value = atom * temp * dist
    if cfg.clamp:
        value = min(max(value, 0.0), 1.0)
    return SnapshotScore(value, atom, temp, dist, tuple(pairs))


@dataclass
class StabilityReport:
    s_index: float
    scores: list
    steps: list
    temperatures: list
    n_atoms: list
    r_min: dict  # "a-b" -> list over snapshots (None where absent)
    force_abnormality: Optional[list]
    force_abnormality_max: Optional[float]
    crashed: bool
    crash_step: Optional[int]
    crash_reason: str
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "s_index": self.s_index,
            "crashed": self.crashed,
            "crash_step": self.crash_step,
            "crash_reason": self.crash_reason,
            "n_snapshots": len(self.steps),
            "force_abnormality_max": self.force_abnormality_max,
            "config": self.config,
            "snapshots": [
                {
                    "step": self.steps[k],
                    "n_atoms": self.n_atoms[k],
                    "temperature": self.temperatures[k],
                    "r_min": {p: v[k] for p, v in self.r_min.items()},
                    "force_abnormality": None if self.force_abnormality is None else self.force_abnormality[k],
                    "S_index": None if k == 0 else self.scores[k - 1].value,
                    "atom_factor": None if k == 0 else self.scores[k - 1].atom_factor,
                    "temp_factor": None if k == 0 else self.scores[k - 1].temp_factor,
                    "dist_factor": None if k == 0 else self.scores[k - 1].dist_factor,
                }
                for k in range(len(self.steps))
            ],
        }

    def to_json(self) -> str:
        return json.dumps(_finite_or_none(self.to_dict()), indent=2) + "\n"

    def to_csv(self) -> str:
        pairs = list(self.r_min)
        cols = ["step", "n_atoms", "temperature", "S_index", "atom_factor", "temp_factor", "dist_factor",
                "force_abnormality"] + [f"r_min_{p}" for p in pairs]
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for snap in self.to_dict()["snapshots"]:
            row = [snap[c] for c in cols[:8]] + [snap["r_min"][p] for p in pairs]
            w.writerow(["" if v is None else v for v in row])
        return buf.getvalue()

    def write(self, json_path=None, csv_path=None):
        if json_path is not None:
            atomic_write(json_path, self.to_json())
        if csv_path is not None:
            atomic_write(csv_path, self.to_csv())


def _finite_or_none(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite_or_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite_or_none(v) for v in obj]
    return obj


def force_abnormality(traj: TrajectoryRecord):
    """Per-snapshot maximum atomic force norm and its overall maximum.

    Returns ``None`` when no snapshot carries forces; snapshots without
    forces get ``None`` entries.
    """
    series = []
    for s in traj.snapshots:
        if s.forces is None:
            series.append(None)
        elif s.n_atoms == 0:
            series.append(0.0)
        else:
            series.append(float(np.max(np.linalg.norm(s.forces, axis=1))))
    present = [v for v in series if v is not None]
    if not present:
        return None
    return series, float(max(present))


def stability_index(traj: TrajectoryRecord, cfg: StabilityConfig) -> StabilityReport:
    """Mean transition score; zero if atoms were lost, values went
    non-finite, or the run crashed."""
    if traj.num < 2:
        raise PreconditionError(f"stability index needs at least 2 snapshots, got {traj.num}")
    n_species = _n_species(traj, cfg)
    n0 = traj.n0 if traj.n0 is not None else traj.snapshots[0].n_atoms
    summaries = [summarize(s, n_species) for s in traj.snapshots]
    scores = [snapshot_index(a, b, cfg, n0) for a, b in zip(summaries, summaries[1:])]
    lost = any(s.n_atoms < n0 for s in summaries)
    broken = any(not s.finite for s in summaries)
    s_index = float(np.mean([sc.value for sc in scores]))
    if traj.crashed or lost or broken:
        s_index = 0.0
    fa = force_abnormality(traj)
    pair_keys = [f"{a}-{b}" for a, b in species_pairs(n_species)]
    r_min = {
        key: [s.r_min.get(pair) for s in summaries]
        for key, pair in zip(pair_keys, species_pairs(n_species))
    }
    return StabilityReport(
        s_index=s_index,
        scores=scores,
        steps=[s.step for s in summaries],
        temperatures=[s.temperature for s in summaries],
        n_atoms=[s.n_atoms for s in summaries],
        r_min=r_min,
        force_abnormality=None if fa is None else fa[0],
        force_abnormality_max=None if fa is None else fa[1],
        crashed=traj.crashed or lost or broken,
        crash_step=traj.crash_step,
        crash_reason=traj.crash_reason or ("atom loss" if lost else ("non-finite values" if broken else "")),
        config=cfg.model_dump(),
    )


# ---------------------------------------------------------------- RDF

@dataclass(frozen=True)
class RDF:
    r: np.ndarray
    g: np.ndarray
    edges: np.ndarray
    pair: tuple
    n_snapshots: int

    def to_csv(self) -> str:
        lines = ["r,g"] + [f"{r!r},{g!r}" for r, g in zip(self.r.tolist(), self.g.tolist())]
        return "\n".join(lines) + "\n"

    def coordination(self, density: float, r_cut: float) -> float:
        """Integral of rho g(r) 4 pi r^2 dr up to ``r_cut``."""
        shell = 4.0 / 3.0 * np.pi * (self.edges[1:] ** 3 - self.edges[:-1] ** 3)
        mask = self.edges[1:] <= r_cut + 1e-12
        return float(np.sum(self.g[mask] * shell[mask]) * density)


def rdf(traj, pair=(1, 1), r_max: float = 5.0, bins: int = 100) -> RDF:
    """g(r) between species ``pair`` averaged over snapshots.

    Counts of ordered (i, j) pairs, i of type a and j != i of type b, are
    divided by ``n_a * rho_b * shell_volume * n_snapshots`` with
    ``rho_b = (n_b - [a == b]) / V``.
    """
    snaps = traj.snapshots if isinstance(traj, TrajectoryRecord) else list(traj)
    if bins < 1:
        raise ConfigError("rdf needs at least one bin")
    if not r_max > 0:
        raise ConfigError("rdf r_max must be positive")
    if not snaps:
        raise ValidationError("rdf needs at least one snapshot")
    a, b = int(pair[0]), int(pair[1])
    edges = np.linspace(0.0, r_max, bins + 1)
    hist = np.zeros(bins)
    norm = 0.0
    for s in snaps:
        L = s.lengths
        if r_max > L.min() / 2 + 1e-12:
            raise ConfigError(f"rdf r_max={r_max} exceeds half the smallest box length {L.min()}")
        ia = np.flatnonzero(s.types == a)
        ib = np.flatnonzero(s.types == b)
        n_partner = len(ib) - (1 if a == b else 0)
        if len(ia) == 0 or n_partner <= 0:
            continue
        d = s.positions[ib][None, :, :] - s.positions[ia][:, None, :]
        d -= L * np.round(d / L)
        r = np.sqrt(np.einsum("ijk,ijk->ij", d, d))
        if a == b:
            r = r[~np.eye(len(ia), dtype=bool)]
        hist += np.histogram(r.ravel(), bins=edges)[0]
        norm += len(ia) * n_partner / float(np.prod(L))
    shell = 4.0 / 3.0 * np.pi * (edges[1:] ** 3 - edges[:-1] ** 3)
    g = hist / (norm * shell) if norm > 0 else np.zeros(bins)
    return RDF(0.5 * (edges[1:] + edges[:-1]), g, edges, (a, b), len(snaps))


def rdf_table(rdfs: Sequence[RDF], labels: Sequence[str]) -> str:
    """Side-by-side CSV of several g(r) curves sharing one binning."""
    if not rdfs:
        return "r\n"
    base = rdfs[0].r
    for x in rdfs[1:]:
        if not np.array_equal(x.r, base):
            raise ValidationError("rdf curves must share the same bins")
    header = ["r"] + list(labels)
    lines = [",".join(header)]
    for k in range(len(base)):
        lines.append(",".join([repr(float(base[k]))] + [repr(float(x.g[k])) for x in rdfs]))
    return "\n".join(lines) + "\n"
