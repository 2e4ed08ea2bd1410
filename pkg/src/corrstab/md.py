"""Velocity-Verlet molecular dynamics with an optional Langevin force term.

Force providers are callables ``positions -> (energy eV, forces eV/A)``
bound to a fixed species list and cell: either the analytic pair potential
or a trained model.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import NumericError, PreconditionError, ValidationError
from .frame import Dataset, Frame, composition_counts
from .graph import build_graph
from .trajectory import Snapshot, TrajectoryRecord, write_dump
from .units import FTM2V, KB, MVV2E, kinetic_energy, temperature

log = logging.getLogger(__name__)

OVERLAP = 1e-6


# ---------------------------------------------------------------- reference potential

class RefPotential(BaseModel):
    """Lennard-Jones 12-6 mixture, energy shifted to zero at the cutoff.

    ``epsilon``/``sigma`` are symmetric C x C tables (eV, A) indexed by
    species id minus one.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["lennard-jones-mixture"] = "lennard-jones-mixture"
    name: str = ""
    species: tuple = ()
    masses: tuple
    epsilon: tuple
    sigma: tuple
    cutoff: float = Field(gt=0)
    shift: bool = True
    box: Optional[float] = None
    n_atoms: Optional[int] = None
    composition: str = ""
    temperature: Optional[float] = None

    @field_validator("epsilon", "sigma", mode="before")
    @classmethod
    def _tuples(cls, v):
        return tuple(tuple(float(x) for x in row) for row in v)

    @model_validator(mode="after")
    def _check(self):
        c = len(self.masses)
        for name in ("epsilon", "sigma"):
            table = np.array(getattr(self, name))
            if table.shape != (c, c):
                raise ValueError(f"{name} must be {c}x{c}")
            if not np.allclose(table, table.T):
                raise ValueError(f"{name} must be symmetric")
            if not np.all(table > 0):
                raise ValueError(f"{name} entries must be positive")
        if self.cutoff < 2 ** (1 / 6) * float(np.max(self.sigma)):
            raise ValueError("cutoff must reach the potential minimum of every pair")
        return self

    @property
    def n_species(self) -> int:
        return len(self.masses)

    def tables(self):
        return np.array(self.epsilon), np.array(self.sigma)


def _preset_path(name: str):
    return resources.files("corrstab") / "presets" / f"{name}.json"


def load_preset(name_or_path) -> RefPotential:
    """A shipped preset by name (``lj-mixture``, ``argon``) or a JSON file path."""
    p = Path(str(name_or_path))
    if p.suffix == ".json" and p.exists():
        text = p.read_text()
    else:
        ref = _preset_path(str(name_or_path))
        if not ref.is_file():
            raise ValidationError(f"unknown potential preset {name_or_path!r}")
        text = ref.read_text()
    return RefPotential.model_validate(json.loads(text))


def lj_pair(r, eps, sig, cutoff, shift=True):
    """Pair energy and dU/dr for arrays of distances."""
    sr6 = (sig / r) ** 6
    energy = 4.0 * eps * (sr6 * sr6 - sr6)
    if shift:
        sc6 = (sig / cutoff) ** 6
        energy = energy - 4.0 * eps * (sc6 * sc6 - sc6)
    dudr = -24.0 * eps * (2.0 * sr6 * sr6 - sr6) / r
    return energy, dudr


def ref_energy_forces(pot: RefPotential, frame: Frame):
    """Total energy (eV) and forces (eV/A) of the pair potential."""
    graph = build_graph(frame, pot.cutoff)
    if graph.f and graph.dist.min() < OVERLAP:
        raise NumericError(f"overlapping atoms (r = {graph.dist.min():.3g} A)")
    eps, sig = pot.tables()
    a = frame.species[graph.src] - 1
    b = frame.species[graph.dst] - 1
    energy, dudr = lj_pair(graph.dist, eps[a, b], sig[a, b], pot.cutoff, pot.shift)
    forces = np.zeros((frame.n_atoms, 3))
    np.add.at(forces, graph.src, (dudr / graph.dist)[:, None] * graph.disp)
    return 0.5 * float(energy.sum()), forces


class RefForces:
    """Force provider for the reference potential."""

    def __init__(self, pot: RefPotential, template: Frame):
        self.pot = pot
        self.template = template

    def __call__(self, positions):
        return ref_energy_forces(self.pot, self.template.with_(positions=positions))


class ModelForces:
    """Force provider backed by trained model parameters."""

    def __init__(self, params, template: Frame):
        self.params = params
        self.template = template

    def __call__(self, positions):
        from .model import energy_and_forces

        frame = self.template.with_(positions=positions)
        return energy_and_forces(self.params, frame)


# ---------------------------------------------------------------- integrator

class MDConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    dt: float = Field(0.25, gt=0)
    steps: int = Field(40000, ge=0)
    T_set: float = Field(300.0, ge=0)
    thermostat: Literal["none", "langevin"] = "none"
    damp: Optional[float] = Field(None, gt=0)
    dump_interval: int = Field(100, ge=1)
    seed: int = 0
    init_velocity: Literal["zero", "maxwell-boltzmann", "keep"] = "maxwell-boltzmann"
    T_init: Optional[float] = Field(None, ge=0)

    @property
    def damping(self) -> float:
        return self.damp if self.damp is not None else 100.0 * self.dt


@dataclass
class MDState:
    step: int
    positions: np.ndarray
    velocities: np.ndarray
    forces: np.ndarray  # conservative forces at ``positions``
    energy: float
    kick: np.ndarray  # forces actually used for the next half-kick

    def copy(self) -> "MDState":
        return MDState(self.step, self.positions.copy(), self.velocities.copy(),
                       self.forces.copy(), self.energy, self.kick.copy())


def langevin_force(masses, velocities, T_set, damp, dt, rng):
    """Friction plus Gaussian random force for one step (eV/A)."""
    m = np.asarray(masses, dtype=float)[:, None]
    v = np.asarray(velocities, dtype=float)
    friction = -MVV2E * m * v / damp
    if T_set <= 0:
        return friction
    sigma = np.sqrt(2.0 * KB * T_set * MVV2E * m / (damp * dt))
    return friction + sigma * rng.standard_normal(v.shape)


def wrap_positions(positions, cell, pbc=(True, True, True)):
    out = np.array(positions, dtype=float)
    with np.errstate(invalid="ignore"):  # non-finite rows are reported by the caller
        for k in range(3):
            if pbc[k]:
                out[:, k] = np.mod(out[:, k], cell[k])
                out[out[:, k] >= cell[k], k] = 0.0  # mod can round up to exactly L
    return out


def _check_finite(arr, what, step):
    if not np.all(np.isfinite(arr)):
        err = NumericError(f"non-finite {what} at step {step}")
        err.positions = arr if what == "position" else None
        raise err


def step_nve(state: MDState, provider: Callable, dt: float, masses, cell, pbc=(True, True, True),
             thermostat: Optional[Callable] = None) -> MDState:
    """One velocity-Verlet step; ``thermostat(v) -> extra force`` is added to
    the freshly computed forces before the closing half-kick."""
    inv_m = FTM2V / np.asarray(masses, dtype=float)[:, None]
    v_half = state.velocities + 0.5 * dt * state.kick * inv_m
    pos = wrap_positions(state.positions + dt * v_half, cell, pbc)
    step = state.step + 1
    _check_finite(pos, "position", step)
    energy, forces = provider(pos)
    forces = np.asarray(forces, dtype=float)
    _check_finite(forces, "force", step)
    kick = forces if thermostat is None else forces + thermostat(v_half)
    vel = v_half + 0.5 * dt * kick * inv_m
    return MDState(step, pos, vel, forces, float(energy), kick)


def maxwell_boltzmann(masses, T, rng) -> np.ndarray:
    """Velocities (A/fs) at temperature ``T`` with zero total momentum."""
    m = np.asarray(masses, dtype=float)
    if T <= 0 or len(m) == 0:
        return np.zeros((len(m), 3))
    v = rng.standard_normal((len(m), 3)) * np.sqrt(KB * T / (m * MVV2E))[:, None]
    v -= (m[:, None] * v).sum(axis=0) / m.sum()
    current = temperature(m, v)
    if current > 0:
        v *= math.sqrt(T / current)
    return v


@dataclass
class MDResult:
    record: TrajectoryRecord
    final: Optional[MDState]
    status: str
    crash_step: Optional[int] = None
    reason: str = ""

    @property
    def crashed(self) -> bool:
        return self.status == "crashed"


def _snapshot(step, positions, forces, velocities, types, cell, masses, keep=None) -> Snapshot:
    ids = np.arange(1, len(types) + 1)
    if keep is not None:
        ids, types = ids[keep], types[keep]
        positions = positions[keep]
        forces = None if forces is None else forces[keep]
        velocities = None if velocities is None else velocities[keep]
    m = np.asarray(masses)[types - 1]
    temp = temperature(m, velocities) if velocities is not None and len(m) else 0.0
    box = np.stack([np.zeros(3), np.asarray(cell, dtype=float)], axis=1)
    return Snapshot(int(step), ids, types.copy(), positions.copy(), box,
                    None if forces is None else forces.copy(),
                    None if velocities is None else velocities.copy(), float(temp))


def run_md(provider: Callable, frame0: Frame, cfg: MDConfig, dump_path=None,
           rng: Optional[np.random.Generator] = None, progress=None) -> MDResult:
    """Integrate ``cfg.steps`` steps from ``frame0``, snapshotting every
    ``dump_interval`` steps (step 0 included).

    Any non-finite force/position, overlapping atoms or failed wrap ends the
    run as ``crashed``; the last snapshot then holds only atoms whose
    positions are still finite.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    masses = frame0.atom_masses()
    cell, pbc, types = frame0.cell, frame0.pbc, frame0.species
    if cfg.init_velocity == "keep" and frame0.velocities is not None:
        vel = np.array(frame0.velocities)
    elif cfg.init_velocity == "maxwell-boltzmann":
        vel = maxwell_boltzmann(masses, cfg.T_init if cfg.T_init is not None else cfg.T_set, rng)
    else:
        vel = np.zeros((frame0.n_atoms, 3))
    pos = wrap_positions(frame0.positions, cell, pbc)
    snaps = []
    status, crash_step, reason = "completed", None, ""
    state = None
    thermostat = None
    if cfg.thermostat == "langevin":
        damp = cfg.damping
        thermostat = lambda v: langevin_force(masses, v, cfg.T_set, damp, cfg.dt, rng)
    try:
        energy, forces = provider(pos)
        forces = np.asarray(forces, dtype=float)
        _check_finite(forces, "force", 0)
        kick = forces if thermostat is None else forces + thermostat(vel)
        state = MDState(0, pos, vel, forces, float(energy), kick)
        snaps.append(_snapshot(0, pos, forces, vel, types, cell, masses))
        for _ in range(cfg.steps):
            state = step_nve(state, provider, cfg.dt, masses, cell, pbc, thermostat)
            if np.any(state.positions < 0) or np.any(state.positions >= cell):
                raise NumericError(f"atom escaped the cell at step {state.step}")
            if state.step % cfg.dump_interval == 0:
                snaps.append(_snapshot(state.step, state.positions, state.forces, state.velocities,
                                       types, cell, masses))
                if progress is not None:
                    progress(state)
    except NumericError as exc:
        status, reason = "crashed", str(exc)
        crash_step = 0 if state is None else state.step + 1
        # positions the integrator would have reached; atoms that went non-finite are lost
        base = getattr(exc, "positions", None)
        if base is None:
            base = pos if state is None else state.positions
        keep = np.all(np.isfinite(base), axis=1)
        last = snaps[-1].step if snaps else -1
        if crash_step > last:
            snaps.append(_snapshot(crash_step, base, None, None, types, cell, masses, keep=keep))
        log.info("MD crashed at step %s: %s", crash_step, reason)
    record = TrajectoryRecord(snaps, n0=frame0.n_atoms, status=status, crash_step=crash_step,
                              crash_reason=reason, masses=tuple(frame0.masses))
    if dump_path is not None:
        write_dump(record, dump_path)
    return MDResult(record, state, status, crash_step, reason)


def total_energy(state: MDState, masses) -> float:
    return state.energy + kinetic_energy(masses, state.velocities)


# ---------------------------------------------------------------- dataset generation

def random_placement(counts, cell, min_dist, rng, max_tries=20000) -> np.ndarray:
    """Random sequential placement respecting a minimum image distance."""
    n = int(sum(counts))
    cell = np.asarray(cell, dtype=float)
    pos = np.zeros((n, 3))
    placed = 0
    tries = 0
    while placed < n:
        if tries > max_tries * max(n, 1):
            raise PreconditionError(f"could not place {n} atoms with separation {min_dist} A")
        tries += 1
        trial = rng.uniform(0, cell)
        if placed:
            d = pos[:placed] - trial
            d -= cell * np.round(d / cell)
            if np.min(np.einsum("ij,ij->i", d, d)) < min_dist * min_dist:
                continue
        pos[placed] = trial
        placed += 1
    return pos


def relax(provider, positions, cell, steps=200, max_move=0.05) -> np.ndarray:
    """Capped steepest descent to remove close contacts before dynamics."""
    pos = np.array(positions, dtype=float)
    for _ in range(steps):
        _, f = provider(pos)
        norm = np.linalg.norm(f, axis=1)
        fmax = float(norm.max()) if len(norm) else 0.0
        if fmax < 1e-3:
            break
        pos = wrap_positions(pos + f * (max_move / fmax), cell)
    return pos


class DatagenConfig(BaseModel):
    """Sampling schedule for synthetic datasets."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    n_atoms: int = Field(96, ge=1)
    dt: float = Field(1.0, gt=0)
    T_set: Optional[float] = Field(None, gt=0)
    equil_steps: int = Field(4000, ge=0)
    stride: int = Field(100, ge=1)
    damp: Optional[float] = Field(None, gt=0)
    seed: int = 0


def initial_frame(pot: RefPotential, composition: str, n_atoms: int, rng, cell=None) -> Frame:
    counts = composition_counts(composition, n_atoms)
    species = np.concatenate([np.full(c, k + 1) for k, c in enumerate(counts)]).astype(int)
    species = species[rng.permutation(len(species))]
    box = cell if cell is not None else pot.box
    if box is None:
        raise ValidationError("preset has no box length; give one explicitly")
    cell = np.full(3, float(box)) if np.isscalar(box) else np.asarray(box, dtype=float)
    sig_min = float(np.min(pot.sigma))
    pos = random_placement(counts, cell, 0.8 * sig_min, rng)
    return Frame(species, pos, cell, masses=pot.masses)


def generate_dataset(pot: RefPotential, composition: str, n_frames: int, cfg: DatagenConfig = DatagenConfig(),
                     cell=None) -> Dataset:
    """Labelled frames from an equilibrated Langevin run of the reference potential."""
    if n_frames < 0:
        raise ValidationError("n_frames must be >= 0")
    composition_counts(composition, cfg.n_atoms)  # validates the ratio early
    if n_frames == 0:
        return Dataset((), composition)
    rng = np.random.default_rng(cfg.seed)
    frame = initial_frame(pot, composition, cfg.n_atoms, rng, cell)
    provider = RefForces(pot, frame)
    frame = frame.with_(positions=relax(provider, frame.positions, frame.cell))
    T = cfg.T_set if cfg.T_set is not None else (pot.temperature or 300.0)
    md = MDConfig(dt=cfg.dt, steps=cfg.equil_steps + n_frames * cfg.stride, T_set=T, thermostat="langevin",
                  damp=cfg.damp, dump_interval=cfg.stride, seed=cfg.seed)
    result = run_md(provider, frame, md, rng=rng)
    if result.crashed:
        raise NumericError(f"equilibration diverged: {result.reason}")
    frames = []
    for snap in result.record.snapshots:
        if snap.step <= cfg.equil_steps:
            continue
        fr = Frame(snap.types, snap.positions, frame.cell, masses=pot.masses, velocities=snap.velocities)
        energy, forces = ref_energy_forces(pot, fr)
        frames.append(fr.with_(energy=energy, forces=forces))
    return Dataset(frames[:n_frames], composition)
