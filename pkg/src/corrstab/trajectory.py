"""Trajectory snapshots and the LAMMPS text dump format.

The writer is canonical: fixed item order, ``repr`` floats, one space
between fields, so ``write(parse(write(x)))`` is byte-identical. The
reader accepts any column order and extra columns, and tolerates extra
whitespace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ParseError, SchemaError, ValidationError
from .io import atomic_write
from .units import temperature as kinetic_temperature

MANDATORY = ("id", "type", "x", "y", "z")
_POS_ALIASES = {"x": ("x", "xu"), "y": ("y", "yu"), "z": ("z", "zu")}


@dataclass(frozen=True, eq=False)
class Snapshot:
    step: int
    ids: np.ndarray
    types: np.ndarray
    positions: np.ndarray
    box: np.ndarray  # (3, 2) lo/hi
    forces: Optional[np.ndarray] = None
    velocities: Optional[np.ndarray] = None
    temperature: Optional[float] = None

    @property
    def n_atoms(self) -> int:
        return len(self.ids)

    @property
    def lengths(self) -> np.ndarray:
        return self.box[:, 1] - self.box[:, 0]

    def is_finite(self) -> bool:
        ok = bool(np.all(np.isfinite(self.positions)))
        if self.forces is not None:
            ok = ok and bool(np.all(np.isfinite(self.forces)))
        return ok

    def equals(self, other: "Snapshot") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return np.array_equal(a, b)

        return (
            self.step == other.step
            and same(self.ids, other.ids)
            and same(self.types, other.types)
            and same(self.positions, other.positions)
            and same(self.box, other.box)
            and same(self.forces, other.forces)
            and same(self.velocities, other.velocities)
        )


@dataclass
class TrajectoryRecord:
    """Snapshots in step order plus how the run ended."""

    snapshots: list
    n0: Optional[int] = None
    status: str = "completed"
    crash_step: Optional[int] = None
    crash_reason: str = ""
    masses: tuple = ()

    def __post_init__(self):
        self.snapshots = list(self.snapshots)
        if self.n0 is None and self.snapshots:
            self.n0 = self.snapshots[0].n_atoms
        steps = [s.step for s in self.snapshots]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValidationError("snapshot steps must be strictly increasing")

    @property
    def num(self) -> int:
        return len(self.snapshots)

    @property
    def crashed(self) -> bool:
        return self.status == "crashed"

    def atom_count_changed(self) -> bool:
        return any(s.n_atoms != self.n0 for s in self.snapshots)


# ---------------------------------------------------------------- writer

def _f(x) -> str:
    return repr(float(x))


def snapshot_text(s: Snapshot) -> str:
    cols = ["id", "type", "x", "y", "z"]
    if s.forces is not None:
        cols += ["fx", "fy", "fz"]
    if s.velocities is not None:
        cols += ["vx", "vy", "vz"]
    lines = [
        "ITEM: TIMESTEP", str(int(s.step)),
        "ITEM: NUMBER OF ATOMS", str(s.n_atoms),
        "ITEM: BOX BOUNDS pp pp pp",
    ]
    lines += [f"{_f(lo)} {_f(hi)}" for lo, hi in s.box]
    lines.append("ITEM: ATOMS " + " ".join(cols))
    for i in range(s.n_atoms):
        row = [str(int(s.ids[i])), str(int(s.types[i]))] + [_f(v) for v in s.positions[i]]
        if s.forces is not None:
            row += [_f(v) for v in s.forces[i]]
        if s.velocities is not None:
            row += [_f(v) for v in s.velocities[i]]
        lines.append(" ".join(row))
    return "\n".join(lines) + "\n"


def dump_text(snapshots: Sequence[Snapshot]) -> str:
    return "".join(snapshot_text(s) for s in snapshots)


def thermo_text(record: TrajectoryRecord) -> str:
    """Sidecar with per-snapshot temperature and the run's exit status."""
    lines = ["# step temp"]
    for s in record.snapshots:
        lines.append(f"{int(s.step)} {_f(s.temperature if s.temperature is not None else math.nan)}")
    status = f"# status {record.status}"
    if record.crashed:
        status += f" step {record.crash_step} reason {record.crash_reason or 'unknown'}"
    lines.append(status)
    if record.n0 is not None:
        lines.append(f"# n0 {record.n0}")
    return "\n".join(lines) + "\n"


def thermo_path(dump_path) -> Path:
    p = Path(dump_path)
    return p.with_name(p.name + ".thermo")


def write_dump(record, path, thermo: bool = True):
    """Write snapshots (a TrajectoryRecord or a sequence) and, optionally, the sidecar."""
    snaps = record.snapshots if isinstance(record, TrajectoryRecord) else list(record)
    atomic_write(path, dump_text(snaps))
    if thermo and isinstance(record, TrajectoryRecord):
        atomic_write(thermo_path(path), thermo_text(record))


# ---------------------------------------------------------------- reader

class _Lines:
    """Line cursor that knows each line's byte offset."""

    def __init__(self, text: str):
        self.lines = text.splitlines(keepends=True)
        self.offsets = np.cumsum([0] + [len(l.encode()) for l in self.lines]).tolist()
        self.i = 0

    def at_end(self) -> bool:
        while self.i < len(self.lines) and not self.lines[self.i].strip():
            self.i += 1
        return self.i >= len(self.lines)

    def offset(self) -> int:
        return self.offsets[min(self.i, len(self.lines))]

    def next(self, what: str) -> str:
        if self.i >= len(self.lines):
            raise ParseError(f"truncated snapshot: expected {what}", offset=self.offset())
        line = self.lines[self.i].strip()
        self.i += 1
        return line

    def item(self, name: str) -> str:
        line = self.next(f"ITEM: {name}")
        if not line.startswith("ITEM:") or not line[5:].strip().startswith(name):
            raise ParseError(f"expected 'ITEM: {name}', got {line[:40]!r}", offset=self.offsets[self.i - 1])
        return line[5:].strip()[len(name):].strip()


def _column(cols, name):
    for alias in _POS_ALIASES.get(name, (name,)):
        if alias in cols:
            return cols.index(alias)
    return None


def _parse_snapshot(cur: _Lines) -> Snapshot:
    cur.item("TIMESTEP")
    start = cur.offsets[cur.i]
    try:
        step = int(cur.next("timestep value").split()[0])
    except (ValueError, IndexError) as exc:
        raise ParseError("bad timestep value", offset=start) from exc
    cur.item("NUMBER OF ATOMS")
    start = cur.offsets[cur.i]
    try:
        n = int(cur.next("atom count").split()[0])
    except (ValueError, IndexError) as exc:
        raise ParseError("bad atom count", offset=start) from exc
    flags = cur.item("BOX BOUNDS").split()
    if any(flag in ("xy", "xz", "yz") for flag in flags):
        raise SchemaError("triclinic boxes are not supported", offset=cur.offsets[cur.i - 1])
    box = np.zeros((3, 2))
    for k in range(3):
        start = cur.offsets[cur.i]
        toks = cur.next("box bounds").split()
        try:
            box[k] = [float(toks[0]), float(toks[1])]
        except (ValueError, IndexError) as exc:
            raise ParseError("bad box bounds", offset=start) from exc
    cols = cur.item("ATOMS").split()
    missing = [c for c in MANDATORY if _column(cols, c) is None]
    if missing:
        raise SchemaError(f"dump lacks mandatory columns {missing}", offset=cur.offsets[cur.i - 1])
    data = np.empty((n, len(cols)))
    for r in range(n):
        start = cur.offsets[min(cur.i, len(cur.lines))]
        if cur.i >= len(cur.lines) or cur.lines[cur.i].startswith("ITEM:"):
            raise ParseError(f"truncated snapshot: {r} of {n} atom rows present", offset=start)
        toks = cur.next("atom row").split()
        if len(toks) != len(cols):
            raise ParseError(f"atom row has {len(toks)} fields, header has {len(cols)}", offset=start)
        try:
            data[r] = [float(t) for t in toks]
        except ValueError as exc:
            raise ParseError("non-numeric atom row", offset=start) from exc

    def block(names):
        idx = [_column(cols, c) for c in names]
        return None if any(i is None for i in idx) else data[:, idx].copy()

    ids = data[:, cols.index("id")].astype(np.int64)
    order = np.argsort(ids, kind="stable")
    pick = lambda a: None if a is None else a[order]
    return Snapshot(
        step=step,
        ids=ids[order],
        types=data[order, cols.index("type")].astype(np.int64),
        positions=pick(block(("x", "y", "z"))),
        box=box,
        forces=pick(block(("fx", "fy", "fz"))),
        velocities=pick(block(("vx", "vy", "vz"))),
    )


def parse_thermo(path) -> dict:
    """``{"temps": {step: T}, "status": str, "crash_step": int|None, "reason": str, "n0": int|None}``."""
    out = {"temps": {}, "status": "completed", "crash_step": None, "reason": "", "n0": None}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            toks = line[1:].split()
            if toks[:1] == ["status"] and len(toks) >= 2:
                out["status"] = toks[1]
                if "step" in toks:
                    out["crash_step"] = int(toks[toks.index("step") + 1])
                if "reason" in toks:
                    out["reason"] = " ".join(toks[toks.index("reason") + 1 :])
            elif toks[:1] == ["n0"] and len(toks) == 2:
                out["n0"] = int(toks[1])
            continue
        toks = line.split()
        try:
            out["temps"][int(toks[0])] = float(toks[1])
        except (ValueError, IndexError) as exc:
            raise ParseError("bad thermo row", lineno=lineno) from exc
    return out


def parse_dump_text(text: str) -> list:
    cur = _Lines(text)
    snaps = []
    while not cur.at_end():
        snaps.append(_parse_snapshot(cur))
    return snaps


def parse_dump(path, thermo=None, masses: Sequence[float] = ()) -> TrajectoryRecord:
    """Read a dump file into a :class:`TrajectoryRecord`.

    Temperatures come from the ``.thermo`` sidecar (or ``thermo``) when
    present, otherwise from velocities when ``masses`` (per type) are given.
    """
    snaps = parse_dump_text(Path(path).read_text())
    thermo = Path(thermo) if thermo is not None else thermo_path(path)
    info = parse_thermo(thermo) if thermo.exists() else None
    masses = tuple(float(m) for m in masses)
    out = []
    for s in snaps:
        temp = None
        if info is not None and s.step in info["temps"]:
            temp = info["temps"][s.step]
        elif s.velocities is not None and masses:
            temp = kinetic_temperature(np.asarray(masses)[s.types - 1], s.velocities)
        out.append(Snapshot(s.step, s.ids, s.types, s.positions, s.box, s.forces, s.velocities, temp))
    return TrajectoryRecord(
        snapshots=out,
        n0=(info or {}).get("n0") or (out[0].n_atoms if out else None),
        status=info["status"] if info else "completed",
        crash_step=info["crash_step"] if info else None,
        crash_reason=info["reason"] if info else "",
        masses=masses,
    )
