"""Dataset file formats: extended-XYZ-style text and JSON frames."""

from __future__ import annotations

import json
import os
import re
import tempfile
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .frame import Dataset, Frame

FORMATS = ("xyz-extended", "json-frames")
_HEADER = "# corrstab-dataset"
_KV = re.compile(r'(\w+)=("[^"]*"|\S+)')


def atomic_write(path, text: str):
    """Write ``text`` to ``path`` through a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def guess_format(path) -> str:
    return "json-frames" if str(path).endswith(".json") else "xyz-extended"


def _fmt(x: float) -> str:
    return repr(float(x))


def _bools(flags) -> str:
    return " ".join("T" if b else "F" for b in flags)


def _frame_to_xyz(frame: Frame) -> list:
    props = ["species:I:1", "pos:R:3"]
    if frame.forces is not None:
        props.append("forces:R:3")
    if frame.velocities is not None:
        props.append("velo:R:3")
    comment = []
    if frame.energy is not None:
        comment.append(f"energy={_fmt(frame.energy)}")
    comment.append('cell="' + " ".join(_fmt(c) for c in frame.cell) + '"')
    comment.append(f'pbc="{_bools(frame.pbc)}"')
    if frame.masses:
        comment.append('masses="' + " ".join(_fmt(m) for m in frame.masses) + '"')
    comment.append("Properties=" + ":".join(props))
    lines = [str(frame.n_atoms), " ".join(comment)]
    for i in range(frame.n_atoms):
        cols = [str(int(frame.species[i]))] + [_fmt(x) for x in frame.positions[i]]
        if frame.forces is not None:
            cols += [_fmt(x) for x in frame.forces[i]]
        if frame.velocities is not None:
            cols += [_fmt(x) for x in frame.velocities[i]]
        lines.append(" ".join(cols))
    return lines


def _parse_comment(line: str, lineno: int) -> dict:
    info = {}
    for key, value in _KV.findall(line):
        info[key] = value.strip('"')
    if "cell" not in info:
        raise ParseError("frame comment lacks cell=", lineno=lineno)
    return info


def _floats(text: str, n: int, what: str, lineno: int) -> list:
    try:
        vals = [float(t) for t in text.split()]
    except ValueError as exc:
        raise ParseError(f"non-numeric {what}", lineno=lineno) from exc
    if len(vals) != n:
        raise ParseError(f"{what} needs {n} values, got {len(vals)}", lineno=lineno)
    return vals


def _columns_from_properties(props: str | None, ncols: int, lineno: int) -> tuple:
    if props is None:
        if ncols == 4:
            return False, False
        if ncols == 7:
            return True, False
        if ncols == 10:
            return True, True
        raise ParseError(f"cannot infer per-atom columns from {ncols} fields", lineno=lineno)
    fields = props.split(":")
    names = fields[0::3]
    return "forces" in names, "velo" in names


def _read_xyz(text: str) -> Dataset:
    lines = text.splitlines()
    composition = ""
    frames = []
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        if not line:
            i += 1
            continue
        if line.startswith("#"):
            if line.startswith(_HEADER):
                for key, value in _KV.findall(line):
                    if key == "composition":
                        composition = value.strip('"')
            i += 1
            continue
        try:
            n = int(line)
        except ValueError as exc:
            raise ParseError(f"expected atom count, got {line!r}", lineno=i + 1) from exc
        if i + 1 >= len(lines):
            raise ParseError("frame truncated before comment line", lineno=i + 1)
        info = _parse_comment(lines[i + 1], i + 2)
        cell = _floats(info["cell"], 3, "cell", i + 2)
        pbc = tuple(t.upper().startswith("T") for t in info.get("pbc", "T T T").split())
        masses = tuple(float(m) for m in info["masses"].split()) if "masses" in info else ()
        energy = float(info["energy"]) if "energy" in info else None
        rows = lines[i + 2 : i + 2 + n]
        if len(rows) < n:
            raise ValidationError(
                f"frame at line {i + 1} declares {n} atoms but only {len(rows)} rows follow"
            )
        has_f = has_v = None
        species, pos, frc, vel = [], [], [], []
        for k, row in enumerate(rows):
            lineno = i + 3 + k
            toks = row.split()
            if has_f is None:
                has_f, has_v = _columns_from_properties(info.get("Properties"), len(toks), lineno)
                width = 4 + 3 * has_f + 3 * has_v
            if len(toks) != width:
                raise ValidationError(
                    f"atom row at line {lineno} has {len(toks)} columns, expected {width}"
                )
            try:
                species.append(int(toks[0]))
                vals = [float(t) for t in toks[1:]]
            except ValueError as exc:
                raise ParseError("non-numeric atom row", lineno=lineno) from exc
            pos.append(vals[0:3])
            if has_f:
                frc.append(vals[3:6])
            if has_v:
                vel.append(vals[3 + 3 * has_f : 6 + 3 * has_f])
        frames.append(
            Frame(
                species=species,
                positions=np.array(pos).reshape(-1, 3),
                cell=cell,
                pbc=pbc,
                energy=energy,
                forces=np.array(frc).reshape(-1, 3) if has_f else None,
                velocities=np.array(vel).reshape(-1, 3) if has_v else None,
                masses=masses,
            )
        )
        i += 2 + n
    return Dataset(frames, composition)


def _frame_to_dict(frame: Frame) -> dict:
    out = {
        "species": frame.species.tolist(),
        "positions": frame.positions.tolist(),
        "cell": frame.cell.tolist(),
        "pbc": list(frame.pbc),
        "masses": list(frame.masses),
    }
    if frame.energy is not None:
        out["energy"] = frame.energy
    if frame.forces is not None:
        out["forces"] = frame.forces.tolist()
    if frame.velocities is not None:
        out["velocities"] = frame.velocities.tolist()
    return out


def _frame_from_dict(obj: dict, index: int) -> Frame:
    try:
        n = len(obj["species"])
        positions = np.array(obj["positions"], dtype=float).reshape(n, 3) if n else np.zeros((0, 3))
        return Frame(
            species=obj["species"],
            positions=positions,
            cell=obj["cell"],
            pbc=tuple(obj.get("pbc", (True, True, True))),
            energy=obj.get("energy"),
            forces=obj.get("forces"),
            velocities=obj.get("velocities"),
            masses=tuple(obj.get("masses", ())),
        )
    except KeyError as exc:
        raise ValidationError(f"frame {index} lacks field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"frame {index}: {exc}") from exc


def _read_json(text: str) -> Dataset:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", lineno=exc.lineno) from exc
    if isinstance(obj, list):
        obj = {"frames": obj}
    frames = [_frame_from_dict(f, k) for k, f in enumerate(obj.get("frames", []))]
    return Dataset(frames, obj.get("composition", ""))


def read_dataset(path, format: str | None = None) -> Dataset:
    fmt = format or guess_format(path)
    text = Path(path).read_text()
    if fmt == "xyz-extended":
        return _read_xyz(text)
    if fmt == "json-frames":
        return _read_json(text)
    raise ValueError(f"unknown dataset format {fmt!r}; choose from {FORMATS}")


def dataset_to_text(ds: Dataset, format: str = "xyz-extended") -> str:
    if format == "xyz-extended":
        lines = [f'{_HEADER} composition="{ds.composition}" frames={len(ds)}']
        for frame in ds.frames:
            lines.extend(_frame_to_xyz(frame))
        return "\n".join(lines) + "\n"
    if format == "json-frames":
        obj = {"composition": ds.composition, "frames": [_frame_to_dict(f) for f in ds.frames]}
        return json.dumps(obj) + "\n"
    raise ValueError(f"unknown dataset format {format!r}; choose from {FORMATS}")


def write_dataset(ds: Dataset, path, format: str | None = None):
    fmt = format or guess_format(path)
    atomic_write(path, dataset_to_text(ds, fmt))


