import numpy as np
import pytest

from corrstab.frame import Dataset, Frame
from corrstab.md import load_preset, ref_energy_forces


def random_frame(rng, n=8, box=6.0, n_species=2, min_dist=1.2, forces=True, velocities=False):
    """Random periodic frame with a hard-core separation so features stay tame."""
    cell = np.full(3, float(box))
    pos = []
    while len(pos) < n:
        trial = rng.uniform(0, cell)
        ok = True
        for p in pos:
            d = trial - p
            d -= cell * np.round(d / cell)
            if np.dot(d, d) < min_dist**2:
                ok = False
                break
        if ok:
            pos.append(trial)
    species = rng.integers(1, n_species + 1, size=n)
    species[:n_species] = np.arange(1, n_species + 1)
    masses = tuple(float(m) for m in rng.uniform(1.0, 50.0, size=n_species))
    return Frame(
        species,
        np.array(pos),
        cell,
        energy=float(rng.normal()) if forces else None,
        forces=rng.normal(size=(n, 3)) if forces else None,
        velocities=rng.normal(size=(n, 3)) * 0.01 if velocities else None,
        masses=masses,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def lj():
    return load_preset("lj-mixture")


@pytest.fixture(scope="session")
def lj_frames(lj):
    """Small labelled dataset from the reference potential (cheap, no MD)."""
    rng = np.random.default_rng(7)
    frames = []
    for _ in range(6):
        fr = random_frame(rng, n=12, box=9.2, min_dist=1.9, forces=False)
        fr = fr.with_(masses=lj.masses)
        e, f = ref_energy_forces(lj, fr)
        frames.append(fr.with_(energy=e, forces=f))
    return Dataset(frames, "1:1")
