"""Internal unit system: eV, Angstrom, fs, amu, K.

The mass-velocity conversion is derived from CODATA values rather than typed
in, so it stays consistent with scipy's constant tables.
"""

from scipy import constants as _c

KB = _c.physical_constants["Boltzmann constant in eV/K"][0]  # 8.617333262e-5 eV/K

#: kinetic energy of 1 amu moving at 1 A/fs, in eV (amu*A^2/fs^2 -> eV)
MVV2E = _c.atomic_mass * (_c.angstrom / _c.femto) ** 2 / _c.electron_volt

#: acceleration in A/fs^2 of 1 amu under a 1 eV/A force
FTM2V = 1.0 / MVV2E

EV_TO_MEV = 1000.0


def kinetic_energy(masses, velocities):
    """Total kinetic energy in eV; masses per atom (amu), velocities in A/fs."""
    import numpy as np

    m = np.asarray(masses, dtype=float)
    v = np.asarray(velocities, dtype=float)
    return 0.5 * MVV2E * float(np.sum(m[:, None] * v * v))


def temperature(masses, velocities):
    """Instantaneous kinetic temperature with 3n degrees of freedom."""
    n = len(masses)
    if n == 0:
        return 0.0
    return 2.0 * kinetic_energy(masses, velocities) / (3.0 * n * KB)


def ev_to_mvv(energy):
    return energy / MVV2E


def mvv_to_ev(energy):
    return energy * MVV2E
