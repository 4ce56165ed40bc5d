"""Numerical scattering toolkit for asymptotically hyperbolic surfaces.

Modules:
    geometry   - metrics in boundary normal form (profiles, validation)
    charts     - blow-up coordinate charts, symplectic lifts, sojourn shift
    phase_flow - lifted Hamiltonian flows, lens data, scattering relation
    wave1d     - per-mode wave solver, radiation fields, fundamental solution
    spectral   - frequency-domain radial solve and scattering multipliers
    scatop     - scattering-operator kernels and singular-support checks
    cli        - batch front door (lens / scatter / verify / validate-metric)
"""

from . import charts, geometry, phase_flow

__version__ = "0.1.0"
