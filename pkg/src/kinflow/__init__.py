"""Numerics for stochastic kinetic transport and kinetic chemotaxis.

Submodules: ``brownian`` (seeded path ensembles), ``noise`` (noise catalog),
``flow`` (stochastic characteristic flows), ``fields`` (phase-space grids,
mixed norms, Bessel solve, exponent admissibility), ``kernel`` (turning
kernels), ``solver`` (semi-Lagrangian Picard solver), ``analysis``
(experiment-level checks) and ``cli``.
"""
__version__ = "0.1.0"
