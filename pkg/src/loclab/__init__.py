"""loclab: numerics for one-dimensional continuum random Schrodinger operators.

Finite-volume spectra via phase shooting, phase/amplitude flow identities,
single-cell transfer kernels with Nystrom discretization, and Monte Carlo
eigenfunction correlators with decay-rate cross checks.
"""

__version__ = "0.1.0"
