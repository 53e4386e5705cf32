"""Numerical components of the relativistic Vlasov-Maxwell-Boltzmann system.

The package covers collision kinematics, Juttner equilibria and their
moments, the linearized collision operator with its closed-form kernel,
characteristic curves of the Vlasov flow, retarded-field and staggered-grid
Maxwell solvers, and the coefficient hierarchy that connects the kinetic
system to its relativistic Euler-Maxwell limit. Each module verifies its own
invariants; the `rvmb` command line drives end-to-end experiments and writes
delimited reports with accompanying figures.
"""

from .constants import NATURAL, PhysicalConstants

__all__ = ["NATURAL", "PhysicalConstants"]
__version__ = "0.1.0"
