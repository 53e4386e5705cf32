"""Physical constants and unit bookkeeping.

Everything downstream takes a PhysicalConstants instance instead of reading
globals, so a single experiment can mix unit systems in principle. In
practice the test suite runs in natural units (all ones); the retarded-field
evaluator requires them (see fields.gs_eval).
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class PhysicalConstants:
    """Particle mass, speed of light, Boltzmann constant, unit charge.

    beta is the polynomial weight exponent used by the weighted kernel
    machinery; it must be at least 8 for the weighted bounds to close.
    n_bar is the uniform neutralizing background density entering the
    Gauss constraint of the background field system.
    """

    m: float = 1.0
    c: float = 1.0
    k_B: float = 1.0
    e_minus: float = 1.0
    n_bar: float = 1.0
    beta: float = 8.0

    def __post_init__(self) -> None:
        for name in ("m", "c", "k_B", "e_minus"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.beta < 8.0:
            raise ValueError(f"beta must be >= 8, got {self.beta}")

    @property
    def mc(self) -> float:
        return self.m * self.c

    @property
    def mc2(self) -> float:
        return self.m * self.c * self.c

    def is_natural(self, tol: float = 0.0) -> bool:
        """True when m = c = k_B = e_minus = 1 (up to tol)."""
        return all(
            abs(getattr(self, name) - 1.0) <= tol
            for name in ("m", "c", "k_B", "e_minus")
        )


NATURAL = PhysicalConstants()
