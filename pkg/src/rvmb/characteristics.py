"""Curved phase-space characteristics and their momentum derivatives.

A charged particle in given fields follows

    dX/dtau = c Phat,          Phat = P / P0,
    dP/dtau = -E(tau, X) - Phat x B(tau, X),

with P0 = sqrt(m^2 c^2 + |P|^2). The momentum derivatives (dX/dp, dP/dp)
of the flow map obey the variational system obtained by differentiating
through the right-hand side; both are integrated jointly with classical
fixed-step RK4 so the order is verifiable. The Jacobian det(dX/dp)
vanishes cubically as tau -> t with the field-free determinant

    D = (c |tau - t|)^3 m^2 c^2 / (P0)^5

as leading coefficient; `jacobian_band_check` reports whether the true
determinant stays within a configurable band around D for weak fields and
short times.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .constants import PhysicalConstants
from .kinematics import energy

__all__ = [
    "CharacteristicState",
    "UniformEMSampler",
    "CallableEMSampler",
    "free_streaming_dXdp",
    "integrate_characteristic",
    "integrate_variational",
    "jacobian_band_check",
    "write_trajectory_csv",
]


@dataclass
class CharacteristicState:
    """Trajectory point: position, momentum, and their p-derivatives.

    dXdp[i, j] = dX_j / dp_i and likewise dPdp. At tau = t the flow map
    is the identity in p, so dXdp = 0 and dPdp = I.
    """

    X: np.ndarray
    P: np.ndarray
    dXdp: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    dPdp: np.ndarray = field(default_factory=lambda: np.eye(3))

    def det_dXdp(self) -> float:
        return float(np.linalg.det(self.dXdp))


@dataclass(frozen=True)
class UniformEMSampler:
    """Spatially and temporally constant fields; gradients are zero."""

    E: np.ndarray
    B: np.ndarray

    def sample(self, t: float, x: np.ndarray):
        z = np.zeros((3, 3))
        return np.asarray(self.E, float), np.asarray(self.B, float), z, z


@dataclass(frozen=True)
class CallableEMSampler:
    """Fields from callables (t, x) -> 3-vector.

    Gradients come from the optional analytic callables with layout
    grad[m, j] = d F_j / d x_m, otherwise from centered differences with
    step fd_h.
    """

    E_fn: object
    B_fn: object
    gradE_fn: object = None
    gradB_fn: object = None
    fd_h: float = 1e-6

    def _fd_grad(self, fn, t: float, x: np.ndarray) -> np.ndarray:
        g = np.empty((3, 3))
        for m in range(3):
            dx = np.zeros(3)
            dx[m] = self.fd_h
            g[m] = (np.asarray(fn(t, x + dx), float) - np.asarray(fn(t, x - dx), float)) / (
                2.0 * self.fd_h
            )
        return g

    def sample(self, t: float, x: np.ndarray):
        E = np.asarray(self.E_fn(t, x), float)
        B = np.asarray(self.B_fn(t, x), float)
        gE = (
            np.asarray(self.gradE_fn(t, x), float)
            if self.gradE_fn is not None
            else self._fd_grad(self.E_fn, t, x)
        )
        gB = (
            np.asarray(self.gradB_fn(t, x), float)
            if self.gradB_fn is not None
            else self._fd_grad(self.B_fn, t, x)
        )
        return E, B, gE, gB

    def check_gradients(self, t: float, x: np.ndarray, h: float = 1e-5) -> float:
        """Largest mismatch between supplied gradients and differences."""
        _, _, gE, gB = self.sample(t, x)
        fE = self._fd_grad(self.E_fn, t, np.asarray(x, float))
        fB = self._fd_grad(self.B_fn, t, np.asarray(x, float))
        return float(max(np.abs(gE - fE).max(), np.abs(gB - fB).max()))


def free_streaming_dXdp(t: float, tau: float, p: np.ndarray, k: PhysicalConstants) -> np.ndarray:
    """Closed-form dX/dp for E = B = 0.

    dX_j/dp_i = c (tau - t) [ (P0)^2 delta_ij - p_i p_j ] / (P0)^3.
    """
    p = np.asarray(p, float)
    p0 = float(energy(p, k))
    return k.c * (tau - t) * (p0 * p0 * np.eye(3) - np.outer(p, p)) / p0**3


def _phat_jacobian(P: np.ndarray, p0: float, k: PhysicalConstants) -> np.ndarray:
    """d(c Phat_j)/dP_l = c [ (P0)^2 delta_jl - P_j P_l ] / (P0)^3."""
    return k.c * (p0 * p0 * np.eye(3) - np.outer(P, P)) / p0**3


def _rhs(tau: float, y: np.ndarray, sampler, k: PhysicalConstants, variational: bool) -> np.ndarray:
    X = y[0:3]
    P = y[3:6]
    p0 = float(energy(P, k))
    phat = P / p0
    E, B, gE, gB = sampler.sample(tau, X)
    dX = k.c * phat
    dP = -E - np.cross(phat, B)
    if not variational:
        return np.concatenate([dX, dP])
    dXdp = y[6:15].reshape(3, 3)
    dPdp = y[15:24].reshape(3, 3)
    J = _phat_jacobian(P, p0, k)  # symmetric
    ddXdp = dPdp @ J
    dphat_dp = dPdp @ (J / k.c)
    # rows indexed by p_i: dPdp' = -dXdp.gradE - dphat x B - phat x (dXdp.gradB)
    ddPdp = -(dXdp @ gE) - np.cross(dphat_dp, B[None, :]) - np.cross(
        phat[None, :], dXdp @ gB
    )
    return np.concatenate([dX, dP, ddXdp.reshape(-1), ddPdp.reshape(-1)])


def _integrate(
    t: float,
    x: np.ndarray,
    p: np.ndarray,
    sampler,
    tau_end: float,
    step: float,
    k: PhysicalConstants,
    variational: bool,
) -> tuple[np.ndarray, list[CharacteristicState]]:
    if step <= 0.0:
        raise ValueError("step must be positive")
    x = np.asarray(x, float)
    p = np.asarray(p, float)
    y = np.concatenate([x, p, np.zeros(9), np.eye(3).reshape(-1)])
    if not variational:
        y = y[:6]

    span = tau_end - t
    nfull = int(abs(span) // step)
    sizes = [np.sign(span) * step] * nfull
    rem = span - np.sign(span) * step * nfull
    if abs(rem) > 1e-15 * max(1.0, abs(span)):
        sizes.append(rem)

    def unpack(yv: np.ndarray) -> CharacteristicState:
        if variational:
            return CharacteristicState(
                X=yv[0:3].copy(),
                P=yv[3:6].copy(),
                dXdp=yv[6:15].reshape(3, 3).copy(),
                dPdp=yv[15:24].reshape(3, 3).copy(),
            )
        # derivative matrices are not tracked on this path
        nan33 = np.full((3, 3), np.nan)
        return CharacteristicState(X=yv[0:3].copy(), P=yv[3:6].copy(), dXdp=nan33, dPdp=nan33.copy())

    taus = [t]
    out = [unpack(np.concatenate([x, p, np.zeros(9), np.eye(3).reshape(-1)]))]
    tau = t
    for h in sizes:
        k1 = _rhs(tau, y, sampler, k, variational)
        k2 = _rhs(tau + 0.5 * h, y + 0.5 * h * k1, sampler, k, variational)
        k3 = _rhs(tau + 0.5 * h, y + 0.5 * h * k2, sampler, k, variational)
        k4 = _rhs(tau + h, y + h * k3, sampler, k, variational)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        tau = tau + h
        taus.append(tau)
        out.append(unpack(y))
    return np.asarray(taus), out


def integrate_characteristic(
    t: float,
    x: np.ndarray,
    p: np.ndarray,
    sampler,
    tau_end: float,
    step: float,
    k: PhysicalConstants,
) -> tuple[np.ndarray, list[CharacteristicState]]:
    """Integrate (X, P) from tau = t to tau_end with fixed-step RK4.

    The final step is shortened to land exactly on tau_end. Derivative
    matrices in the returned states are nan; use `integrate_variational`
    to track them.
    """
    return _integrate(t, x, p, sampler, tau_end, step, k, variational=False)


def integrate_variational(
    t: float,
    x: np.ndarray,
    p: np.ndarray,
    sampler,
    tau_end: float,
    step: float,
    k: PhysicalConstants,
) -> tuple[np.ndarray, list[CharacteristicState]]:
    """Integrate (X, P, dXdp, dPdp) jointly with fixed-step RK4.

    The sampler must supply field gradients. Initial data dXdp = 0,
    dPdp = I at tau = t.
    """
    return _integrate(t, x, p, sampler, tau_end, step, k, variational=True)


def jacobian_band_check(
    t: float,
    x: np.ndarray,
    p: np.ndarray,
    sampler,
    tau: float,
    step: float,
    k: PhysicalConstants,
    kappa_low: float = 0.5,
    kappa_high: float = 2.0,
) -> dict:
    """Compare |det(dX/dp)| at tau against the field-free anchor band.

    Returns {det, anchor, lower, upper, in_band}; the anchor is
    (c |tau - t|)^3 m^2 c^2 / (P0)^5, exact when E = B = 0.
    """
    _, states = integrate_variational(t, x, p, sampler, tau, step, k)
    det = abs(states[-1].det_dXdp())
    p0 = float(energy(np.asarray(p, float), k))
    anchor = (k.c * abs(tau - t)) ** 3 * k.mc**2 / p0**5
    lo, hi = kappa_low * anchor, kappa_high * anchor
    return {
        "det": det,
        "anchor": anchor,
        "lower": lo,
        "upper": hi,
        "in_band": bool(lo <= det <= hi),
    }


def write_trajectory_csv(path, taus: np.ndarray, states: list[CharacteristicState]) -> None:
    """Dump a trajectory as CSV: tau, X1..3, P1..3, det(dXdp)."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["tau", "X1", "X2", "X3", "P1", "P2", "P3", "det_dXdp"])
        for tv, s in zip(taus, states):
            det = s.det_dXdp() if np.all(np.isfinite(s.dXdp)) else float("nan")
            wr.writerow(
                [f"{tv:.17g}"]
                + [f"{v:.17g}" for v in s.X]
                + [f"{v:.17g}" for v in s.P]
                + [f"{det:.17g}"]
            )
