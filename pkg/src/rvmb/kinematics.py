"""Relativistic collision kinematics.

Four-momentum algebra, the invariants s and g, the elastic post-collision
map, and the two Lorentz boosts (center-of-momentum and rest-frame) that the
kernel derivations rely on. All functions are pure; momenta are plain
length-3 float arrays (a thin Momentum3 wrapper is accepted anywhere).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constants import PhysicalConstants

# Minkowski metric, signature (-,+,+,+), index order (0,1,2,3)
ETA = np.diag([-1.0, 1.0, 1.0, 1.0])


class DegenerateGeometryError(ValueError):
    """Raised when a boost frame is undefined (collinear or equal momenta)."""


@dataclass(frozen=True)
class Momentum3:
    """A single 3-momentum."""

    p: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.p, dtype=float)
        if arr.shape != (3,):
            raise ValueError(f"momentum must have shape (3,), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("momentum components must be finite")
        object.__setattr__(self, "p", arr)


@dataclass(frozen=True)
class FourVector:
    """Four-vector with signature (-,+,+,+)."""

    x0: float
    x: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.x, dtype=float)
        if arr.shape != (3,):
            raise ValueError(f"spatial part must have shape (3,), got {arr.shape}")
        object.__setattr__(self, "x", arr)

    def as_array(self) -> np.ndarray:
        return np.concatenate(([self.x0], self.x))

    def minkowski_dot(self, other: "FourVector") -> float:
        return float(-self.x0 * other.x0 + self.x @ other.x)


def _as_p(p) -> np.ndarray:
    if isinstance(p, Momentum3):
        return p.p
    return np.asarray(p, dtype=float)


def energy(p, k: PhysicalConstants):
    """Energy p0 = sqrt(m^2 c^2 + |p|^2). Broadcasts over leading axes."""
    arr = _as_p(p)
    p2 = np.sum(arr * arr, axis=-1)
    return np.sqrt(k.mc * k.mc + p2)


def phat(p, k: PhysicalConstants):
    """Normalized velocity p / p0; |phat| < 1 strictly."""
    arr = _as_p(p)
    return arr / energy(arr, k)[..., None]


def s_and_g(p, q, k: PhysicalConstants):
    """Invariant energy s and relative momentum g.

    s = 2(p0 q0 - p.q + m^2 c^2),  g = sqrt(2(p0 q0 - p.q - m^2 c^2)),
    so s - g^2 = 4 m^2 c^2 identically.
    """
    pa, qa = _as_p(p), _as_p(q)
    p0 = energy(pa, k)
    q0 = energy(qa, k)
    dot = np.sum(pa * qa, axis=-1)
    m2c2 = k.mc * k.mc
    core = p0 * q0 - dot
    s = 2.0 * (core + m2c2)
    # core >= m2c2 by Cauchy-Schwarz on the mass shell; clip rounding dust
    g = np.sqrt(np.maximum(2.0 * (core - m2c2), 0.0))
    return s, g


def _check_unit(omega) -> np.ndarray:
    w = np.asarray(omega, dtype=float)
    norms = np.sqrt(np.sum(w * w, axis=-1))
    if np.any(np.abs(norms - 1.0) > 1e-12):
        raise ValueError("omega must be a unit vector to 1e-12")
    return w


def transfer_scalar(p, q, omega, k: PhysicalConstants):
    """Momentum transfer a(p,q,omega) along omega for the elastic map."""
    pa, qa, w = _as_p(p), _as_p(q), np.asarray(omega, dtype=float)
    p0 = energy(pa, k)
    q0 = energy(qa, k)
    e = p0 + q0
    j = p0[..., None] * qa - q0[..., None] * pa
    wj = np.sum(w * j, axis=-1)
    wpq = np.sum(w * (pa + qa), axis=-1)
    denom = e * e - wpq * wpq
    return 2.0 * e * wj / denom


def transition_rate(p, q, omega, k: PhysicalConstants):
    """Angular factor B(p,q,omega) of the hard-ball collision integrand.

    B = (p0+q0)^2 |omega.(p0 q - q0 p)| / [(p0+q0)^2 - (omega.(p+q))^2]^2.
    """
    pa, qa, w = _as_p(p), _as_p(q), np.asarray(omega, dtype=float)
    p0 = energy(pa, k)
    q0 = energy(qa, k)
    e = p0 + q0
    j = p0[..., None] * qa - q0[..., None] * pa
    wj = np.sum(w * j, axis=-1)
    wpq = np.sum(w * (pa + qa), axis=-1)
    denom = e * e - wpq * wpq
    return e * e * np.abs(wj) / (denom * denom)


@dataclass(frozen=True)
class CollisionGeometry:
    """Scattering geometry for one (p, q, omega) triple."""

    omega: np.ndarray
    s: float
    g: float
    a: float

    def __post_init__(self) -> None:
        w = _check_unit(self.omega)
        object.__setattr__(self, "omega", w)


def collision_geometry(p, q, omega, k: PhysicalConstants) -> CollisionGeometry:
    w = _check_unit(omega)
    s, g = s_and_g(p, q, k)
    a = transfer_scalar(p, q, w, k)
    return CollisionGeometry(omega=w, s=float(s), g=float(g), a=float(a))


def post_collision(p, q, omega, k: PhysicalConstants):
    """Elastic post-collision pair p' = p + a*omega, q' = q - a*omega.

    Conserves total momentum, total energy, s and g exactly (the map is the
    relativistic hard-sphere exchange).
    """
    w = _check_unit(omega)
    pa, qa = _as_p(p), _as_p(q)
    a = transfer_scalar(pa, qa, w, k)
    shift = a[..., None] * w
    return pa + shift, qa - shift


def collision_jacobian_check(p, q, omega, k: PhysicalConstants, h: float = 1e-4) -> float:
    """Relative error of the finite-difference Jacobian of (p,q) -> (p',q').

    The exact absolute determinant is p'0 q'0 / (p0 q0). Central differences
    with step h give an O(h^2) approximation; the return value is
    |det_FD - exact| / exact.
    """
    if h <= 0.0:
        raise ValueError("finite-difference step h must be positive")
    w = _check_unit(omega)
    pa, qa = _as_p(p), _as_p(q)

    def fwd(z: np.ndarray) -> np.ndarray:
        pp, qp = post_collision(z[:3], z[3:], w, k)
        return np.concatenate([pp, qp])

    z0 = np.concatenate([pa, qa])
    jac = np.empty((6, 6))
    for i in range(6):
        dz = np.zeros(6)
        dz[i] = h
        jac[:, i] = (fwd(z0 + dz) - fwd(z0 - dz)) / (2.0 * h)
    det_fd = abs(np.linalg.det(jac))

    pp, qp = post_collision(pa, qa, w, k)
    exact = float(
        energy(pp, k) * energy(qp, k) / (energy(pa, k) * energy(qa, k))
    )
    return abs(det_fd - exact) / exact


def cm_boost(p, q, k: PhysicalConstants) -> np.ndarray:
    """Lorentz matrix sending p+q to (sqrt(s),0,0,0) and p-q to -(0,0,0,g).

    Rows are built from the total momentum, the normal p x q, and the
    relative spatial direction; the frame is undefined when g vanishes or
    p and q are collinear, which raises DegenerateGeometryError.
    """
    pa, qa = _as_p(p), _as_p(q)
    s, g = s_and_g(pa, qa, k)
    s, g = float(s), float(g)
    cross = np.cross(pa, qa)
    ncross = float(np.linalg.norm(cross))
    npa, nqa = float(np.linalg.norm(pa)), float(np.linalg.norm(qa))
    if g < 1e-10 * k.mc:
        raise DegenerateGeometryError(f"relative momentum g = {g:.3e} below tolerance")
    if ncross < 1e-10 * npa * nqa or ncross == 0.0:
        raise DegenerateGeometryError("momenta are collinear; p x q vanishes")

    p0 = float(energy(pa, k))
    q0 = float(energy(qa, k))
    rs = np.sqrt(s)
    # row vector r combines both momenta orthogonally to p+q and p x q
    r = pa * (-p0 * nqa * nqa + q0 * (pa @ qa)) + qa * (
        -q0 * npa * npa + p0 * (pa @ qa)
    )

    lam = np.empty((4, 4))
    lam[0, 0] = (p0 + q0) / rs
    lam[0, 1:] = -(pa + qa) / rs
    lam[1, 0] = 2.0 * ncross / (g * rs)
    lam[1, 1:] = 2.0 * r / (g * rs * ncross)
    lam[2, 0] = 0.0
    lam[2, 1:] = cross / ncross
    lam[3, 0] = (p0 - q0) / g
    lam[3, 1:] = -(pa - qa) / g
    return lam


def rest_boost(u, k: PhysicalConstants) -> np.ndarray:
    """Boost taking the rest four-velocity (c,0,0,0) to (u0, u)."""
    ua = np.asarray(u, dtype=float)
    u0 = float(np.sqrt(ua @ ua + k.c * k.c))
    rt = u0 / k.c
    out = np.eye(4)
    uu = float(ua @ ua)
    if uu == 0.0:
        return out
    v = k.c * ua / u0
    out[0, 0] = rt
    out[0, 1:] = rt * v / k.c
    out[1:, 0] = rt * v / k.c
    out[1:, 1:] = np.eye(3) + (rt - 1.0) * np.outer(v, v) / (v @ v)
    return out


def boost_four_vector(lam: np.ndarray, x0: float, x) -> tuple[float, np.ndarray]:
    """Apply a 4x4 boost to the four-vector (x0, x)."""
    vec = lam @ np.concatenate(([x0], np.asarray(x, dtype=float)))
    return float(vec[0]), vec[1:]


def metric_residual(lam: np.ndarray) -> float:
    """Max-norm of Lambda^T eta Lambda - eta; zero for exact Lorentz maps."""
    return float(np.max(np.abs(lam.T @ ETA @ lam - ETA)))
