"""Relativistic thermal equilibria and their moments.

Juttner distributions, the modified Bessel functions K_j evaluated from
their defining integral, moment tensors up to third order with closed-form
companions, the Synge-energy fluid closure, and the isentrope that links
density and temperature so the barotropic energy identity holds.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .constants import PhysicalConstants
from .kinematics import energy

FOUR_PI = 4.0 * np.pi


class QuadratureError(RuntimeError):
    """Raised when a refinement loop fails to reach the requested tolerance."""


class ClosureWindowError(ValueError):
    """Raised when the local/global temperature window T_M < T0 < 2 T_M fails."""


# ---------------------------------------------------------------------------
# Bessel K_j from the defining integral


_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _leggauss(n: int) -> tuple[np.ndarray, np.ndarray]:
    if n not in _GL_CACHE:
        _GL_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _GL_CACHE[n]


_BESSEL_CACHE: dict[tuple[int, float], float] = {}

# prefactors (2^j j!)/(2j)! for j = 0..3
_KJ_PREF = (1.0, 1.0, 1.0 / 3.0, 1.0 / 15.0)


def bessel_k(j: int, gamma: float) -> float:
    """Modified Bessel function K_j(gamma) for j in {0,1,2,3}.

    Evaluated as (2^j j!)/(2j)! * gamma^j * int_0^inf exp(-gamma cosh t)
    sinh(t)^{2j} dt with composite Gauss-Legendre panels, doubling the panel
    count until the result changes by less than 1e-12 relatively.
    """
    if j not in (0, 1, 2, 3):
        raise ValueError(f"j must be in {{0,1,2,3}}, got {j}")
    gamma = float(gamma)
    if gamma <= 0.0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    key = (j, gamma)
    if key in _BESSEL_CACHE:
        return _BESSEL_CACHE[key]

    # upper cutoff: gamma(cosh T - 1) - 2j log(sinh T + 1) > 80 kills the tail
    t_max = 1.0
    while gamma * (np.cosh(t_max) - 1.0) - 2 * j * np.log(np.sinh(t_max) + 1.0) < 80.0:
        t_max *= 1.25
        if t_max > 700.0:
            break

    x, w = _leggauss(32)
    prev = None
    panels = 2
    # scale out exp(-gamma) so tiny values at large gamma stay accurate
    for _ in range(20):
        edges = np.linspace(0.0, t_max, panels + 1)
        mids = 0.5 * (edges[:-1] + edges[1:])
        half = 0.5 * (edges[1] - edges[0])
        t = (mids[:, None] + half * x[None, :]).ravel()
        ww = np.broadcast_to(half * w[None, :], (panels, x.size)).ravel()
        f = np.exp(-gamma * (np.cosh(t) - 1.0)) * np.sinh(t) ** (2 * j)
        val = float(np.sum(f * ww))
        if prev is not None and abs(val - prev) <= 1e-12 * abs(val):
            break
        prev = val
        panels *= 2
    else:
        raise QuadratureError("bessel_k refinement did not converge")

    out = _KJ_PREF[j] * gamma**j * np.exp(-gamma) * val
    _BESSEL_CACHE[key] = out
    return out


# ---------------------------------------------------------------------------
# States


@dataclass(frozen=True)
class JuttnerState:
    """Local equilibrium parameters (n0, u, T0)."""

    n0: float
    u: np.ndarray
    T0: float

    def __post_init__(self) -> None:
        if self.n0 <= 0.0:
            raise ValueError(f"n0 must be positive, got {self.n0}")
        if self.T0 <= 0.0:
            raise ValueError(f"T0 must be positive, got {self.T0}")
        arr = np.asarray(self.u, dtype=float)
        if arr.shape != (3,):
            raise ValueError(f"u must have shape (3,), got {arr.shape}")
        object.__setattr__(self, "u", arr)

    def gamma(self, k: PhysicalConstants) -> float:
        return k.mc2 / (k.k_B * self.T0)

    def u0(self, k: PhysicalConstants) -> float:
        return float(np.sqrt(self.u @ self.u + k.c * k.c))

    def four_velocity(self, k: PhysicalConstants) -> np.ndarray:
        return np.concatenate(([self.u0(k)], self.u))


@dataclass(frozen=True)
class GlobalMaxwellianParams:
    """Reference global equilibrium (n_M, T_M) with gamma_M = mc^2/(k_B T_M)."""

    n_M: float
    T_M: float
    gamma_M: float

    @classmethod
    def from_temperature(cls, n_M: float, T_M: float, k: PhysicalConstants) -> "GlobalMaxwellianParams":
        if n_M <= 0.0 or T_M <= 0.0:
            raise ValueError("n_M and T_M must be positive")
        return cls(n_M=n_M, T_M=T_M, gamma_M=k.mc2 / (k.k_B * T_M))

    def check_window(self, T0: float) -> None:
        """Enforce T_M < T0 < 2 T_M; raises ClosureWindowError otherwise."""
        if not (self.T_M < T0 < 2.0 * self.T_M):
            raise ClosureWindowError(
                f"temperature window violated: need T_M < T0 < 2 T_M, "
                f"got T_M={self.T_M}, T0={T0}"
            )


@dataclass(frozen=True)
class FluidClosure:
    """Barotropic closure values: energy density, pressure, enthalpy/particle."""

    e0: float
    P0: float
    h: float


# ---------------------------------------------------------------------------
# Distributions


def juttner_eval(p, st: JuttnerState, k: PhysicalConstants):
    """Local equilibrium density M(p); broadcasts over leading axes of p."""
    arr = np.asarray(p, dtype=float)
    gamma = st.gamma(k)
    pref = st.n0 * gamma / (FOUR_PI * k.m**3 * k.c**3 * bessel_k(2, gamma))
    p0 = energy(arr, k)
    expo = (arr @ st.u - st.u0(k) * p0) / (k.k_B * st.T0)
    return pref * np.exp(expo)


def global_maxwellian_eval(p, gm: GlobalMaxwellianParams, k: PhysicalConstants):
    """Global reference equilibrium J_M(p) (the u = 0 state at T_M)."""
    st = JuttnerState(n0=gm.n_M, u=np.zeros(3), T0=gm.T_M)
    return juttner_eval(p, st, k)


def p_box_halfwidth(st: JuttnerState, k: PhysicalConstants, tail: float = 1e-12) -> float:
    """Truncation radius R so the equilibrium mass beyond R is < tail * n0.

    The worst decay direction aligns with u; the bound integrates the
    radial envelope 4 pi r^2 max_angle M against the directional exponent.
    """
    gamma = st.gamma(k)
    pref = st.n0 * gamma / (FOUR_PI * k.m**3 * k.c**3 * bessel_k(2, gamma))
    uu = float(np.linalg.norm(st.u))
    u0 = st.u0(k)

    def tail_mass(R: float) -> float:
        # directional decay length in |p| is k_B T0 / (u0 - |u|)
        r = np.linspace(R, R + 80.0 * k.k_B * st.T0 / (u0 - uu), 4001)
        p0 = np.sqrt((k.mc) ** 2 + r * r)
        env = pref * np.exp((uu * r - u0 * p0) / (k.k_B * st.T0))
        return float(np.trapezoid(FOUR_PI * r * r * env, r))

    R = k.mc
    while tail_mass(R) > tail * st.n0:
        R *= 1.3
        if R > 1e6 * k.mc:
            raise QuadratureError("could not find a finite truncation radius")
    return R


def momentum_quadrature(
    st: JuttnerState, k: PhysicalConstants, n_nodes: int = 48, tail: float = 1e-12
) -> tuple[np.ndarray, np.ndarray]:
    """Tensor-product Gauss-Legendre rule on [-R, R]^3 covering the state.

    Each axis is Gauss-Legendre in the stretched coordinate p = mc sinh(s).
    The stretch keeps the rule spectrally convergent for hot states: the
    integrand's complex branch points sit at |Im p| = mc, a vanishing
    fraction of the box half-width R, while in s they stay at distance
    pi/2 from the real axis regardless of R.
    """
    R = p_box_halfwidth(st, k, tail)
    S = float(np.arcsinh(R / k.mc))
    x, w = _leggauss(n_nodes)
    s = x * S
    nodes = k.mc * np.sinh(s)
    wts = w * S * k.mc * np.cosh(s)
    P = np.stack(np.meshgrid(nodes, nodes, nodes, indexing="ij"), axis=-1).reshape(-1, 3)
    W = (wts[:, None, None] * wts[None, :, None] * wts[None, None, :]).reshape(-1)
    return P, W


# ---------------------------------------------------------------------------
# Moments


def _refined(compute: Callable[[int], np.ndarray], n_nodes: int, tol, max_refine: int):
    out = compute(n_nodes)
    if tol is None:
        return out
    for _ in range(max_refine):
        n_nodes = int(n_nodes * 3 // 2)
        nxt = compute(n_nodes)
        scale = np.max(np.abs(nxt))
        if np.max(np.abs(nxt - out)) <= tol * scale:
            return nxt
        out = nxt
    raise QuadratureError(f"moment quadrature did not reach tol={tol}")


def moment_first(
    st: JuttnerState, k: PhysicalConstants, n_nodes: int = 48, tol=None, max_refine: int = 3
) -> np.ndarray:
    """Particle four-flow I^alpha = c * int p^alpha/p0 M dp = n0 u^alpha."""

    def compute(n: int) -> np.ndarray:
        P, W = momentum_quadrature(st, k, n)
        M = juttner_eval(P, st, k)
        p0 = energy(P, k)
        out = np.empty(4)
        out[0] = k.c * np.sum(M * W)
        out[1:] = k.c * (P / p0[:, None]).T @ (M * W)
        return out

    return _refined(compute, n_nodes, tol, max_refine)


def moment_second(
    st: JuttnerState, k: PhysicalConstants, n_nodes: int = 48, tol=None, max_refine: int = 3
) -> np.ndarray:
    """Energy-momentum tensor T^{ab} = c * int p^a p^b / p0 M dp."""

    def compute(n: int) -> np.ndarray:
        P, W = momentum_quadrature(st, k, n)
        M = juttner_eval(P, st, k)
        p0 = energy(P, k)
        four = np.concatenate([p0[:, None], P], axis=1)
        weighted = four * (M * W / p0)[:, None]
        return k.c * four.T @ weighted

    return _refined(compute, n_nodes, tol, max_refine)


def moment_third_quad(
    st: JuttnerState, k: PhysicalConstants, n_nodes: int = 48, tol=None, max_refine: int = 3
) -> np.ndarray:
    """Third moment c * int p^a p^b p^g / p0 M dp by direct quadrature."""

    def compute(n: int) -> np.ndarray:
        P, W = momentum_quadrature(st, k, n)
        M = juttner_eval(P, st, k)
        p0 = energy(P, k)
        four = np.concatenate([p0[:, None], P], axis=1)
        scaled = M * W / p0
        return k.c * np.einsum("na,nb,ng,n->abg", four, four, four, scaled)

    return _refined(compute, n_nodes, tol, max_refine)


def moment_first_closed(st: JuttnerState, k: PhysicalConstants) -> np.ndarray:
    return st.n0 * st.four_velocity(k)


def closure_analytic(st: JuttnerState, k: PhysicalConstants) -> FluidClosure:
    """Synge closure in closed form: ideal pressure and Bessel-ratio energy."""
    gamma = st.gamma(k)
    P0 = st.n0 * k.k_B * st.T0
    e0 = st.n0 * k.mc2 * (bessel_k(1, gamma) / bessel_k(2, gamma) + 3.0 / gamma)
    return FluidClosure(e0=e0, P0=P0, h=(e0 + P0) / st.n0)


def moment_second_closed(st: JuttnerState, k: PhysicalConstants) -> np.ndarray:
    cl = closure_analytic(st, k)
    ua = st.four_velocity(k)
    eta = np.diag([-1.0, 1.0, 1.0, 1.0])
    return (cl.e0 + cl.P0) / k.c**2 * np.outer(ua, ua) + cl.P0 * eta


def moment_third_closed(st: JuttnerState, k: PhysicalConstants) -> np.ndarray:
    """Closed-form third moment of the local equilibrium.

    Fully symmetric; at u = 0 only the time-time-time and time-space-space
    patterns survive.
    """
    gamma = st.gamma(k)
    K2 = bessel_k(2, gamma)
    K3 = bessel_k(3, gamma)
    n0 = st.n0
    u = st.u
    u0 = st.u0(k)
    uu = float(u @ u)
    c2 = k.c * k.c
    base = n0 * k.m**2 / (gamma * K2)

    T = np.empty((4, 4, 4))
    T[0, 0, 0] = base * ((3.0 * K3 + gamma * K2) * u0**3 + 3.0 * K3 * u0 * uu)
    t00i = base * ((5.0 * K3 + gamma * K2) * u0**2 * u + K3 * uu * u)
    for i in range(3):
        T[0, 0, 1 + i] = T[0, 1 + i, 0] = T[1 + i, 0, 0] = t00i[i]
    t0ij = base * ((6.0 * K3 + gamma * K2) * u0 * np.outer(u, u) + c2 * K3 * u0 * np.eye(3))
    for i in range(3):
        for j in range(3):
            T[0, 1 + i, 1 + j] = T[1 + i, 0, 1 + j] = T[1 + i, 1 + j, 0] = t0ij[i, j]
    for i in range(3):
        for j in range(3):
            for l in range(3):
                val = base * (6.0 * K3 + gamma * K2) * u[i] * u[j] * u[l]
                val += (
                    base
                    * c2
                    * K3
                    * (
                        u[i] * (1.0 if j == l else 0.0)
                        + u[j] * (1.0 if i == l else 0.0)
                        + u[l] * (1.0 if i == j else 0.0)
                    )
                )
                T[1 + i, 1 + j, 1 + l] = val
    return T


def synge_closure(
    st: JuttnerState, k: PhysicalConstants, n_nodes: int = 48, tol=None
) -> FluidClosure:
    """Closure values measured from rest-frame quadrature moments.

    e0 is the time-time component and P0 a spatial diagonal of the
    rest-frame energy-momentum tensor; h = (e0 + P0)/n0.
    """
    rest = JuttnerState(n0=st.n0, u=np.zeros(3), T0=st.T0)
    T = moment_second(rest, k, n_nodes=n_nodes, tol=tol)
    e0 = float(T[0, 0])
    P0 = float((T[1, 1] + T[2, 2] + T[3, 3]) / 3.0)
    return FluidClosure(e0=e0, P0=P0, h=(e0 + P0) / st.n0)


# ---------------------------------------------------------------------------
# Isentrope and the barotropic energy identity


def isentrope_log_density(gamma: float) -> float:
    """log n0 along the isentrope, up to an additive constant.

    d(log n0) = gamma * d(e_per_particle)/dP_per_particle integrates in
    closed form to log(K2/gamma) + gamma K1/K2.
    """
    K1 = bessel_k(1, gamma)
    K2 = bessel_k(2, gamma)
    return float(np.log(K2 / gamma) + gamma * K1 / K2)


def isentrope_density(
    gamma: float, n_ref: float, gamma_ref: float
) -> float:
    """Density at inverse temperature gamma on the isentrope through (n_ref, gamma_ref)."""
    return n_ref * np.exp(isentrope_log_density(gamma) - isentrope_log_density(gamma_ref))


def isentrope_gamma_of_density(
    n0: float, n_ref: float, gamma_ref: float, bracket: tuple[float, float] = (1e-3, 1e4)
) -> float:
    """Invert the isentrope: gamma with isentrope_density(gamma) = n0."""
    from scipy.optimize import brentq

    target = np.log(n0 / n_ref) + isentrope_log_density(gamma_ref)
    return float(brentq(lambda g: isentrope_log_density(g) - target, *bracket, xtol=1e-14, rtol=1e-14))


def identity_1_18_check(
    states: Sequence[JuttnerState],
    dx: float,
    k: PhysicalConstants,
    closures: Sequence[FluidClosure] | None = None,
) -> float:
    """Residual of the barotropic energy identity on a static 1D family.

    For time-independent profiles the identity reduces to
    u . [n0 grad((e0+P0)/n0) - grad P0] = 0, which holds exactly when the
    closure is barotropic. Central differences give an O(dx^2) residual for
    consistent families and an O(1) one for broken closures.
    """
    if closures is None:
        closures = [closure_analytic(st, k) for st in states]
    n0 = np.array([st.n0 for st in states])
    h = np.array([cl.h for cl in closures])
    P0 = np.array([cl.P0 for cl in closures])
    u = np.stack([st.u for st in states])

    dh = (h[2:] - h[:-2]) / (2.0 * dx)
    dP = (P0[2:] - P0[:-2]) / (2.0 * dx)
    # 1D family varies along the first axis
    res = u[1:-1, 0] * (n0[1:-1] * dh - dP)
    return float(np.max(np.abs(res)))


def sqrt_m_domination_check(
    states: Sequence[JuttnerState],
    dx: float,
    gm: GlobalMaxwellianParams,
    k: PhysicalConstants,
    n_nodes: int = 24,
    C: float = 10.0,
) -> dict:
    """Check sqrt(M) + |grad_x sqrt(M)| <= C sqrt(J_M) on the truncated grid.

    The temperature window T_M < T0 < 2 T_M is enforced first; the spatial
    gradient is taken through the state family by central differences.
    """
    for st in states:
        gm.check_window(st.T0)
    P, _ = momentum_quadrature(states[len(states) // 2], k, n_nodes)
    JM = global_maxwellian_eval(P, gm, k)
    sqrtJ = np.sqrt(JM)
    worst = 0.0
    for i in range(1, len(states) - 1):
        sm = np.sqrt(juttner_eval(P, states[i], k))
        sp = np.sqrt(juttner_eval(P, states[i + 1], k))
        sl = np.sqrt(juttner_eval(P, states[i - 1], k))
        grad = np.abs(sp - sl) / (2.0 * dx)
        ratio = np.max((sm + grad) / sqrtJ)
        worst = max(worst, float(ratio))
    return {"max_ratio": worst, "bound": C, "ok": worst <= C}
