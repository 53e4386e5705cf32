"""Momentum-space and angular grids for collision-operator quadrature.

Two discretizations live here. A uniform cell-centered Cartesian box in
momentum (midpoint weights, symmetric under p -> -p so odd integrands sum
to zero exactly), used by the bilinear collision integral and the
linearized-operator assembly. And unit-sphere rules built as a product of
Gauss-Legendre nodes in the polar cosine with a uniform azimuthal grid,
including a two-panel variant split at the equator for integrands with an
|omega . axis| kink.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .constants import PhysicalConstants
from .equilibria import JuttnerState, juttner_eval

__all__ = [
    "MomentumGrid",
    "GridFunction",
    "AngularGrid",
    "orthonormal_frame",
    "trilinear",
]


@dataclass(frozen=True)
class MomentumGrid:
    """Uniform cell-centered Cartesian momentum box [-pmax, pmax]^3.

    Nodes sit at cell centers, -pmax + (i + 1/2) h with h = 2 pmax / n,
    so the node set is exactly symmetric under p -> -p and the midpoint
    weight is h^3 for every cell.
    """

    pmax: float
    n: int

    def __post_init__(self) -> None:
        if not (self.pmax > 0.0 and np.isfinite(self.pmax)):
            raise ValueError("pmax must be positive and finite")
        if self.n < 2:
            raise ValueError("need at least 2 nodes per axis")

    @property
    def h(self) -> float:
        return 2.0 * self.pmax / self.n

    @property
    def axis(self) -> np.ndarray:
        i = np.arange(self.n)
        return -self.pmax + (i + 0.5) * self.h

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n, self.n, self.n)

    @property
    def size(self) -> int:
        return self.n**3

    @property
    def weight(self) -> float:
        """Midpoint quadrature weight per cell."""
        return self.h**3

    def nodes(self) -> np.ndarray:
        """All cell centers as an (n^3, 3) array in C order."""
        a = self.axis
        return np.stack(np.meshgrid(a, a, a, indexing="ij"), axis=-1).reshape(-1, 3)

    @classmethod
    def for_state(
        cls,
        st: JuttnerState,
        k: PhysicalConstants,
        n: int = 12,
        decades: float = 5.0,
    ) -> "MomentumGrid":
        """Box sized so the equilibrium density drops by `decades` at the face.

        The half-width solves M(R e)/M(0) = 10^-decades along the slowest
        decaying axis direction (the drift direction when u != 0).
        """
        u = np.asarray(st.u, dtype=float)
        uu = float(np.linalg.norm(u))
        e = u / uu if uu > 0 else np.array([1.0, 0.0, 0.0])
        m0 = float(juttner_eval(np.zeros((1, 3)), st, k)[0])
        target = np.log(10.0) * decades

        def drop(r: float) -> float:
            val = float(juttner_eval((r * e)[None, :], st, k)[0])
            return -np.log(val / m0)

        lo, hi = 0.0, 4.0 * k.mc
        while drop(hi) < target:
            hi *= 2.0
            if hi > 1e8 * k.mc:
                raise ValueError("equilibrium decays too slowly for a finite box")
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if drop(mid) < target:
                lo = mid
            else:
                hi = mid
        return cls(pmax=0.5 * (lo + hi), n=n)


@dataclass
class GridFunction:
    """Scalar samples on the cells of a MomentumGrid."""

    grid: MomentumGrid
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError(
                f"values shape {self.values.shape} != grid shape {self.grid.shape}"
            )

    @classmethod
    def from_callable(cls, grid: MomentumGrid, fn) -> "GridFunction":
        vals = np.asarray(fn(grid.nodes()), dtype=float).reshape(grid.shape)
        return cls(grid, vals)

    def ravel(self) -> np.ndarray:
        return self.values.reshape(-1)

    def integrate(self) -> float:
        """Midpoint-rule integral over the box."""
        return self.grid.weight * float(np.sum(self.values))


def trilinear(
    grid: MomentumGrid, values: np.ndarray, pts: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear interpolation of cell samples at arbitrary points.

    Returns (vals, inside). Points outside the hull of cell centers get
    value 0 and inside=False; callers decide how to account for the drop.
    """
    vals3 = np.ascontiguousarray(np.asarray(values, dtype=float).reshape(grid.shape))
    p = np.atleast_2d(np.asarray(pts, dtype=float))
    nmax = grid.n - 1

    t = (p - grid.axis[0]) / grid.h
    inside = np.all((t >= 0.0) & (t <= nmax), axis=-1)
    v = map_coordinates(vals3, t.T, order=1, mode="constant", cval=0.0)
    v = np.where(inside, v, 0.0)
    if pts.ndim == 1:
        return v[0], inside[0]
    return v, inside


def orthonormal_frame(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-handed frame (e1, e2, n) with n along `axis`.

    Vectorized: axis may be (..., 3); zero axes are rejected.
    """
    a = np.asarray(axis, dtype=float)
    norm = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise ValueError("zero axis has no frame")
    n = a / norm
    # helper vector furthest from n, switched per row to avoid degeneracy
    helper = np.where(
        (np.abs(n[..., 0]) < 0.9)[..., None],
        np.broadcast_to([1.0, 0.0, 0.0], n.shape),
        np.broadcast_to([0.0, 1.0, 0.0], n.shape),
    )
    e1 = np.cross(n, helper)
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    e2 = np.cross(n, e1)
    return e1, e2, n


@dataclass(frozen=True)
class AngularGrid:
    """Quadrature nodes and weights on the unit sphere.

    omega has shape (nw, 3), w shape (nw,), sum(w) = 4 pi. Both builders
    produce node sets symmetric under omega -> -omega (even azimuth count,
    symmetric polar nodes), which the collision integral relies on.
    """

    omega: np.ndarray
    w: np.ndarray

    def __post_init__(self) -> None:
        if self.omega.shape != (self.w.size, 3):
            raise ValueError("omega/w shape mismatch")

    @property
    def size(self) -> int:
        return self.w.size

    @classmethod
    def product(
        cls, n_polar: int = 16, n_azimuth: int = 32, axis: np.ndarray | None = None
    ) -> "AngularGrid":
        """Gauss-Legendre in cos(polar) times uniform azimuth."""
        x, wx = np.polynomial.legendre.leggauss(n_polar)
        return cls._assemble(x, wx, n_azimuth, axis)

    @classmethod
    def split_axis(
        cls, n_polar: int = 16, n_azimuth: int = 32, axis: np.ndarray | None = None
    ) -> "AngularGrid":
        """Two Gauss-Legendre panels in cos(polar), split at the equator.

        Renders |omega . axis| smooth on each panel, restoring spectral
        convergence for transition-rate integrands.
        """
        x, wx = np.polynomial.legendre.leggauss(n_polar)
        cs = np.concatenate([0.5 * (x - 1.0), 0.5 * (x + 1.0)])
        ws = np.concatenate([0.5 * wx, 0.5 * wx])
        return cls._assemble(cs, ws, n_azimuth, axis)

    def fold_antipodal(self) -> "AngularGrid | None":
        """Half-sphere rule equal to this one on even integrands.

        If every node has an antipodal partner of equal weight, returns a
        grid keeping one node per pair with doubled weight; otherwise None.
        Summing an integrand satisfying f(-w) = f(w) over the folded grid
        reproduces the full sum exactly.
        """
        key = np.round(self.omega * 1e10).astype(np.int64)
        index = {tuple(row): i for i, row in enumerate(key)}
        if len(index) != self.size:
            return None
        keep: list[int] = []
        seen = np.zeros(self.size, dtype=bool)
        for i in range(self.size):
            if seen[i]:
                continue
            j = index.get(tuple(-key[i]))
            if j is None or j == i or abs(self.w[j] - self.w[i]) > 1e-13:
                return None
            seen[i] = seen[j] = True
            keep.append(i)
        return AngularGrid(omega=self.omega[keep], w=2.0 * self.w[keep])

    @classmethod
    def _assemble(cls, cosp, wcos, n_azimuth: int, axis) -> "AngularGrid":
        if n_azimuth % 2 != 0:
            raise ValueError("azimuth count must be even for -omega symmetry")
        th = (np.arange(n_azimuth) + 0.5) * (2.0 * np.pi / n_azimuth)
        wth = 2.0 * np.pi / n_azimuth
        sp = np.sqrt(np.clip(1.0 - cosp**2, 0.0, None))
        if axis is None:
            e1 = np.array([1.0, 0.0, 0.0])
            e2 = np.array([0.0, 1.0, 0.0])
            n = np.array([0.0, 0.0, 1.0])
        else:
            e1, e2, n = orthonormal_frame(np.asarray(axis, dtype=float))
        ct, cp = np.meshgrid(th, cosp, indexing="ij")
        st_ = np.sqrt(np.clip(1.0 - cp**2, 0.0, None))
        om = (
            st_[..., None] * (np.cos(ct)[..., None] * e1 + np.sin(ct)[..., None] * e2)
            + cp[..., None] * n
        )
        ww = np.broadcast_to(wcos, cp.shape) * wth
        del sp
        return cls(omega=om.reshape(-1, 3), w=ww.reshape(-1).copy())


def angular_nodes_for_axes(
    cosp: np.ndarray, wcos: np.ndarray, n_azimuth: int, axes: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Sphere nodes oriented along many axes at once.

    Returns omega with shape (n_axes, n_azimuth * n_cos, 3) and shared
    weights (n_azimuth * n_cos,). Used when a kinked integrand needs its
    split direction aligned per evaluation point.
    """
    if n_azimuth % 2 != 0:
        raise ValueError("azimuth count must be even for -omega symmetry")
    e1, e2, n = orthonormal_frame(axes)
    th = (np.arange(n_azimuth) + 0.5) * (2.0 * np.pi / n_azimuth)
    wth = 2.0 * np.pi / n_azimuth
    ct, cp = np.meshgrid(th, cosp, indexing="ij")
    st_ = np.sqrt(np.clip(1.0 - cp**2, 0.0, None))
    om = (
        st_.reshape(-1)[None, :, None]
        * (
            np.cos(ct).reshape(-1)[None, :, None] * e1[:, None, :]
            + np.sin(ct).reshape(-1)[None, :, None] * e2[:, None, :]
        )
        + cp.reshape(-1)[None, :, None] * n[:, None, :]
    )
    ww = (np.broadcast_to(wcos, cp.shape) * wth).reshape(-1)
    return om, ww
