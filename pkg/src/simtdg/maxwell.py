"""Maxwell's equations as a linear conservation law, plus the cavity setup.

State ordering is u = (E_x, E_y, E_z, H_x, H_y, H_z).  With uniform
permittivity and permeability and no sources,

    eps dE/dt =  curl H,      mu dH/dt = -curl E,

which is the conservation form diag(eps, mu) u_t + div F(u) = 0 for the
flux with rows F_E = -e_d x H and F_H = e_d x E.  Faces are coupled by the
characteristic (upwind) flux; walls are perfect electric conductors,
imposed weakly through a mirror state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np



@dataclass(frozen=True)
class Material:
    """Uniform linear isotropic medium."""

    permittivity: float = 1.0
    permeability: float = 1.0

    def __post_init__(self):
        if self.permittivity <= 0.0 or self.permeability <= 0.0:
            raise ValueError("material constants must be positive")

    @property
    def impedance(self) -> float:
        return math.sqrt(self.permeability / self.permittivity)

    @property
    def admittance(self) -> float:
        return 1.0 / self.impedance

    @property
    def light_speed(self) -> float:
        return 1.0 / math.sqrt(self.permittivity * self.permeability)


VACUUM = Material()


def _cross(ax, ay, az, bx, by, bz):
    return ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx


def flux(u: np.ndarray) -> np.ndarray:
    """Conservation-law flux F(u); shape (3, 6) + the state's trailing axes.

    ``flux(u)[d, c]`` is the d-direction flux of state component c; its
    divergence is (-curl H, curl E).
    """
    u = np.asarray(u, dtype=np.float64)
    ex, ey, ez, hx, hy, hz = u
    zero = np.zeros_like(ex)
    return np.array([
        # d = x
        [zero, hz, -hy, zero, -ez, ey],
        # d = y
        [-hz, zero, hx, ez, zero, -ex],
        # d = z
        [hy, -hx, zero, -ey, ex, zero],
    ])


def upwind_flux(u_minus, u_plus, normal, mat_minus: Material = VACUUM,
                mat_plus: Material | None = None) -> np.ndarray:
    """Characteristic flux difference across a face, per node.

    Returns the quantity the surface term lifts: the normal flux of the
    interior state minus the single-valued upwind flux, evaluated from the
    jumps [[u]] = u_plus - u_minus and the impedances of both sides.
    """
    if mat_plus is None:
        mat_plus = mat_minus
    u_m = np.asarray(u_minus, dtype=np.float64)
    u_p = np.asarray(u_plus, dtype=np.float64)
    n = np.asarray(normal, dtype=np.float64)
    nx, ny, nz = n[0], n[1], n[2]

    de = u_p[0:3] - u_m[0:3]
    dh = u_p[3:6] - u_m[3:6]

    z_m, z_p = mat_minus.impedance, mat_plus.impedance
    y_m, y_p = mat_minus.admittance, mat_plus.admittance
    z_avg = 0.5 * (z_m + z_p)
    y_avg = 0.5 * (y_m + y_p)

    ncde = _cross(nx, ny, nz, de[0], de[1], de[2])
    ncdh = _cross(nx, ny, nz, dh[0], dh[1], dh[2])

    # E part: n x (Z+ [[H]] - n x [[E]]) / (2 {Z})
    ax = z_p * dh[0] - ncde[0]
    ay = z_p * dh[1] - ncde[1]
    az = z_p * dh[2] - ncde[2]
    e_part = _cross(nx, ny, nz, ax, ay, az)

    # H part: n x (-Y+ [[E]] - n x [[H]]) / (2 {Y})
    bx = -y_p * de[0] - ncdh[0]
    by = -y_p * de[1] - ncdh[1]
    bz = -y_p * de[2] - ncdh[2]
    h_part = _cross(nx, ny, nz, bx, by, bz)

    out = np.empty_like(u_m)
    out[0:3] = np.asarray(e_part) / (2.0 * z_avg)
    out[3:6] = np.asarray(h_part) / (2.0 * y_avg)
    return out


def pec_boundary(u_minus, normal) -> np.ndarray:
    """Mirror state of a perfectly conducting wall.

    Tangential E and normal H flip sign; normal E and tangential H are
    kept.  Applying the mirror twice is the identity, and the resulting
    upwind flux damps exactly the non-compliant field components.
    """
    u_m = np.asarray(u_minus, dtype=np.float64)
    n = np.asarray(normal, dtype=np.float64)
    e, h = u_m[0:3], u_m[3:6]
    ndote = n[0] * e[0] + n[1] * e[1] + n[2] * e[2]
    ndoth = n[0] * h[0] + n[1] * h[1] + n[2] * h[2]
    out = np.empty_like(u_m)
    out[0:3] = -e + 2.0 * ndote * n
    out[3:6] = h - 2.0 * ndoth * n
    return out


# ---------------------------------------------------------------------------
# Analytic cavity mode


@dataclass(frozen=True)
class CavityMode:
    """Transverse-magnetic eigenmode of a rectangular conducting box.

    Mode numbers (m, n, p) count half-periods along x, y, z; m and n must
    be at least 1 (otherwise the mode is identically zero), p may be 0.
    """

    m: int
    n: int
    p: int
    extent: tuple
    amplitude: float = 1.0
    material: Material = VACUUM

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError("mode numbers m and n must be >= 1 (null mode otherwise)")
        if self.p < 0:
            raise ValueError("mode number p must be >= 0")
        if any(x <= 0 for x in self.extent):
            raise ValueError("box extents must be positive")

    @property
    def wave_numbers(self) -> tuple:
        a, b, d = self.extent
        return (math.pi * self.m / a, math.pi * self.n / b, math.pi * self.p / d)

    @property
    def angular_frequency(self) -> float:
        kx, ky, kz = self.wave_numbers
        return self.material.light_speed * math.sqrt(kx * kx + ky * ky + kz * kz)

    def evaluate(self, points: np.ndarray, t: float, check_bounds: bool = True) -> np.ndarray:
        """Exact fields at the given points, shape (6,) + points.shape[:-1]."""
        pts = np.asarray(points, dtype=np.float64)
        x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
        if check_bounds:
            tol = 1e-9 * max(self.extent)
            if (
                x.min(initial=0.0) < -tol or y.min(initial=0.0) < -tol or z.min(initial=0.0) < -tol
                or x.max(initial=0.0) > self.extent[0] + tol
                or y.max(initial=0.0) > self.extent[1] + tol
                or z.max(initial=0.0) > self.extent[2] + tol
            ):
                raise ValueError("evaluation points fall outside the cavity")

        kx, ky, kz = self.wave_numbers
        gamma2 = kx * kx + ky * ky
        omega = self.angular_frequency
        eps = self.material.permittivity
        amp = self.amplitude

        sx, cx = np.sin(kx * x), np.cos(kx * x)
        sy, cy = np.sin(ky * y), np.cos(ky * y)
        sz, cz = np.sin(kz * z), np.cos(kz * z)
        cos_t, sin_t = math.cos(omega * t), math.sin(omega * t)

        out = np.empty((6,) + x.shape, dtype=np.float64)
        out[0] = -amp * (kx * kz / gamma2) * cx * sy * sz * cos_t
        out[1] = -amp * (ky * kz / gamma2) * sx * cy * sz * cos_t
        out[2] = amp * sx * sy * cz * cos_t
        out[3] = -amp * (ky * omega * eps / gamma2) * sx * cy * cz * sin_t
        out[4] = amp * (kx * omega * eps / gamma2) * cx * sy * cz * sin_t
        out[5] = np.zeros_like(x)
        return out


# ---------------------------------------------------------------------------
# Norms, energy, time step


def l2_error(state: np.ndarray, mode: CavityMode, t: float, elem, geometry,
             nodes: np.ndarray) -> float:
    """Mass-weighted L2 distance between a numerical state and the mode.

    ``state`` is in natural layout (6, K, Np); ``nodes`` holds the mapped
    node coordinates (K, Np, 3).
    """
    exact = mode.evaluate(nodes, t)
    diff = np.asarray(state) - exact
    weighted = np.einsum("ij,fkj->fki", elem.mass, diff)
    per_elem = np.einsum("fki,fki->k", diff, weighted)
    return float(math.sqrt((geometry.det_jacobians * per_elem).sum()))


def field_energy(state: np.ndarray, elem, geometry, material: Material = VACUUM) -> float:
    """Discrete electromagnetic energy 1/2 (eps |E|^2 + mu |H|^2)."""
    u = np.asarray(state)
    weighted = np.einsum("ij,fkj->fki", elem.mass, u)
    per_field = np.einsum("fki,fki->fk", u, weighted) * geometry.det_jacobians
    e_part = per_field[0:3].sum()
    h_part = per_field[3:6].sum()
    return 0.5 * float(material.permittivity * e_part + material.permeability * h_part)


def stable_dt(mesh, geometry, order: int, material: Material = VACUUM, cfl: float = 1.0) -> float:
    """Time step from the smallest inscribed sphere.

    dt = cfl * min_k r_in(k) / (c (N+1)^2); the quadratic order factor
    tracks how the operator's spectral radius grows with N.
    """
    if not 0.0 < cfl <= 1.0:
        raise ValueError("cfl must be in (0, 1]")
    from .mesh import element_inradii

    r_min = element_inradii(mesh, geometry).min()
    return cfl * float(r_min) / (material.light_speed * (order + 1) ** 2)
