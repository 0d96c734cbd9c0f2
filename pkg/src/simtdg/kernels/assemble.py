"""Operator assembly and the low-storage Runge-Kutta step.

Assembly is the only stage that touches all fields at once: it combines
the 18 global derivative vectors into curls, adds the lifted fluxes, and
scales by the material constants.  It is a pure streaming kernel, one
value in and out per thread per pass.
"""

from __future__ import annotations

import numpy as np

from ..device import Device, MemStats
from ..maxwell import Material, VACUUM

# E rows take +curl H, H rows take -curl E: (deriv field, axis, sign) pairs
_CURL_TERMS = (
    ((5, 1, 1.0), (4, 2, -1.0)),
    ((3, 2, 1.0), (5, 0, -1.0)),
    ((4, 0, 1.0), (3, 1, -1.0)),
    ((2, 1, -1.0), (1, 2, 1.0)),
    ((0, 2, -1.0), (2, 0, 1.0)),
    ((1, 0, -1.0), (0, 1, 1.0)),
)


def assemble_rhs(
    device: Device,
    derivatives: np.ndarray,
    lifted: np.ndarray,
    material: Material = VACUUM,
    block_threads: int = 256,
    inline: int = 4,
    trace=None,
) -> tuple[np.ndarray, MemStats]:
    """Combine curls and lifted fluxes into the six time derivatives.

    ``derivatives`` has shape (6, 3, L): global x/y/z derivatives of each
    field; ``lifted`` has shape (6, L).
    """
    derivatives = np.asarray(derivatives, dtype=np.float64)
    lifted = np.asarray(lifted, dtype=np.float64)
    n_fields, _, length = derivatives.shape
    out = np.zeros((n_fields, length))
    inv_weight = np.array([material.permittivity] * 3 + [material.permeability] * 3)

    chunk = block_threads * inline
    grid = (-(-length // chunk), 1)

    def kernel(ctx):
        base = ctx.bx * chunk
        for j in range(inline):
            idx = base + j * block_threads + ctx.lin
            mask = idx < length
            for c in range(n_fields):
                (f1, a1, s1), (f2, a2, s2) = _CURL_TERMS[c]
                t1 = ctx.g[f"d{f1}{a1}"].read(idx, mask=mask, label="assemble_read")
                t2 = ctx.g[f"d{f2}{a2}"].read(idx, mask=mask, label="assemble_read")
                lf = ctx.g[f"l{c}"].read(idx, mask=mask, label="assemble_read")
                val = (s1 * t1 + s2 * t2 + lf) / inv_weight[c]
                ctx.g[f"r{c}"].write(idx, val, mask=mask, label="assemble_store")

    globals_ = {}
    needed = {(f, a) for terms in _CURL_TERMS for (f, a, _) in terms}
    for f, a in needed:
        globals_[f"d{f}{a}"] = derivatives[f, a]
    for c in range(n_fields):
        globals_[f"l{c}"] = lifted[c]
        globals_[f"r{c}"] = out[c]

    stats = device.launch(grid, (block_threads, 1, 1), kernel,
                          global_arrays=globals_, trace=trace)
    return out, stats


# ---------------------------------------------------------------------------
# Five-stage fourth-order low-storage Runge-Kutta scheme


RK_A = (
    0.0,
    -567301805773.0 / 1357537059087.0,
    -2404267990393.0 / 2016746695238.0,
    -3550918686646.0 / 2091501179385.0,
    -1275806237668.0 / 842570457699.0,
)

RK_B = (
    1432997174477.0 / 9575080441755.0,
    5161836677717.0 / 13612068292357.0,
    1720146321549.0 / 2090206949498.0,
    3134564353537.0 / 4481467310338.0,
    2277821191437.0 / 14882151754819.0,
)

RK_C = (
    0.0,
    1432997174477.0 / 9575080441755.0,
    2526269341429.0 / 6820363962896.0,
    2006345519317.0 / 3224310063776.0,
    2802321613138.0 / 2924317926251.0,
)


def rk4_step(state, t: float, dt: float, rhs_fn):
    """Advance one step; storage is the state plus a single residual register."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    y = np.array(state, dtype=np.float64, copy=True)
    residual = np.zeros_like(y)
    for a, b, c in zip(RK_A, RK_B, RK_C):
        residual = a * residual + dt * np.asarray(rhs_fn(t + c * dt, y))
        y = y + b * residual
    return y
