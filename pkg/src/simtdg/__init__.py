"""Nodal DG solver with an instrumented SIMT execution model.

A discontinuous-Galerkin solver for linear hyperbolic systems (Maxwell's
equations shipped) on unstructured tetrahedral meshes.  The operator can
run through a vectorized reference path or through microblocked kernels
executed on an emulated SIMT device that counts shared-memory bank
conflicts and memory transactions, with an autotuner sweeping the kernels'
work-distribution parameters against those counters.
"""

from . import autotune, cli, device, kernels, layout, maxwell, mesh, refelem

__version__ = "0.1.0"

__all__ = [
    "autotune", "cli", "device", "kernels", "layout", "maxwell", "mesh",
    "refelem", "__version__",
]
