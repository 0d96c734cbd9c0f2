"""Conversions between natural (per-element) and padded field layouts.

A field vector in device layout stores each microblock's elements back to
back, padded with zeros up to the plan's node stride; face-value vectors
use the face stride analogously.  Padding must stay exactly zero through
every kernel.
"""

from __future__ import annotations

import numpy as np

from ..layout import LayoutPlan
from ..refelem import NUM_FACES


def zeros_field(layout: LayoutPlan, leading: tuple = ()) -> np.ndarray:
    return np.zeros(leading + (layout.field_length,))

def zeros_flux(layout: LayoutPlan, leading: tuple = ()) -> np.ndarray:
    return np.zeros(leading + (layout.flux_length,))


def to_padded(layout: LayoutPlan, natural: np.ndarray) -> np.ndarray:
    """Scatter (..., K, Np) data into the padded device layout."""
    natural = np.asarray(natural)
    out = np.zeros(natural.shape[:-2] + (layout.field_length,))
    out[..., layout.node_scatter()] = natural
    return out


def from_padded(layout: LayoutPlan, padded: np.ndarray) -> np.ndarray:
    """Gather padded data back to natural (..., K, Np) order."""
    padded = np.asarray(padded)
    return padded[..., layout.node_scatter()]


def flux_to_natural(layout: LayoutPlan, padded: np.ndarray) -> np.ndarray:
    """Face values from the padded layout to (..., K, 4 * Nfp)."""
    span = NUM_FACES * layout.num_face_nodes
    base = layout.microblock_of * layout.face_stride + layout.slot_of * span
    idx = base[:, None] + np.arange(span)[None, :]
    return np.asarray(padded)[..., idx]


def natural_flux_to_padded(layout: LayoutPlan, natural: np.ndarray) -> np.ndarray:
    span = NUM_FACES * layout.num_face_nodes
    base = layout.microblock_of * layout.face_stride + layout.slot_of * span
    idx = base[:, None] + np.arange(span)[None, :]
    out = np.zeros(np.asarray(natural).shape[:-2] + (layout.flux_length,))
    out[..., idx] = natural
    return out


def check_padding(layout: LayoutPlan, padded: np.ndarray, face_layout: bool = False) -> bool:
    """True when every padding slot of the array is exactly zero."""
    mask = layout.flux_padding_mask() if face_layout else layout.padding_mask()
    return bool(np.all(np.asarray(padded)[..., ~mask] == 0.0))
