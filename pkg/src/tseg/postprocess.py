"""Branch fusion to BraTS labels and connected-component refinement of ET."""

import dataclasses

import numpy as np

from . import kernels
from .errors import DimensionError


@dataclasses.dataclass
class ComponentStats:
    component_id: int
    voxel_count: int
    slice_span: int
    voxels: np.ndarray  # flat C-order indices into the volume


def fuse_branches(wt, et, net, threshold=0.5, clamp_to_wt=False):
    """Per-voxel priority fusion: ET -> 4, else NET -> 1, else WT -> 2, else 0.

    With ``clamp_to_wt`` the ET/NET votes only count where WT is positive too.
    """
    wt, et, net = (np.asarray(a) for a in (wt, et, net))
    if not wt.shape == et.shape == net.shape:
        raise DimensionError(f"branch maps differ in shape: {wt.shape}, {et.shape}, {net.shape}")
    w = wt >= threshold
    e = et >= threshold
    n = net >= threshold
    if clamp_to_wt:
        e &= w
        n &= w
    out = np.zeros(wt.shape, dtype=np.uint8)
    out[w] = 2
    out[n] = 1
    out[e] = 4
    return out


def connected_components_3d(mask, connectivity=26):
    """Maximal connected foreground components, ordered by their minimal linear index."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise DimensionError("connected_components_3d expects a 3D mask")
    labels, count = kernels.label_components(mask, connectivity)
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(1, count + 2))
    plane = mask.shape[1] * mask.shape[2]
    comps = []
    for k in range(count):
        vox = order[bounds[k]:bounds[k + 1]]
        span = np.unique(vox // plane).size
        comps.append(ComponentStats(k + 1, int(vox.size), int(span), vox))
    return comps


def refine_et(labels, min_slices=6, min_voxels=1000, connectivity=26):
    """Relabel ET components that touch fewer than ``min_slices`` slices or
    hold fewer than ``min_voxels`` voxels as NET; nothing else changes."""
    labels = np.asarray(labels)
    out = labels.copy()
    flat = out.reshape(-1)
    for comp in connected_components_3d(labels == 4, connectivity):
        if comp.slice_span < min_slices or comp.voxel_count < min_voxels:
            flat[comp.voxels] = 1
    return out
