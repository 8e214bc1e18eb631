"""Synthetic four-modality brain phantoms with nested ellipsoidal tumours.

Each case is a brain ellipsoid with smooth tissue texture and two CSF-like
blobs, containing a tumour built from three nested ellipsoids
ET ⊂ TC ⊂ WT (labels 4 / 1 / 2).  Intensities are integer-valued like
scanner output; background voxels are exactly zero.  About a third of the
cases get a thin enhancing core (fewer than 6 slices) so that refinement
sees components on both sides of its thresholds.
"""

import numpy as np
from scipy import ndimage

from ..rng import stream
from .cases import NATIVE_DIMS, CaseBundle, Volume

# Mean intensities (x1000) per tissue: brain, csf, edema, necrosis/NET, enhancing.
CONTRAST = {
    "flair": (450, 250, 850, 700, 750),
    "t2": (400, 800, 800, 900, 650),
    "t1ce": (500, 200, 450, 250, 950),
    "t1": (550, 250, 420, 300, 500),
}
NOISE = 40.0
TISSUE_WOBBLE = 70.0
SMALL_ET_FRACTION = 0.3


def _ellipsoid(shape, center, radii):
    zz, yy, xx = np.ogrid[:shape[0], :shape[1], :shape[2]]
    cz, cy, cx = center
    rz, ry, rx = radii
    return ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _smooth_field(rng, shape, coarse=(8, 12, 12)):
    field = rng.standard_normal(coarse)
    zoom = [s / c for s, c in zip(shape, coarse)]
    out = ndimage.zoom(field, zoom, order=1)[:shape[0], :shape[1], :shape[2]]
    return out / max(np.abs(out).max(), 1e-9)


def _tumour(rng, brain_center, shape):
    bz, by, bx = brain_center
    center = np.array([bz + rng.uniform(-25, 25), by + rng.uniform(-35, 35), bx + rng.uniform(-30, 30)])
    wt_r = np.array([rng.uniform(12, 18), rng.uniform(18, 28), rng.uniform(18, 28)])
    wt = _ellipsoid(shape, center, wt_r)
    tc_r = wt_r * rng.uniform(0.6, 0.75)
    tc_c = center + rng.uniform(-0.15, 0.15, 3) * wt_r
    tc = _ellipsoid(shape, tc_c, tc_r) & wt
    small = rng.random() < SMALL_ET_FRACTION
    et_r = tc_r * rng.uniform(0.55, 0.75)
    if small:
        # Thin enhancing core: spans at most 5 slices.
        et_r = np.array([rng.uniform(1.5, 2.4), et_r[1], et_r[2]])
    et_c = tc_c + rng.uniform(-0.1, 0.1, 3) * tc_r
    et = _ellipsoid(shape, et_c, et_r) & tc
    return wt, tc, et


def make_phantom_case(seed, index, tumour=True, shape=NATIVE_DIMS):
    """Case number ``index`` of the phantom series for ``seed``."""
    rng = stream(seed, "phantom", index)
    shape = tuple(shape)
    center = (shape[0] / 2 - 0.5 + rng.uniform(-3, 3),
              shape[1] / 2 - 0.5 + rng.uniform(-4, 4),
              shape[2] / 2 - 0.5 + rng.uniform(-4, 4))
    radii = (shape[0] * rng.uniform(0.37, 0.40), shape[1] * rng.uniform(0.35, 0.38),
             shape[2] * rng.uniform(0.28, 0.31))
    brain = _ellipsoid(shape, center, radii)
    csf = np.zeros(shape, dtype=bool)
    for side in (-1, 1):
        c = (center[0] + rng.uniform(-5, 5), center[1] + rng.uniform(-10, 10),
             center[2] + side * radii[2] * rng.uniform(0.25, 0.35))
        csf |= _ellipsoid(shape, c, (radii[0] * 0.25, radii[1] * 0.3, radii[2] * 0.1))
    csf &= brain

    labels = np.zeros(shape, dtype=np.uint8)
    wt = tc = et = np.zeros(shape, dtype=bool)
    if tumour:
        wt, tc, et = _tumour(rng, center, shape)
        wt &= brain
        tc &= wt
        et &= tc
        labels[wt] = 2
        labels[tc] = 1
        labels[et] = 4

    tissue = np.zeros(shape, dtype=np.int8)
    tissue[csf] = 1
    tissue[wt] = 2
    tissue[tc] = 3
    tissue[et] = 4
    texture = _smooth_field(rng, shape)
    vols = {}
    for m, means in CONTRAST.items():
        gain = rng.uniform(0.8, 1.25)
        base = np.asarray(means, dtype=np.float32)[tissue]
        img = base + TISSUE_WOBBLE * texture * rng.uniform(0.5, 1.0)
        img += rng.normal(0.0, NOISE, size=shape).astype(np.float32)
        img = np.round(np.clip(img * gain, 1.0, None))
        img[~brain] = 0.0
        vols[m] = Volume(img.astype(np.float32))
    return CaseBundle(f"phantom_{seed}_{index:03d}", labels=labels, **vols)


def make_phantom(seed, n_cases, tumour=True, shape=NATIVE_DIMS):
    """``n_cases`` phantom cases; deterministic in ``seed``."""
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    return [make_phantom_case(seed, i, tumour, shape) for i in range(n_cases)]


def iter_phantom(seed, n_cases, tumour=True, shape=NATIVE_DIMS):
    """Generator variant of :func:`make_phantom` that holds one case at a time."""
    for i in range(n_cases):
        yield make_phantom_case(seed, i, tumour, shape)
