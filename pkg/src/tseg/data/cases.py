"""Patient cases: loading, z-score normalisation, cropping and re-embedding."""

import dataclasses
import os
from pathlib import Path

import numpy as np

from ..errors import DegenerateVolumeError, DimensionError, FormatError
from .nifti import read_nifti, write_nifti

MODALITIES = ("flair", "t2", "t1ce", "t1")
LABEL_VALUES = (0, 1, 2, 4)
NATIVE_DIMS = (155, 240, 240)


@dataclasses.dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DimensionError(f"volumes are 3D with positive dims, got {self.data.shape}")

    @property
    def dims(self):
        return self.data.shape


@dataclasses.dataclass
class CaseBundle:
    case_id: str
    flair: Volume
    t2: Volume
    t1ce: Volume
    t1: Volume
    labels: np.ndarray = None

    def __post_init__(self):
        dims = {m: getattr(self, m).dims for m in MODALITIES}
        if len(set(dims.values())) != 1:
            raise DimensionError(f"case {self.case_id}: modality dims differ {dims}")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
            if self.labels.shape != self.dims:
                raise DimensionError(f"case {self.case_id}: labels {self.labels.shape} vs {self.dims}")
            check_labels(self.labels)

    @property
    def dims(self):
        return self.flair.dims

    @property
    def spacing(self):
        return self.flair.spacing

    def modality(self, name):
        return getattr(self, name)

    def image_stack(self):
        """Modalities stacked slice-major: [D_z, 4, D_y, D_x] in (Flair, T2, T1ce, T1) order."""
        return np.stack([getattr(self, m).data for m in MODALITIES], axis=1)

    def brain_mask(self):
        """Voxels nonzero in any modality."""
        mask = np.zeros(self.dims, dtype=bool)
        for m in MODALITIES:
            mask |= getattr(self, m).data != 0
        return mask


def check_labels(labels):
    bad = np.setdiff1d(np.unique(labels), LABEL_VALUES)
    if bad.size:
        raise FormatError(f"label volume contains values outside {{0,1,2,4}}: {bad.tolist()}")
    return labels


@dataclasses.dataclass(frozen=True)
class CropSpec:
    row_offset: int = 20
    row_len: int = 200
    col_offset: int = 36
    col_len: int = 168
    slice_front_trim: int = 15
    slice_back_trim: int = 12

    def validate(self, dims):
        D, H, W = dims
        if self.row_offset < 0 or self.row_offset + self.row_len > H:
            raise DimensionError(f"crop rows [{self.row_offset}, +{self.row_len}) outside {H}")
        if self.col_offset < 0 or self.col_offset + self.col_len > W:
            raise DimensionError(f"crop cols [{self.col_offset}, +{self.col_len}) outside {W}")
        if self.slice_front_trim < 0 or self.slice_back_trim < 0 \
                or D - self.slice_front_trim - self.slice_back_trim < 1:
            raise DimensionError(f"slice trims leave no slices of {D}")

    def cropped_dims(self, dims):
        return (dims[0] - self.slice_front_trim - self.slice_back_trim, self.row_len, self.col_len)

    def window(self, dims):
        z1 = dims[0] - self.slice_back_trim
        return (slice(self.slice_front_trim, z1),
                slice(self.row_offset, self.row_offset + self.row_len),
                slice(self.col_offset, self.col_offset + self.col_len))

    def retained_fraction(self, dims=NATIVE_DIMS):
        kept = self.cropped_dims(dims)
        return float(np.prod(kept) / np.prod(dims))

    def in_plane_retained(self, dims=NATIVE_DIMS):
        return self.row_len * self.col_len / (dims[1] * dims[2])

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DimensionError(f"unknown crop keys: {sorted(unknown)}")
        return cls(**d)


def normalize_modality(volume):
    """Z-score the nonzero (brain) voxels; background stays exactly zero.

    Statistics use the population standard deviation over every nonzero
    voxel of the volume.
    """
    data = volume.data
    mask = data != 0
    if not mask.any():
        raise DegenerateVolumeError("volume has no nonzero voxels")
    vals = data[mask].astype(np.float64)
    mu = vals.mean()
    sigma = vals.std()
    if not sigma > 0:
        raise DegenerateVolumeError("brain voxels have zero variance")
    out = np.zeros_like(data)
    out[mask] = ((vals - mu) / sigma).astype(np.float32)
    return Volume(out, volume.spacing)


def preprocess_case(case, crop=None, native_dims=NATIVE_DIMS, normalize=True, allow_empty=False):
    """Normalise each modality over the full volume, then crop rows/cols and trim slices.

    Labels are cropped the same way and never rescaled.  With ``allow_empty``
    an all-zero modality passes through as zeros instead of raising.
    """
    crop = crop or CropSpec()
    if native_dims is not None and tuple(case.dims) != tuple(native_dims):
        raise DimensionError(f"case {case.case_id}: expected dims {native_dims}, got {case.dims}")
    crop.validate(case.dims)
    win = crop.window(case.dims)
    vols = {}
    for m in MODALITIES:
        v = getattr(case, m)
        if normalize and not (allow_empty and not v.data.any()):
            v = normalize_modality(v)
        vols[m] = Volume(v.data[win], v.spacing)
    labels = None if case.labels is None else case.labels[win]
    return CaseBundle(case.case_id, labels=labels, **vols)


def embed_prediction(cropped_labels, crop=None, native_dims=NATIVE_DIMS):
    """Place cropped labels back on the native grid; everything outside the window is 0."""
    crop = crop or CropSpec()
    cropped_labels = np.asarray(cropped_labels)
    expected = crop.cropped_dims(native_dims)
    if cropped_labels.shape != tuple(expected):
        raise DimensionError(f"cropped labels {cropped_labels.shape} do not match crop {expected}")
    out = np.zeros(native_dims, dtype=np.uint8)
    out[crop.window(native_dims)] = cropped_labels
    return out


# -- on-disk layout: <root>/<case>/<case>_<modality>.nii[.gz] -----------------------

def _find(case_dir, stem):
    for ext in (".nii.gz", ".nii"):
        p = Path(case_dir) / f"{stem}{ext}"
        if p.exists():
            return p
    return None


def read_case(case_dir, with_labels=True):
    case_dir = Path(case_dir)
    case_id = case_dir.name
    vols = {}
    for m in MODALITIES:
        path = _find(case_dir, f"{case_id}_{m}")
        if path is None:
            raise FormatError(f"case {case_id}: missing {m} volume in {case_dir}")
        data, spacing = read_nifti(path)
        vols[m] = Volume(data, spacing)
    labels = None
    if with_labels:
        path = _find(case_dir, f"{case_id}_seg")
        if path is not None:
            data, _ = read_nifti(path)
            labels = data.astype(np.uint8)
    return CaseBundle(case_id, labels=labels, **vols)


def write_case(case, root, compress=False):
    ext = ".nii.gz" if compress else ".nii"
    case_dir = Path(root) / case.case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    for m in MODALITIES:
        vol = getattr(case, m)
        data = vol.data
        integral = np.array_equal(data, np.round(data)) and np.abs(data).max() < 32767
        write_nifti(case_dir / f"{case.case_id}_{m}{ext}", data, vol.spacing,
                    dtype=np.int16 if integral else np.float32)
    if case.labels is not None:
        write_nifti(case_dir / f"{case.case_id}_seg{ext}", case.labels, case.spacing, dtype=np.uint8)
    return case_dir


def list_cases(root):
    """Case directories under ``root`` (sorted), or ``root`` itself if it is one."""
    root = Path(root)
    if _find(root, f"{root.name}_flair") is not None:
        return [root]
    found = sorted(p for p in root.iterdir() if p.is_dir() and _find(p, f"{p.name}_flair"))
    if not found:
        raise FormatError(f"no cases found under {root}")
    return found


def case_exists(path):
    return os.path.isdir(path) and _find(path, f"{Path(path).name}_flair") is not None
