"""Volume I/O, pre-processing and synthetic phantoms."""

from .cases import (
    MODALITIES,
    NATIVE_DIMS,
    CaseBundle,
    CropSpec,
    Volume,
    check_labels,
    embed_prediction,
    list_cases,
    normalize_modality,
    preprocess_case,
    read_case,
    write_case,
)
from .nifti import read_nifti, write_nifti
from .phantom import iter_phantom, make_phantom, make_phantom_case
