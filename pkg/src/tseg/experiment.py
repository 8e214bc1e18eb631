"""Train-and-score runs on phantom data, used by the acceptance suite."""

import dataclasses
import logging
import time

import numpy as np

from . import network as net
from . import training as T
from .data import CropSpec, make_phantom_case, preprocess_case
from .metrics import dice

log = logging.getLogger(__name__)

BRANCH_NAMES = ("wt", "et", "net")


@dataclasses.dataclass
class PhantomResult:
    params: net.ModelParams
    history: list
    per_case: list  # one {branch: dice} per held-out case
    seconds: float

    @property
    def mean_dice(self):
        return {b: float(np.mean([c[b] for c in self.per_case])) for b in BRANCH_NAMES}


def prepare_phantom(data_seed=0, n_cases=16, n_train=12, crop=None):
    """Training slices of the first ``n_train`` phantom cases and the preprocessed rest.

    Training cases are written straight into one slice array so that only
    a single copy of them is ever held.
    """
    if not 0 < n_train < n_cases:
        raise ValueError("need at least one training and one held-out case")
    crop = crop or CropSpec()
    images = labels = None
    for i in range(n_train):
        case = preprocess_case(make_phantom_case(data_seed, i), crop)
        stack = case.image_stack()
        s = stack.shape[0]
        if images is None:
            images = np.empty((n_train * s,) + stack.shape[1:], dtype=np.float32)
            labels = np.empty((n_train * s,) + stack.shape[2:], dtype=np.uint8)
        images[i * s:(i + 1) * s] = stack
        labels[i * s:(i + 1) * s] = case.labels
    held_out = [preprocess_case(make_phantom_case(data_seed, i), crop) for i in range(n_train, n_cases)]
    return T.SliceDataset(images, labels), held_out


def branch_dice(params, case, chunk=8):
    """Binary Dice of each branch (probability > 0.5) against the case's branch masks."""
    probs = net.predict_probabilities(params, case.image_stack(), chunk=chunk)
    targets = T.branch_targets(case.labels)
    return {b: dice(probs[i] > 0.5, targets[:, i] > 0) for i, b in enumerate(BRANCH_NAMES)}


def run_phantom_experiment(config, dataset, held_out, on_epoch=None):
    """Train on ``dataset`` and score each held-out case."""
    t0 = time.perf_counter()
    params, history = T.train(dataset, config, on_epoch=on_epoch)
    per_case = [branch_dice(params, c) for c in held_out]
    res = PhantomResult(params, history, per_case, time.perf_counter() - t0)
    log.info("phantom run seed %d: %s in %.0fs", config.seed, res.mean_dice, res.seconds)
    return res
