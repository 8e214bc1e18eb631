"""Losses, Adam, the step learning-rate schedule, augmentation and the training loop."""

import dataclasses
import json
import logging
import math

import numpy as np

from . import engine as E
from . import network as net
from .errors import ContractError, DimensionError, NumericError, TrainingError
from .rng import stream

log = logging.getLogger(__name__)


@dataclasses.dataclass
class TrainConfig:
    batch_slices: int = 128
    micro_batch: int = 0
    epochs: int = 75
    lr0: float = 0.005
    lr_halving_period: int = 15
    tversky_alpha: float = 0.3
    tversky_beta: float = 0.7
    loss_eps: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    augment_hflip: bool = True
    augment_vflip: bool = True
    augment_rot180: bool = True
    branch_schedule: str = "summed"
    freeze: tuple = ()

    def __post_init__(self):
        self.freeze = tuple(self.freeze)
        if self.lr0 <= 0:
            raise ContractError("lr0 must be positive")
        if self.tversky_alpha < 0 or self.tversky_beta < 0:
            raise ContractError("tversky_alpha and tversky_beta must be non-negative")
        if self.batch_slices < 1 or self.epochs < 0 or self.lr_halving_period < 1:
            raise ContractError("batch_slices and lr_halving_period must be >= 1, epochs >= 0")
        if self.micro_batch < 0:
            raise ContractError("micro_batch must be >= 0 (0 means the whole batch)")
        if self.branch_schedule not in ("summed", "alternating"):
            raise ContractError("branch_schedule must be 'summed' or 'alternating'")

    @property
    def chunk(self):
        """Slices per forward/backward pass; gradients accumulate over a batch."""
        if self.micro_batch == 0:
            return self.batch_slices
        return min(self.micro_batch, self.batch_slices)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["freeze"] = list(self.freeze)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# -- losses --------------------------------------------------------------------

def _loss_inputs(pred, target):
    t = np.asarray(target)
    if t.shape != pred.shape:
        raise DimensionError(f"loss: prediction {pred.shape} and target {t.shape} differ")
    return pred.data.astype(np.float64), t.astype(np.float64)


def _scalar(value, dtype):
    return np.array(value, dtype=dtype).reshape(1, 1, 1, 1)


def dice_loss(pred, target, eps=1e-6):
    """Soft Dice loss 1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)."""
    p, t = _loss_inputs(pred, target)
    inter = float(np.sum(p * t))
    denom = float(np.sum(p) + np.sum(t)) + eps
    num = 2.0 * inter + eps
    value = 1.0 - num / denom

    def make_backward(needs):
        def backward(gy):
            g = -(2.0 * t * denom - num) / denom ** 2
            return ((float(gy.reshape(())) * g).astype(pred.data.dtype),)
        return backward

    return E.apply("dice_loss", (pred,), _scalar(value, pred.data.dtype), make_backward)


def tversky_loss(pred, target, alpha=0.3, beta=0.7, eps=1e-6):
    """Tversky loss 1 - (TP + eps) / (TP + alpha FP + beta FN + eps).

    ``alpha`` weights false positives, ``beta`` false negatives.
    """
    p, t = _loss_inputs(pred, target)
    tp = float(np.sum(p * t))
    fp = float(np.sum(p * (1.0 - t)))
    fn = float(np.sum((1.0 - p) * t))
    num = tp + eps
    denom = tp + alpha * fp + beta * fn + eps
    value = 1.0 - num / denom

    def make_backward(needs):
        def backward(gy):
            d_denom = t + alpha * (1.0 - t) - beta * t
            g = -(t * denom - num * d_denom) / denom ** 2
            return ((float(gy.reshape(())) * g).astype(pred.data.dtype),)
        return backward

    return E.apply("tversky_loss", (pred,), _scalar(value, pred.data.dtype), make_backward)


# -- schedule and optimiser ------------------------------------------------------

def lr_at(epoch, config):
    if not 0 <= epoch < max(config.epochs, 1):
        raise ContractError(f"epoch {epoch} outside [0, {config.epochs})")
    return config.lr0 * 2.0 ** (-(epoch // config.lr_halving_period))


class AdamState:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    @classmethod
    def for_config(cls, params, config):
        return cls(params, config.adam_beta1, config.adam_beta2, config.adam_eps)


def adam_step(params, state, lr):
    """One bias-corrected Adam update of every trainable parameter, in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        if not p.trainable:
            continue
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data[...] -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)
    return params


# -- data ------------------------------------------------------------------------

def branch_targets(labels):
    """Binary WT / ET / NET masks for a label array; stacked on a new axis 1."""
    labels = np.asarray(labels)
    wt = np.isin(labels, (1, 2, 4))
    et = labels == 4
    nt = labels == 1
    return np.stack([wt, et, nt], axis=1).astype(np.uint8)


class SliceDataset:
    """In-memory 2D training slices: images [S, 4, H, W] float32, labels [S, H, W] uint8."""

    def __init__(self, images, labels):
        images = np.ascontiguousarray(images, dtype=np.float32)
        labels = np.ascontiguousarray(labels, dtype=np.uint8)
        if images.ndim != 4 or images.shape[1] != 4:
            raise DimensionError(f"images must be [S, 4, H, W], got {images.shape}")
        if labels.shape != (images.shape[0],) + images.shape[2:]:
            raise DimensionError(f"labels {labels.shape} do not match images {images.shape}")
        if images.shape[0] == 0:
            raise ContractError("dataset is empty")
        self.images = images
        self.labels = labels

    def __len__(self):
        return self.images.shape[0]

    @classmethod
    def from_cases(cls, cases):
        """Stack preprocessed cases (already cropped and normalised), slice axis first."""
        images = np.concatenate([c.image_stack() for c in cases], axis=0)
        labels = np.concatenate([c.labels for c in cases], axis=0)
        return cls(images, labels)


def augment(images, targets, rng, hflip=True, vflip=True, rot180=True):
    """Random per-sample flips / 180-degree rotation, applied identically to images and masks.

    Each enabled transform fires independently with probability 0.5.
    Arrays are [N, C, H, W]; returns new arrays.
    """
    images = images.copy()
    targets = targets.copy()
    n = images.shape[0]
    draws = rng.random((n, 3)) < 0.5
    for i in range(n):
        h, v, r = draws[i]
        flip_w = bool(hflip and h) ^ bool(rot180 and r)
        flip_h = bool(vflip and v) ^ bool(rot180 and r)
        if flip_w:
            images[i] = images[i][:, :, ::-1]
            targets[i] = targets[i][:, :, ::-1]
        if flip_h:
            images[i] = images[i][:, ::-1, :]
            targets[i] = targets[i][:, ::-1, :]
    return images, targets


def epoch_permutations(n, epochs, seed):
    """The slice orders train() uses, one per epoch."""
    rng = stream(seed, "shuffle")
    return [rng.permutation(n) for _ in range(epochs)]


def batch_loss(outputs, targets, config, which=None):
    """Sum of the per-branch losses; ``which`` restricts to one branch."""
    terms = []
    wt, et, nt = outputs
    if wt is not None and which in (None, "wt"):
        terms.append(dice_loss(wt, targets[:, 0:1], config.loss_eps))
    if et is not None and which in (None, "et"):
        terms.append(tversky_loss(et, targets[:, 1:2], config.tversky_alpha,
                                  config.tversky_beta, config.loss_eps))
    if nt is not None and which in (None, "net"):
        terms.append(tversky_loss(nt, targets[:, 2:3], config.tversky_alpha,
                                  config.tversky_beta, config.loss_eps))
    total = terms[0]
    for t in terms[1:]:
        total = E.add(total, t)
    return total


def train(dataset, config, params=None, net_config=None, on_epoch=None):
    """Train on ``dataset``; returns ``(params, loss_history)``, one mean loss per epoch.

    A batch of ``batch_slices`` slices is split into passes of
    ``config.chunk`` slices whose gradients accumulate (each pass weighted by
    its share of the batch) before a single Adam step.  With the default
    ``micro_batch=0`` each batch is one pass, so batch-norm statistics and the
    overlap losses cover the whole batch.
    """
    if len(dataset) == 0:
        raise ContractError("dataset is empty")
    if params is None:
        params = net.build_network(net_config or net.NetworkConfig(), seed=config.seed)
    for prefix in config.freeze:
        params.freeze(prefix)
    state = AdamState.for_config(params, config)
    aug_rng = stream(config.seed, "augment")
    perms = epoch_permutations(len(dataset), config.epochs, config.seed)
    schedule = [b for b in params.config.branches]
    history = []
    step = 0
    for epoch, perm in enumerate(perms):
        lr = lr_at(epoch, config)
        total, seen = 0.0, 0
        for bi, start in enumerate(range(0, len(perm), config.batch_slices)):
            idx = perm[start:start + config.batch_slices]
            images = dataset.images[idx]
            targets = branch_targets(dataset.labels[idx])
            images, targets = augment(images, targets, aug_rng, config.augment_hflip,
                                      config.augment_vflip, config.augment_rot180)
            which = None
            if config.branch_schedule == "alternating":
                which = schedule[step % len(schedule)]
            params.zero_grad()
            batch_value = 0.0
            try:
                for cs in range(0, len(idx), config.chunk):
                    xi = images[cs:cs + config.chunk]
                    ti = targets[cs:cs + config.chunk]
                    weight = len(xi) / len(idx)
                    with E.Tape() as tape:
                        out = net.forward(params, xi, mode="train")
                        loss = batch_loss(out, ti, config, which)
                        value = float(loss.data.reshape(()))
                        if not math.isfinite(value):
                            raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}",
                                                epoch, bi)
                        scaled = scale(loss, weight)
                    tape.backward(scaled)
                    batch_value += value * weight
                _check_grads(params, epoch, bi)
            except NumericError as exc:
                raise TrainingError(f"numeric failure at epoch {epoch}, batch {bi}: {exc}",
                                    epoch, bi) from exc
            adam_step(params, state, lr)
            step += 1
            total += batch_value * len(idx)
            seen += len(idx)
            log.debug("epoch %d batch %d loss %.5f", epoch, bi, batch_value)
        history.append(total / seen)
        log.info("epoch %d lr %.6g loss %.5f", epoch, lr, history[-1])
        if on_epoch is not None:
            on_epoch(epoch, history[-1], params)
    return params, history


def scale(x, factor):
    """Multiply a tensor by a Python scalar."""
    return E.apply("scale", (x,), x.data * x.data.dtype.type(factor),
                   lambda needs: (lambda gy: (gy * gy.dtype.type(factor),)))


def _check_grads(params, epoch, bi):
    for name, p in params.trainable():
        if not np.isfinite(p.grad).all():
            raise TrainingError(f"non-finite gradient in {name} at epoch {epoch}, batch {bi}",
                                epoch, bi)
