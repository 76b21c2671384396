"""CNN modulation classifier and the white-box evasion attacks against it."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import nn
from .errors import ConfigError, TrainingError
from .wireless import SCHEMES, SNR_GRID, Dataset

log = logging.getLogger(__name__)

N_CLASSES = len(SCHEMES)
KNOWLEDGE_LEVELS = ("white-box", "grey-box", "black-box")


def default_classifier_spec(frame_len: int = 128) -> nn.ModelSpec:
    flat = 32 * (frame_len - 6 - 4)
    return nn.ModelSpec((2, frame_len), (
        nn.conv1d(2, 16, 7), nn.relu(),
        nn.conv1d(16, 32, 5), nn.relu(),
        nn.flatten(),
        nn.dense(flat, 128), nn.relu(),
        nn.dense(128, N_CLASSES), nn.softmax(),
    ))


@dataclass(frozen=True)
class ThreatModel:
    """What the adversary knows and wants. Declared before any attack runs."""

    knowledge: str
    assumptions: str
    success_metric: str
    phase: str = "evasion"
    goal: str = "integrity"

    def __post_init__(self):
        if self.knowledge not in KNOWLEDGE_LEVELS:
            raise ConfigError(f"knowledge must be one of {KNOWLEDGE_LEVELS}")
        if self.phase != "evasion":
            raise ConfigError("only evasion attacks are supported")
        if not self.assumptions or not self.success_metric:
            raise ConfigError("threat model must state its assumptions and success metric")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ClassifierConfig:
    spec: nn.ModelSpec = field(default_factory=default_classifier_spec)
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    augment: str | None = None        # None, "gaussian" or "fgsm"
    augment_power_ratio: float = 0.05
    rotate: bool = True               # random carrier-phase rotation of every training frame

    def __post_init__(self):
        if self.spec.output_shape != (N_CLASSES,):
            raise ConfigError(f"classifier must output {N_CLASSES} classes")
        if self.spec.layers[-1].kind != "softmax":
            raise ConfigError("classifier must end in softmax")
        if self.augment not in (None, "gaussian", "fgsm"):
            raise ConfigError(f"unknown augmentation {self.augment!r}")


@dataclass
class CwAttackConfig:
    confidence: float = 0.0
    steps: int = 200
    lr: float = 0.01
    c_range: tuple[float, float] = (1e-3, 1e2)
    search_steps: int = 6
    max_power_ratio: float = 0.1

    def __post_init__(self):
        lo, hi = self.c_range
        if not 0 < lo <= hi:
            raise ConfigError("c search range must be positive and ordered")
        if self.steps < 1 or self.search_steps < 1:
            raise ConfigError("step counts must be >= 1")
        if self.confidence < 0 or self.max_power_ratio <= 0:
            raise ConfigError("confidence must be >= 0 and the power budget positive")


@dataclass
class AttackRecord:
    success: bool
    l2: float
    power_ratio: float
    iterations: int
    trace: list = field(default_factory=list)  # (c, success, accepted l2) per search step


def logits(model: nn.ModelState, x) -> np.ndarray:
    return nn.forward(model, x, upto=len(model.spec.layers) - 1)


def predict(model: nn.ModelState, x, batch: int = 1024) -> np.ndarray:
    x = np.asarray(x)
    out = [np.argmax(logits(model, x[i:i + batch]), axis=1) for i in range(0, len(x), batch)]
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def predict_proba(model: nn.ModelState, x, batch: int = 1024) -> np.ndarray:
    x = np.asarray(x)
    return np.concatenate([nn.forward(model, x[i:i + batch]) for i in range(0, len(x), batch)])


def _loss_and_grads(model, x, y, need_params=True):
    tape = nn.forward_record(model, x)
    loss, g = nn.cross_entropy(tape.activations[-2], y, from_logits=True)
    grads = nn.backward(model, tape, g, at=len(model.spec.layers) - 1, need_params=need_params)
    return loss, tape.output, grads


def _evaluate(model, ds: Dataset):
    if not len(ds):
        return math.nan, math.nan
    losses, correct = [], 0
    for i in range(0, len(ds), 1024):
        z = logits(model, ds.x[i:i + 1024])
        losses.append(nn.cross_entropy(z, ds.labels[i:i + 1024], from_logits=True)[0] * len(z))
        correct += int((np.argmax(z, axis=1) == ds.labels[i:i + 1024]).sum())
    return sum(losses) / len(ds), correct / len(ds)


def train_classifier(dataset: Dataset, config: ClassifierConfig | None = None):
    """Train on the dataset's train split. Returns (model, history).

    History has one dict per epoch with train/test loss and accuracy.
    """
    config = config or ClassifierConfig()
    train = dataset.train_set
    if not len(train):
        raise ConfigError("dataset has no training frames")
    missing = set(range(N_CLASSES)) - set(np.unique(train.labels).tolist())
    if missing:
        raise ConfigError(f"classes missing from training data: {sorted(SCHEMES[m] for m in missing)}")
    model = nn.init_model(config.spec, config.seed)
    optim = nn.OptimState("adam", lr=config.lr)
    rng = np.random.default_rng(config.seed)
    params = model.flat_params()
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        total, correct = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            x, y = train.x[idx].astype(np.float64), train.labels[idx]
            if config.rotate:
                x = rotate_iq(x, rng.uniform(0, 2 * np.pi, len(x)))
            if config.augment:
                x = _augment(model, x, y, config, rng)
            loss, probs, grads = _loss_and_grads(model, x, y)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss in epoch {epoch}", epoch)
            nn.optimizer_step(optim, params, [g for gs in grads.params for g in gs])
            total += loss * len(idx)
            correct += int((np.argmax(probs, axis=1) == y).sum())
        test_loss, test_acc = _evaluate(model, dataset.test_set)
        history.append({"epoch": epoch, "train_loss": total / len(train), "train_acc": correct / len(train),
                        "test_loss": test_loss, "test_acc": test_acc})
        log.info("epoch %d train_loss %.4f test_acc %.4f", epoch, total / len(train), test_acc)
    return model, history


def rotate_iq(x: np.ndarray, angles) -> np.ndarray:
    """Rotate (N, 2, L) IQ frames by per-frame carrier phase angles."""
    c, s = np.cos(angles)[:, None], np.sin(angles)[:, None]
    i, q = x[:, 0], x[:, 1]
    return np.stack([c * i - s * q, s * i + c * q], axis=1)


def _augment(model, x, y, config, rng):
    """Replace half the batch with perturbed copies at the configured power ratio."""
    half = len(x) // 2
    energy = np.sum(x[:half] ** 2, axis=(1, 2)) * config.augment_power_ratio
    if config.augment == "gaussian":
        d = rng.standard_normal(x[:half].shape)
        d *= np.sqrt(energy / np.sum(d**2, axis=(1, 2)))[:, None, None]
    else:
        eps = np.sqrt(energy / x[0].size)
        d = fgsm_attack(model, x[:half], y[:half], eps)
    x = x.copy()
    x[:half] += d
    return x


def accuracy_vs_snr(predictor, dataset: Dataset, expected_snrs=SNR_GRID) -> list[tuple[int, float]]:
    """Accuracy per SNR level present in ``dataset``.

    ``predictor`` is a ModelState or any callable mapping frames to class
    indices. SNR levels in ``expected_snrs`` with no frames are skipped with
    a warning.
    """
    predict_fn: Callable = (lambda x: predict(predictor, x)) if isinstance(predictor, nn.ModelState) else predictor
    present = sorted(set(dataset.snr.tolist()))
    missing = [s for s in (expected_snrs or ()) if s not in present]
    if missing:
        warnings.warn(f"no frames at SNR {missing} dB; points omitted", stacklevel=2)
    preds = np.asarray(predict_fn(dataset.x))
    return [(int(s), float(np.mean(preds[dataset.snr == s] == dataset.labels[dataset.snr == s]))) for s in present]


def fgsm_attack(model: nn.ModelState, frames, labels, epsilon) -> np.ndarray:
    """delta = epsilon * sign(grad_x loss). ``epsilon`` may be per-frame."""
    x = np.asarray(frames, dtype=np.float64)
    single = x.shape == model.spec.input_shape
    if single:
        x = x[None]
    y = np.atleast_1d(labels)
    _, _, grads = _loss_and_grads(model, x, y, need_params=False)
    eps = np.asarray(epsilon, dtype=float).reshape((-1,) + (1,) * (x.ndim - 1))
    delta = eps * np.sign(grads.input)
    return delta[0] if single else delta


def fgsm_epsilon(frames, power_ratio: float) -> np.ndarray:
    """Per-frame epsilon whose full-sign perturbation has ``power_ratio * ||x||^2`` energy."""
    x = np.asarray(frames, dtype=np.float64)
    x = x.reshape(len(x), -1)
    return np.sqrt(power_ratio * np.sum(x**2, axis=1) / x.shape[1])


def matched_random_perturbation(deltas, seed) -> np.ndarray:
    """Gaussian perturbations with exactly the same per-frame L2 norm as ``deltas``."""
    deltas = np.asarray(deltas, dtype=np.float64)
    rng = np.random.default_rng(seed)
    r = rng.standard_normal(deltas.shape)
    axes = tuple(range(1, deltas.ndim))
    target = np.sqrt(np.sum(deltas**2, axis=axes, keepdims=True))
    return r * target / np.sqrt(np.sum(r**2, axis=axes, keepdims=True))


def _project(delta, radius):
    norm = np.sqrt(np.sum(delta**2, axis=(1, 2)))
    scale = np.where(norm > radius, radius / np.maximum(norm, 1e-300), 1.0)
    return delta * scale[:, None, None]


def cw_l2_attack(model: nn.ModelState, frames, labels, config: CwAttackConfig | None = None):
    """Carlini-Wagner L2 evasion on a batch of frames.

    Minimises ||delta||^2 + c * max(Z_true - max_other Z, -confidence) with
    Adam directly on delta, projecting onto the power-ratio ball after every
    step. The first search step runs at the largest c to test feasibility;
    the remaining steps bisect c in log space, keeping the smallest
    successful delta. Returns (deltas, records).
    """
    cfg = config or CwAttackConfig()
    x = np.asarray(frames, dtype=np.float64)
    single = x.shape == model.spec.input_shape
    if single:
        x = x[None]
    y = np.atleast_1d(np.asarray(labels))
    n = len(x)
    x_energy = np.sum(x**2, axis=(1, 2))
    radius = np.sqrt(cfg.max_power_ratio * x_energy)
    logit_layer = len(model.spec.layers) - 1

    best = np.zeros_like(x)
    best_l2 = np.full(n, np.inf)
    iters = np.zeros(n, dtype=int)
    traces = [[] for _ in range(n)]

    already = np.argmax(logits(model, x), axis=1) != y
    best_l2[already] = 0.0
    active = ~already
    lo = np.full(n, math.log10(cfg.c_range[0]))
    hi = np.full(n, math.log10(cfg.c_range[1]))
    log_c = hi.copy()
    feasible = np.zeros(n, dtype=bool)

    for search in range(cfg.search_steps):
        idx = np.flatnonzero(active)
        if not len(idx):
            break
        c = 10 ** log_c[idx]
        xi, yi, ri = x[idx], y[idx], radius[idx]
        delta = np.zeros_like(xi)
        opt = nn.OptimState("adam", lr=cfg.lr)
        found = np.zeros(len(idx), dtype=bool)
        sub_rows = np.arange(len(idx))
        for step in range(cfg.steps):
            tape = nn.forward_record(model, xi + delta)
            z = tape.activations[logit_layer]
            masked = z.copy()
            masked[sub_rows, yi] = -np.inf
            j = masked.argmax(axis=1)
            gap = z[sub_rows, yi] - z[sub_rows, j]
            wrong = gap < 0
            l2 = np.sqrt(np.sum(delta**2, axis=(1, 2)))
            improve = wrong & (l2 < best_l2[idx])
            if improve.any():
                best[idx[improve]] = delta[improve]
                best_l2[idx[improve]] = l2[improve]
                iters[idx[improve]] = search * cfg.steps + step
            found |= wrong
            hinge_active = gap > -cfg.confidence
            gz = np.zeros_like(z)
            gz[sub_rows, yi] = c * hinge_active
            gz[sub_rows, j] -= c * hinge_active
            gx = nn.backward(model, tape, gz, at=logit_layer, need_params=False).input
            nn.optimizer_step(opt, [delta], [gx + 2 * delta])
            delta[...] = _project(delta, ri)
        # final iterate is checked too
        z = logits(model, xi + delta)
        wrong = np.argmax(z, axis=1) != yi
        l2 = np.sqrt(np.sum(delta**2, axis=(1, 2)))
        improve = wrong & (l2 < best_l2[idx])
        best[idx[improve]] = delta[improve]
        best_l2[idx[improve]] = l2[improve]
        iters[idx[improve]] = (search + 1) * cfg.steps
        found |= wrong

        for k, i in enumerate(idx):
            traces[i].append((float(10 ** log_c[i]), bool(found[k]), float(best_l2[i])))
        if search == 0:
            feasible[idx] = found
            active[idx[~found]] = False
            log_c[idx] = (lo[idx] + hi[idx]) / 2
            continue
        hi[idx[found]] = log_c[idx[found]]
        lo[idx[~found]] = log_c[idx[~found]]
        log_c[idx] = (lo[idx] + hi[idx]) / 2

    success = np.isfinite(best_l2)
    best[~success] = 0.0
    records = [AttackRecord(bool(success[i]),
                            float(best_l2[i]) if success[i] else 0.0,
                            float(best_l2[i] ** 2 / x_energy[i]) if success[i] else 0.0,
                            int(iters[i]), traces[i]) for i in range(n)]
    if single:
        return best[0], records[0]
    return best, records
