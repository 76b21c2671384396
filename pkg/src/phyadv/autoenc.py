"""End-to-end (n, k) channel autoencoder over AWGN and the data-independent
universal perturbation that attacks its decoder."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, FormatError, TrainingError
from .wireless import ebno_to_snr, jamming_noise

log = logging.getLogger(__name__)


@dataclass
class AutoencoderConfig:
    k: int = 4
    n: int = 7
    hidden: int | None = None       # defaults to M = 2**k
    train_ebno_db: float = 7.0
    steps: int = 4000
    batch_size: int = 512
    lr: float = 5e-3
    final_lr: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.n < 1:
            raise ConfigError("k and n must be positive")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch size must be positive")

    @property
    def m(self) -> int:
        return 2 ** self.k

    @property
    def rate(self) -> float:
        return self.k / self.n

    @property
    def width(self) -> int:
        return self.hidden or self.m


def encoder_spec(cfg: AutoencoderConfig) -> nn.ModelSpec:
    return nn.ModelSpec((cfg.m,), (nn.dense(cfg.m, cfg.width), nn.relu(), nn.dense(cfg.width, cfg.n),
                                   nn.energy_norm(cfg.n)))


def decoder_spec(cfg: AutoencoderConfig) -> nn.ModelSpec:
    return nn.ModelSpec((cfg.n,), (nn.dense(cfg.n, cfg.width), nn.relu(), nn.dense(cfg.width, cfg.m),
                                   nn.softmax()))


def noise_std(ebno_db: float, rate: float) -> float:
    """Per-real-dimension noise std for unit-energy channel uses at ``ebno_db``."""
    snr = 10 ** (ebno_to_snr(ebno_db, rate) / 10)
    return math.sqrt(1 / (2 * snr))


def one_hot(messages, m: int) -> np.ndarray:
    return np.eye(m)[np.asarray(messages)]


def encode(encoder: nn.ModelState, messages) -> np.ndarray:
    return nn.forward(encoder, one_hot(messages, encoder.spec.input_shape[0]))


def decode(decoder: nn.ModelState, received) -> np.ndarray:
    return np.argmax(nn.forward(decoder, received, upto=len(decoder.spec.layers) - 1), axis=1)


@dataclass
class Autoencoder:
    config: AutoencoderConfig
    encoder: nn.ModelState
    decoder: nn.ModelState
    history: list = field(default_factory=list)


def train_autoencoder(config: AutoencoderConfig | None = None) -> Autoencoder:
    """Train encoder and decoder jointly through an AWGN layer.

    Noise is redrawn every batch. The learning rate steps down to
    ``final_lr`` for the last third of training.
    """
    cfg = config or AutoencoderConfig()
    enc = nn.init_model(encoder_spec(cfg), cfg.seed)
    dec = nn.init_model(decoder_spec(cfg), cfg.seed + 1)
    rng = np.random.default_rng(cfg.seed)
    params = enc.flat_params() + dec.flat_params()
    opt = nn.OptimState("adam", lr=cfg.lr)
    sigma = noise_std(cfg.train_ebno_db, cfg.rate)
    logit_at = len(dec.spec.layers) - 1
    history = []
    for step in range(cfg.steps):
        if step == (2 * cfg.steps) // 3:
            opt.lr = cfg.final_lr
        msgs = rng.integers(0, cfg.m, cfg.batch_size)
        etape = nn.forward_record(enc, one_hot(msgs, cfg.m))
        y = etape.output + sigma * rng.standard_normal(etape.output.shape)
        dtape = nn.forward_record(dec, y)
        loss, g = nn.cross_entropy(dtape.activations[logit_at], msgs, from_logits=True)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}", step)
        dgrads = nn.backward(dec, dtape, g, at=logit_at)
        egrads = nn.backward(enc, etape, dgrads.input)
        nn.optimizer_step(opt, params, [g for gs in egrads.params + dgrads.params for g in gs])
        if step % 500 == 0 or step == cfg.steps - 1:
            history.append({"step": step, "loss": loss})
            log.info("autoencoder step %d loss %.5f", step, loss)
    return Autoencoder(cfg, enc, dec, history)


# --- channel modifiers and BLER curves ---------------------------------------

@dataclass(frozen=True)
class ChannelModifier:
    """Additive post-AWGN impairment.

    kind "none"; "jam" with ``power_ratio`` relative to codeword energy n;
    "adversarial" with a fixed vector ``delta`` added to every block.
    """

    kind: str = "none"
    power_ratio: float = 0.0
    delta: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("none", "jam", "adversarial"):
            raise ConfigError(f"unknown channel modifier {self.kind!r}")
        if self.kind == "adversarial" and self.delta is None:
            raise ConfigError("adversarial modifier needs delta")

    @classmethod
    def jam(cls, power_ratio: float) -> "ChannelModifier":
        return cls("jam", power_ratio)

    @classmethod
    def adversarial(cls, delta) -> "ChannelModifier":
        return cls("adversarial", delta=np.asarray(delta, dtype=float))

    def energy(self, n: int) -> float:
        if self.kind == "jam":
            return self.power_ratio * n
        if self.kind == "adversarial":
            return float(np.sum(self.delta**2))
        return 0.0

    def apply(self, y: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "jam" and self.power_ratio > 0:
            return y + jamming_noise(y.shape, self.power_ratio * n, rng)
        if self.kind == "adversarial":
            return y + self.delta
        return y


@dataclass
class BlerPoint:
    ebno_db: float
    bler: float
    errors: int
    trials: int
    low_confidence: bool


def bler_curve(ae: Autoencoder, ebno_grid, trials: int, modifier: ChannelModifier | None = None,
               seed: int = 0, chunk: int = 100_000) -> list[BlerPoint]:
    """Monte-Carlo BLER per Eb/N0 point.

    Messages and AWGN come from streams keyed on (seed, point index) only,
    so curves with different modifiers see identical messages and noise.
    Points with fewer than 10 errors are flagged low-confidence.
    """
    modifier = modifier or ChannelModifier()
    cfg = ae.config
    out = []
    for i, ebno in enumerate(ebno_grid):
        msg_rng = np.random.default_rng([seed, i, 0])
        side = np.random.default_rng([seed, i, 1])
        noise_rng = np.random.default_rng([seed, i, 2])
        sigma = noise_std(ebno, cfg.rate)
        errors, done = 0, 0
        while done < trials:
            size = min(chunk, trials - done)
            msgs = msg_rng.integers(0, cfg.m, size)
            y = encode(ae.encoder, msgs) + sigma * noise_rng.standard_normal((size, cfg.n))
            y = modifier.apply(y, cfg.n, side)
            errors += int(np.sum(decode(ae.decoder, y) != msgs))
            done += size
        out.append(BlerPoint(float(ebno), errors / trials, errors, trials, errors < 10))
    return out


# --- universal perturbation ----------------------------------------------------

@dataclass
class UniversalPerturbation:
    delta: np.ndarray
    power_ratio: float              # ||delta||^2 / n
    seed: int
    trace: list = field(default_factory=list)            # objective per ascent step
    layer_means: list = field(default_factory=list)      # mean activation per hidden layer at delta


def _hidden_layers(decoder: nn.ModelState, objective: str) -> list[int]:
    """Indices (into tape activations) of the layers whose mean activation is maximised."""
    layers = decoder.spec.layers
    pre_softmax = len(layers) - 1 if layers[-1].kind == "softmax" else len(layers)
    if objective == "final":
        return [pre_softmax]
    idx = [i + 1 for i, layer in enumerate(layers[:pre_softmax]) if layer.kind == "relu"]
    if objective == "hidden":
        return idx
    if objective == "hidden+logits":
        return idx + [pre_softmax]
    raise ConfigError(f"unknown objective {objective!r}")


def activation_objective(decoder: nn.ModelState, deltas, objective: str = "hidden"):
    """Per-row sum over selected layers of the mean unit activation, plus its gradient."""
    tape = nn.forward_record(decoder, deltas)
    picks = _hidden_layers(decoder, objective)
    values = sum(tape.activations[i].mean(axis=1) for i in picks)
    grad = np.zeros_like(deltas)
    for i in picks:
        a = tape.activations[i]
        grad += nn.backward(decoder, tape, np.full_like(a, 1.0 / a.shape[1]), at=i, need_params=False).input
    return values, grad, [tape.activations[i].mean(axis=1) for i in picks]


def _project_l2(d, radius):
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    return d * np.minimum(1.0, radius / np.maximum(norm, 1e-300))


def craft_universal_perturbations(decoder: nn.ModelState, power_ratio: float, seeds, steps: int = 500,
                                  step_fraction: float = 0.01, objective: str = "hidden",
                                  max_backtracks: int = 8) -> list[UniversalPerturbation]:
    """Craft one perturbation per seed; rows are optimised independently.

    Each delta starts as a Gaussian draw scaled onto the budget sphere
    ``||delta||^2 = power_ratio * n``, then follows projected gradient
    ascent on the decoder's mean activations with normalised steps of
    ``step_fraction * budget``. A step that lowers the objective is halved
    until it does not (or the row stays put). Only decoder weights, the
    seeds and the budget are consulted.
    """
    seeds = [int(s) for s in seeds]
    n = decoder.spec.input_shape[0]
    if power_ratio < 0:
        raise ConfigError("budget must be >= 0")
    if power_ratio == 0:
        warnings.warn("zero budget: returning delta = 0", stacklevel=2)
        return [UniversalPerturbation(np.zeros(n), 0.0, s) for s in seeds]
    radius = math.sqrt(power_ratio * n)
    delta = np.stack([np.random.default_rng(s).standard_normal(n) for s in seeds])
    delta = delta * (radius / np.linalg.norm(delta, axis=1, keepdims=True))
    value, grad, _ = activation_objective(decoder, delta, objective)
    traces = [[float(v)] for v in value]
    step = np.full(len(seeds), step_fraction * radius)
    for _ in range(steps):
        gnorm = np.linalg.norm(grad, axis=1, keepdims=True)
        direction = grad / np.maximum(gnorm, 1e-300)
        trial_step = step.copy()
        pending = np.ones(len(seeds), dtype=bool)
        new_delta = delta.copy()
        new_value = value.copy()
        for _ in range(max_backtracks + 1):
            cand = _project_l2(delta + trial_step[:, None] * direction, radius)
            cand_value = activation_objective(decoder, cand, objective)[0]
            ok = pending & (cand_value >= value)
            new_delta[ok], new_value[ok] = cand[ok], cand_value[ok]
            pending &= ~ok
            if not pending.any():
                break
            trial_step[pending] /= 2
        delta, value = new_delta, new_value
        value, grad, _ = activation_objective(decoder, delta, objective)
        for t, v in zip(traces, value):
            t.append(float(v))
    _, _, means = activation_objective(decoder, delta, objective)
    return [UniversalPerturbation(delta[r].copy(), float(np.sum(delta[r] ** 2) / n), seeds[r], traces[r],
                                  [float(m[r]) for m in means]) for r in range(len(seeds))]


def craft_universal_perturbation(decoder: nn.ModelState, power_ratio: float = 0.25, steps: int = 500,
                                 seed: int = 0, **kwargs) -> UniversalPerturbation:
    return craft_universal_perturbations(decoder, power_ratio, [seed], steps, **kwargs)[0]


def save_perturbation(pert: UniversalPerturbation, path) -> None:
    nn.write_container(path, [("UPERT", (len(pert.delta),), [pert.delta])], pert.seed)


def load_perturbation(path) -> UniversalPerturbation:
    records, seed, _ = nn.read_container(path)
    if len(records) != 1 or records[0][0] != "UPERT":
        raise FormatError("file does not hold a single UPERT record")
    delta = records[0][2][0]
    return UniversalPerturbation(delta, float(np.sum(delta**2) / len(delta)), seed)
