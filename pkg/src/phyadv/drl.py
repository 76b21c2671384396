"""Channel autoencoder trained without a channel model.

The transmitter learns by policy gradient from per-example losses that the
receiver sends back over a noisy feedback link; the receiver is trained as
an ordinary supervised classifier. A black-box adversary can add
perturbations, transferred from an independently trained surrogate, to the
broadcast channel during a window of communication rounds.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .autoenc import (Autoencoder, AutoencoderConfig, ChannelModifier, UniversalPerturbation, bler_curve,
                      craft_universal_perturbations, decoder_spec, encoder_spec, noise_std, one_hot,
                      train_autoencoder)
from .errors import ConfigError, NumericError, TrainingError

log = logging.getLogger(__name__)


@dataclass
class DrlConfig:
    base: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    sigma_pi: float = 0.15          # exploration stddev of the Gaussian policy
    sigma_f: float = 0.1            # feedback-link noise on per-example losses
    batch_size: int = 256           # messages per communication round
    receiver_epochs: int = 5        # supervised passes over each round's batch
    total_steps: int = 600
    channel_ebno_db: float = 4.0
    tx_lr: float = 5e-3
    rx_lr: float = 5e-3
    seed: int = 0

    def __post_init__(self):
        if not self.sigma_pi > 0:
            raise ConfigError("exploration stddev must be > 0")
        if self.sigma_f < 0:
            raise ConfigError("feedback noise stddev must be >= 0")
        if self.batch_size < 1 or self.receiver_epochs < 1 or self.total_steps < 1:
            raise ConfigError("batch size, receiver epochs and total steps must be positive")


@dataclass
class AttackSchedule:
    """Which rounds are attacked and with what.

    ``pool`` holds perturbations (``UniversalPerturbation`` or raw vectors).
    Policy "uniform" draws one member per round; "round-robin" walks the
    pool in order.
    """

    pool: list
    start: int = 200
    end: int = 400
    policy: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ConfigError("attack window needs 0 <= start < end")
        if self.policy not in ("uniform", "round-robin"):
            raise ConfigError(f"unknown application policy {self.policy!r}")
        if len(self.pool) == 0:
            raise ConfigError("attack window is active but the perturbation pool is empty")

    def validate(self, total_steps: int) -> None:
        if self.end > total_steps:
            raise ConfigError(f"attack window end {self.end} exceeds {total_steps} time steps")

    def deltas(self) -> np.ndarray:
        return np.stack([np.asarray(getattr(p, "delta", p), dtype=float) for p in self.pool])


class BroadcastAdversary:
    """Adversary that only adds vectors to the channel.

    It is constructed from the schedule alone and never sees the live
    encoder or decoder, so it cannot query their weights or gradients.
    """

    def __init__(self, schedule: AttackSchedule):
        self._deltas = schedule.deltas()
        self._start, self._end = schedule.start, schedule.end
        self._policy = schedule.policy
        self._rng = np.random.default_rng(schedule.seed)

    def active(self, step: int) -> bool:
        return self._start <= step < self._end

    def perturbation(self, step: int) -> np.ndarray | None:
        if not self.active(step):
            return None
        if self._policy == "round-robin":
            return self._deltas[(step - self._start) % len(self._deltas)]
        return self._deltas[self._rng.integers(len(self._deltas))]


@dataclass
class AccuracyTrace:
    accuracy: np.ndarray            # per-round receiver accuracy, pre-update
    attacked: np.ndarray            # bool per round
    window: tuple[int, int] | None = None
    skipped_rounds: list = field(default_factory=list)

    def __len__(self):
        return len(self.accuracy)

    def mean(self, start: int, end: int) -> float:
        return float(np.mean(self.accuracy[start:end]))

    def summary(self, plateau=(150, 200), window=(200, 400), tail=100) -> dict:
        return {"plateau": self.mean(*plateau), "window": self.mean(*window),
                "tail": self.mean(len(self) - tail, len(self))}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["time_step", "accuracy", "attacked_flag"])
            for t, (a, f) in enumerate(zip(self.accuracy, self.attacked)):
                out.writerow([t, repr(float(a)), int(f)])


def aggregate_traces(traces: list[AccuracyTrace]) -> np.ndarray:
    """Rows of (time_step, mean, std, n) over replicate runs."""
    acc = np.stack([t.accuracy for t in traces])
    steps = np.arange(acc.shape[1])
    return np.column_stack([steps, acc.mean(axis=0), acc.std(axis=0), np.full(len(steps), len(traces))])


def write_aggregate_csv(traces: list[AccuracyTrace], path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["time_step", "mean", "std", "n"])
        for t, m, s, n in aggregate_traces(traces):
            out.writerow([int(t), repr(float(m)), repr(float(s)), int(n)])


# --- the two learners -----------------------------------------------------

def train_step_receiver(decoder: nn.ModelState, optim: nn.OptimState, received, messages,
                        epochs: int = 1) -> tuple[float, float]:
    """Supervised update of the receiver on one round's batch.

    Returns (accuracy, loss) measured on the incoming batch before any
    update, i.e. the performance the deployed receiver actually delivered.
    """
    logit_at = len(decoder.spec.layers) - 1
    messages = np.asarray(messages)
    logits = nn.forward(decoder, received, upto=logit_at)
    accuracy = float(np.mean(np.argmax(logits, axis=1) == messages))
    first_loss = None
    for _ in range(epochs):
        tape = nn.forward_record(decoder, received)
        loss, g = nn.cross_entropy(tape.activations[logit_at], messages, from_logits=True)
        if not math.isfinite(loss):
            raise TrainingError("receiver loss diverged", optim.step)
        first_loss = loss if first_loss is None else first_loss
        grads = nn.backward(decoder, tape, g, at=logit_at)
        nn.optimizer_step(optim, decoder.flat_params(), [x for gs in grads.params for x in gs])
    return accuracy, first_loss


def per_example_losses(decoder: nn.ModelState, received, messages) -> np.ndarray:
    logits = nn.forward(decoder, received, upto=len(decoder.spec.layers) - 1)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    return lse - shifted[np.arange(len(messages)), messages]


def policy_gradient(encoder: nn.ModelState, messages, exploration, losses, sigma_pi: float) -> list[np.ndarray]:
    """Score-function estimate of the gradient of the expected loss.

    The policy emits x + w with w ~ N(0, sigma_pi^2 I), so
    grad log pi = (w / sigma_pi^2) . dx/dtheta. The round's mean loss is
    subtracted as a baseline.
    """
    losses = np.asarray(losses, dtype=float)
    w = np.asarray(exploration, dtype=float)
    tape = nn.forward_record(encoder, one_hot(messages, encoder.spec.input_shape[0]))
    advantage = losses - losses.mean()
    g = advantage[:, None] * w / (sigma_pi**2 * len(losses))
    grads = nn.backward(encoder, tape, g)
    return [x for gs in grads.params for x in gs]


def train_step_transmitter(encoder: nn.ModelState, optim: nn.OptimState, messages, exploration,
                           feedback_losses, sigma_pi: float) -> bool:
    """Apply one policy-gradient update; returns False if the round was skipped.

    Non-finite feedback means the feedback was lost, so the round is
    skipped with a warning. The energy-norm output layer keeps codewords at
    unit power whatever the update.
    """
    if not np.all(np.isfinite(feedback_losses)):
        warnings.warn("non-finite feedback: transmitter round skipped", RuntimeWarning, stacklevel=2)
        return False
    grads = policy_gradient(encoder, messages, exploration, feedback_losses, sigma_pi)
    nn.optimizer_step(optim, encoder.flat_params(), grads)
    return True


@dataclass
class DrlSystem:
    encoder: nn.ModelState
    decoder: nn.ModelState
    tx_optim: nn.OptimState
    rx_optim: nn.OptimState

    def as_autoencoder(self, config: AutoencoderConfig) -> Autoencoder:
        return Autoencoder(config, self.encoder, self.decoder)


def init_system(config: DrlConfig) -> DrlSystem:
    base = config.base
    return DrlSystem(nn.init_model(encoder_spec(base), config.seed), nn.init_model(decoder_spec(base), config.seed + 1),
                     nn.OptimState("adam", lr=config.tx_lr), nn.OptimState("adam", lr=config.rx_lr))


def run_simulation(config: DrlConfig, schedule: AttackSchedule | None = None,
                   system: DrlSystem | None = None, snapshot_at: int | None = None):
    """Run ``total_steps`` communication rounds of alternating training.

    Each round: the transmitter sends explored codewords x + w, the channel
    adds AWGN (and, inside the attack window, one pool perturbation added to
    every received vector), the receiver reports its accuracy and trains, and
    the transmitter updates from the noisy loss feedback.

    Returns the trace, or (trace, snapshot) when ``snapshot_at`` is given;
    the snapshot is a copy of (encoder, decoder) taken just before that round.
    """
    base = config.base
    if schedule is not None:
        schedule.validate(config.total_steps)
    adversary = BroadcastAdversary(schedule) if schedule is not None else None
    system = system or init_system(config)
    rng = np.random.default_rng([config.seed, 1])
    sigma = noise_std(config.channel_ebno_db, base.rate)
    acc = np.zeros(config.total_steps)
    attacked = np.zeros(config.total_steps, dtype=bool)
    skipped, snapshot = [], None
    for step in range(config.total_steps):
        if step == snapshot_at:
            snapshot = (system.encoder.copy(), system.decoder.copy())
        msgs = rng.integers(0, base.m, config.batch_size)
        x = nn.forward(system.encoder, one_hot(msgs, base.m))
        w = config.sigma_pi * rng.standard_normal(x.shape)
        y = x + w + sigma * rng.standard_normal(x.shape)
        feedback_noise = config.sigma_f * rng.standard_normal(config.batch_size)
        delta = adversary.perturbation(step) if adversary is not None else None
        if delta is not None:
            y = y + delta
            attacked[step] = True
        losses = per_example_losses(system.decoder, y, msgs)
        acc[step], _ = train_step_receiver(system.decoder, system.rx_optim, y, msgs, config.receiver_epochs)
        try:
            ok = train_step_transmitter(system.encoder, system.tx_optim, msgs, w, losses + feedback_noise,
                                        config.sigma_pi)
        except NumericError as exc:
            raise TrainingError(f"transmitter update failed at round {step}: {exc}", step) from exc
        if not ok:
            skipped.append(step)
        if step % 100 == 0:
            log.info("round %d accuracy %.3f%s", step, acc[step], " (attacked)" if attacked[step] else "")
    window = (schedule.start, schedule.end) if schedule is not None else None
    trace = AccuracyTrace(acc, attacked, window, skipped)
    return (trace, snapshot) if snapshot_at is not None else trace


# --- transferred perturbations ---------------------------------------------

@dataclass
class SourceRun:
    """Perturbations crafted against a surrogate autoencoder."""

    surrogate: Autoencoder
    candidates: list[UniversalPerturbation]
    power_ratio: float


@dataclass
class PoolMember:
    perturbation: UniversalPerturbation
    surrogate_bler: float           # evidence of success on the surrogate
    clean_bler: float

    @property
    def delta(self) -> np.ndarray:
        return self.perturbation.delta


def craft_source_run(surrogate: Autoencoder | AutoencoderConfig, candidates: int = 250, power_ratio: float = 0.25,
                     steps: int = 500, seed: int = 1000, objective: str = "hidden") -> SourceRun:
    """Craft ``candidates`` universal perturbations on a surrogate.

    Passing a config trains an independent surrogate (the default, strict
    transferability); passing the target's own ``Autoencoder`` gives the
    same-weights mode.
    """
    if isinstance(surrogate, AutoencoderConfig):
        surrogate = train_autoencoder(surrogate)
    perts = craft_universal_perturbations(surrogate.decoder, power_ratio, range(seed, seed + candidates), steps,
                                          objective=objective)
    return SourceRun(surrogate, perts, power_ratio)


def transfer_perturbations(source: SourceRun, count: int = 200, ebno_db: float = 4.0, trials: int = 4000,
                           seed: int = 0) -> list[PoolMember]:
    """Select the ``count`` most damaging surrogate-successful perturbations.

    A candidate is successful when it lifts the surrogate's BLER above the
    clean BLER on the same messages and noise. Raises ``ConfigError`` when
    fewer than ``count`` candidates succeed.
    """
    clean = bler_curve(source.surrogate, [ebno_db], trials, seed=seed)[0].bler
    members = []
    for p in source.candidates:
        b = bler_curve(source.surrogate, [ebno_db], trials, ChannelModifier.adversarial(p.delta), seed=seed)[0].bler
        if b > clean:
            members.append(PoolMember(p, b, clean))
    if len(members) < count:
        raise ConfigError(f"only {len(members)} of {len(source.candidates)} perturbations succeeded on the "
                          f"surrogate; {count} requested (shortfall {count - len(members)})")
    members.sort(key=lambda m: -m.surrogate_bler)
    return members[:count]


def round_accuracy(encoder: nn.ModelState, decoder: nn.ModelState, ebno_db: float, deltas, trials: int = 2000,
                   seed: int = 0, sigma_pi: float = 0.0) -> np.ndarray:
    """Accuracy of a frozen system for each perturbation (row of ``deltas``).

    Every perturbation sees the same messages and noise; a zero row gives
    the clean accuracy.
    """
    m = encoder.spec.input_shape[0]
    rng = np.random.default_rng(seed)
    msgs = rng.integers(0, m, trials)
    x = nn.forward(encoder, one_hot(msgs, m))
    sigma = noise_std(ebno_db, math.log2(m) / x.shape[1])
    y = x + sigma_pi * rng.standard_normal(x.shape) + sigma * rng.standard_normal(x.shape)
    deltas = np.atleast_2d(np.asarray(deltas, dtype=float))
    out = np.empty(len(deltas))
    logit_at = len(decoder.spec.layers) - 1
    for i, d in enumerate(deltas):
        out[i] = np.mean(np.argmax(nn.forward(decoder, y + d, upto=logit_at), axis=1) == msgs)
    return out


def transfer_rate(pool, encoder: nn.ModelState, decoder: nn.ModelState, ebno_db: float, trials: int = 2000,
                  seed: int = 0, sigma_pi: float = 0.0) -> tuple[float, np.ndarray, float]:
    """Fraction of pool members that lower the target's per-round accuracy.

    Returns (rate, per-member accuracy, clean accuracy).
    """
    deltas = np.stack([np.asarray(getattr(p, "delta", p), dtype=float) for p in pool])
    n = deltas.shape[1]
    acc = round_accuracy(encoder, decoder, ebno_db, np.vstack([np.zeros(n), deltas]), trials, seed, sigma_pi)
    clean, attacked = acc[0], acc[1:]
    return float(np.mean(attacked < clean)), attacked, float(clean)
