"""Out-of-distribution probes for the modulation classifier."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..modclass import predict_proba
from ..wireless import SCHEMES, Dataset, awgn, rrc_taps, synthesize_frame, to_iq

# held-out modulations, each scored against the trained family it most resembles
HELD_OUT = {"PAM8": "PAM4", "16PSK": "8PSK"}


def _held_out_constellation(name: str) -> np.ndarray:
    if name == "PAM8":
        pts = np.arange(-7, 8, 2, dtype=complex)
    elif name == "16PSK":
        pts = np.exp(2j * np.pi * np.arange(16) / 16)
    else:
        raise ConfigError(f"no held-out scheme {name!r}")
    return pts / np.sqrt(np.mean(np.abs(pts) ** 2))


def held_out_frame(name: str, snr_db: float, rng: np.random.Generator, sps: int = 8, length: int = 128):
    """A frame of a modulation absent from training, built like the training frames."""
    pts = _held_out_constellation(name)
    syms = pts[rng.integers(0, len(pts), length // sps + 16)]
    up = np.zeros(len(syms) * sps, dtype=complex)
    up[::sps] = syms
    burst = np.convolve(up, rrc_taps(sps), mode="same")
    start = int(rng.integers(4 * sps, len(burst) - length - 4 * sps + 1))
    clean = burst[start:start + length] * np.exp(1j * rng.uniform(0, 2 * np.pi))
    noisy = awgn(clean, snr_db, rng)
    return noisy / np.sqrt(np.mean(np.abs(noisy) ** 2))


@dataclass
class ProbeSet:
    name: str
    x: np.ndarray
    labels: np.ndarray
    snr: np.ndarray | None = None


@dataclass
class OodSuite:
    unseen_snr: ProbeSet
    held_out_scheme: ProbeSet
    pure_noise: ProbeSet

    def sets(self) -> list[ProbeSet]:
        return [self.unseen_snr, self.held_out_scheme, self.pure_noise]


def build_ood_suite(per_cell: int, seed: int, snrs=(5, 7, 9, 11, 13, 15, 17)) -> OodSuite:
    """Unseen (odd) SNRs for all trained schemes, held-out schemes, and pure noise.

    Pure-noise frames carry uniformly random labels, so a classifier can only
    match them at chance.
    """
    rng = np.random.default_rng(seed)
    xs, labels, tags = [], [], []
    for label, name in enumerate(SCHEMES):
        for snr in snrs:
            for _ in range(per_cell):
                xs.append(to_iq(synthesize_frame(name, snr, rng)[0]))
                labels.append(label)
                tags.append(snr)
    unseen = ProbeSet("unseen_snr", np.asarray(xs), np.asarray(labels), np.asarray(tags))
    xs, labels = [], []
    for name, family in HELD_OUT.items():
        for snr in snrs:
            for _ in range(per_cell):
                xs.append(to_iq(held_out_frame(name, snr, rng)))
                labels.append(SCHEMES.index(family))
    held = ProbeSet("held_out_scheme", np.asarray(xs), np.asarray(labels))
    n_noise = per_cell * len(SCHEMES)
    z = rng.standard_normal((n_noise, 2, 128)) / math.sqrt(2)
    noise = ProbeSet("pure_noise", z, rng.integers(0, len(SCHEMES), n_noise))
    return OodSuite(unseen, held, noise)


def _row_hashes(x) -> set[bytes]:
    x = np.asarray(x, dtype=np.float32)
    return {hashlib.sha256(row.tobytes()).digest() for row in x}


def check_disjoint(suite: OodSuite, training: Dataset) -> None:
    """Raise ``ConfigError`` if any probe frame or unseen SNR also occurs in training."""
    seen = _row_hashes(training.x)
    for probe in suite.sets():
        if _row_hashes(probe.x) & seen:
            raise ConfigError(f"probe set {probe.name} overlaps the training data")
    shared = set(np.unique(suite.unseen_snr.snr).tolist()) & set(np.unique(training.snr).tolist())
    if shared:
        raise ConfigError(f"unseen-SNR probes use trained SNR values {sorted(shared)}")


def ood_probe(model, suite: OodSuite, training: Dataset | None = None, reference: Dataset | None = None) -> dict:
    """Accuracy and mean max-softmax confidence per probe set.

    With ``training`` given, overlap is checked first. With ``reference``
    (in-distribution frames) given, the report adds its accuracy and, for
    each unseen SNR, the mean accuracy of the two neighbouring trained SNRs.
    """
    if training is not None:
        check_disjoint(suite, training)
    out = {}
    for probe in suite.sets():
        p = predict_proba(model, probe.x)
        out[probe.name] = {"accuracy": float(np.mean(np.argmax(p, axis=1) == probe.labels)),
                           "confidence": float(np.mean(p.max(axis=1))), "frames": int(len(probe.labels))}
    if reference is not None:
        p = predict_proba(model, reference.x)
        hit = np.argmax(p, axis=1) == reference.labels
        out["in_distribution"] = {"accuracy": float(np.mean(hit)), "confidence": float(np.mean(p.max(axis=1))),
                                  "frames": int(len(hit))}
        probe = suite.unseen_snr
        p_hit = np.argmax(predict_proba(model, probe.x), axis=1) == probe.labels
        rows = []
        for snr in np.unique(probe.snr):
            near = np.isin(reference.snr, [snr - 1, snr + 1])
            if near.any():
                rows.append({"snr_db": int(snr), "accuracy": float(np.mean(p_hit[probe.snr == snr])),
                             "neighbour_accuracy": float(np.mean(hit[near]))})
        out["unseen_snr_vs_neighbours"] = rows
    return out
