"""Digital modulation, AWGN/jamming channel models, the synthetic IQ
dataset and link-level metrics."""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import erfc

from .errors import ConfigError, FormatError

SCHEMES = ("PAM4", "BPSK", "QPSK", "8PSK", "QAM16", "QAM64", "CPFSK", "GFSK")
SNR_GRID = tuple(range(-20, 20, 2))
FRAME_LEN = 128


def _gray(n: int) -> np.ndarray:
    i = np.arange(n)
    return i ^ (i >> 1)


def _pam_gray(m: int) -> np.ndarray:
    """Amplitude for each bit-pattern value of an m-ary Gray-coded PAM axis."""
    levels = np.arange(-(m - 1), m, 2, dtype=float)
    amp = np.empty(m)
    amp[_gray(m)] = levels
    return amp


def _build_constellation(name: str) -> np.ndarray:
    if name == "BPSK":
        pts = np.array([1.0, -1.0], dtype=complex)
    elif name == "PAM4":
        pts = _pam_gray(4).astype(complex)
    elif name == "QPSK":
        pts = np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j])
    elif name == "8PSK":
        pts = np.empty(8, dtype=complex)
        pts[_gray(8)] = np.exp(2j * np.pi * np.arange(8) / 8)
    elif name in ("QAM16", "QAM64"):
        m = 4 if name == "QAM16" else 8
        axis = _pam_gray(m)
        half = int(math.log2(m))
        idx = np.arange(m * m)
        pts = axis[idx >> half] + 1j * axis[idx & (m - 1)]
    else:
        raise ConfigError(f"{name} is not a linear scheme")
    return pts / np.sqrt(np.mean(np.abs(pts) ** 2))


@dataclass(frozen=True)
class ModulationScheme:
    name: str
    bits_per_symbol: int
    constellation: np.ndarray | None = None
    mod_index: float = 0.5
    bt: float | None = None

    @property
    def linear(self) -> bool:
        return self.constellation is not None


def scheme(name: str) -> ModulationScheme:
    if name not in SCHEMES:
        raise ConfigError(f"unknown modulation scheme {name!r}")
    if name == "CPFSK":
        return ModulationScheme(name, 1)
    if name == "GFSK":
        return ModulationScheme(name, 1, bt=0.35)
    pts = _build_constellation(name)
    return ModulationScheme(name, int(math.log2(len(pts))), pts)


def rrc_taps(sps: int, rolloff: float = 0.35, span: int = 8) -> np.ndarray:
    """Root-raised-cosine taps scaled so shaped unit-energy symbols have unit power."""
    t = np.arange(-span * sps // 2, span * sps // 2 + 1) / sps
    h = np.empty_like(t)
    for i, ti in enumerate(t):
        if ti == 0:
            h[i] = 1 + rolloff * (4 / np.pi - 1)
        elif rolloff > 0 and abs(abs(ti) - 1 / (4 * rolloff)) < 1e-12:
            h[i] = rolloff / np.sqrt(2) * ((1 + 2 / np.pi) * np.sin(np.pi / (4 * rolloff))
                                           + (1 - 2 / np.pi) * np.cos(np.pi / (4 * rolloff)))
        else:
            h[i] = (np.sin(np.pi * ti * (1 - rolloff)) + 4 * rolloff * ti * np.cos(np.pi * ti * (1 + rolloff))) \
                / (np.pi * ti * (1 - (4 * rolloff * ti) ** 2))
    return h * np.sqrt(sps / np.sum(h**2))


def gaussian_taps(sps: int, bt: float, span: int = 4) -> np.ndarray:
    t = np.arange(-span * sps // 2, span * sps // 2 + 1) / sps
    sigma = np.sqrt(np.log(2)) / (2 * np.pi * bt)
    h = np.exp(-t**2 / (2 * sigma**2))
    return h / h.sum()


def modulate(name: str, bits, sps: int = 1) -> np.ndarray:
    """Map bits to a complex baseband sequence.

    Linear schemes with ``sps == 1`` return the constellation symbols; with
    ``sps > 1`` the symbols are RRC-shaped (unit power in expectation).
    CPFSK/GFSK are continuous-phase with modulation index 0.5 and always
    have unit envelope.
    """
    sch = scheme(name)
    bits = np.asarray(bits, dtype=np.int64).ravel()
    if len(bits) % sch.bits_per_symbol:
        raise ConfigError(f"{len(bits)} bits not divisible by {sch.bits_per_symbol}")
    if sps < 1:
        raise ConfigError("samples per symbol must be >= 1")
    k = sch.bits_per_symbol
    values = bits.reshape(-1, k) @ (1 << np.arange(k - 1, -1, -1))
    if sch.linear:
        syms = sch.constellation[values]
        if sps == 1:
            return syms
        up = np.zeros(len(syms) * sps, dtype=complex)
        up[::sps] = syms
        return np.convolve(up, rrc_taps(sps), mode="same")
    freq = np.repeat(1.0 - 2.0 * values, sps)
    if sch.bt is not None:
        freq = np.convolve(freq, gaussian_taps(sps, sch.bt), mode="same")
    phase = np.pi * sch.mod_index * np.cumsum(freq) / sps
    return np.exp(1j * phase)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def awgn(signal, snr_db: float, seed=None) -> np.ndarray:
    """Add white Gaussian noise at ``snr_db`` (measured signal power / noise power).

    Complex signals get the noise variance split equally over I and Q. A
    real signal is treated as the in-phase rail of a complex baseband, so
    it receives only the in-phase half of the noise. ``snr_db = inf``
    passes the signal through.
    """
    x = np.asarray(signal)
    if not np.all(np.isfinite(x)):
        raise ConfigError("signal must be finite")
    if np.isinf(snr_db) and snr_db > 0:
        return x.copy()
    rng = _rng(seed)
    n0 = np.mean(np.abs(x) ** 2) / 10 ** (snr_db / 10)
    sigma = np.sqrt(n0 / 2)
    if np.iscomplexobj(x):
        return x + sigma * (rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape))
    return x + sigma * rng.standard_normal(x.shape)


def jamming_noise(shape, energy, seed=None, complex_valued: bool = False) -> np.ndarray:
    """White Gaussian noise rescaled so every row (last axis) carries exactly ``energy``."""
    rng = _rng(seed)
    w = rng.standard_normal(shape)
    if complex_valued:
        w = w + 1j * rng.standard_normal(shape)
    norm = np.linalg.norm(w, axis=-1, keepdims=True)
    return w * (np.sqrt(np.asarray(energy, dtype=float))[..., None] / norm)


def jam(signal, jam_power_ratio: float, seed=None, reference_energy=None) -> np.ndarray:
    """Add Gaussian jamming whose energy per row is exactly ``ratio * reference``.

    ``reference_energy`` defaults to the energy of each row of ``signal``;
    a 1-d signal is a single row.
    """
    if jam_power_ratio < 0:
        raise ConfigError("jam power ratio must be >= 0")
    x = np.asarray(signal)
    if jam_power_ratio == 0:
        return x.copy()
    ref = np.sum(np.abs(x) ** 2, axis=-1) if reference_energy is None else np.broadcast_to(
        np.asarray(reference_energy, dtype=float), x.shape[:-1])
    return x + jamming_noise(x.shape, jam_power_ratio * ref, seed, np.iscomplexobj(x))


def ebno_to_snr(ebno_db: float, bits_per_channel_use: float) -> float:
    if bits_per_channel_use <= 0:
        raise ConfigError("bits per channel use must be positive")
    return ebno_db + 10 * math.log10(bits_per_channel_use)


def qfunc(x):
    return 0.5 * erfc(np.asarray(x, dtype=float) / np.sqrt(2))


# --- metrics -----------------------------------------------------------------

def _pair(decoded, truth):
    a, b = np.asarray(decoded).ravel(), np.asarray(truth).ravel()
    if len(a) != len(b):
        raise ConfigError("decoded and truth differ in length")
    if not len(a):
        raise ConfigError("empty input")
    return a, b


def bler(decoded, truth) -> float:
    """Fraction of message blocks decoded to the wrong index."""
    a, b = _pair(decoded, truth)
    return float(np.mean(a != b))


def ber(bits_decoded, bits_truth) -> float:
    a, b = _pair(bits_decoded, bits_truth)
    return float(np.mean(a != b))


def accuracy(pred, truth) -> float:
    a, b = _pair(pred, truth)
    return float(np.mean(a == b))


def confusion_matrix(pred, truth, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    a, b = _pair(pred, truth)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (b.astype(int), a.astype(int)), 1)
    return cm


def classification_report(pred, truth, n_classes: int) -> dict:
    """Accuracy plus per-class precision/recall/F1 and FP/FN counts.

    Precision of a class that is never predicted is reported as 0.
    """
    cm = confusion_matrix(pred, truth, n_classes)
    tp = np.diag(cm).astype(float)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return {
        "accuracy": float(tp.sum() / cm.sum()),
        "precision": precision.tolist(),
        "recall": recall.tolist(),
        "f1": f1.tolist(),
        "macro_f1": float(f1.mean()),
        "false_positives": fp.astype(int).tolist(),
        "false_negatives": fn.astype(int).tolist(),
        "confusion": cm.tolist(),
    }


# --- dataset -----------------------------------------------------------------

@dataclass(frozen=True)
class IqFrame:
    samples: np.ndarray  # (2, 128): I row, Q row
    label: str
    snr_db: int


@dataclass
class Dataset:
    """Column store of IQ frames. ``labels`` index into ``SCHEMES``."""

    x: np.ndarray        # (N, 2, 128) float32
    labels: np.ndarray   # (N,) int
    snr: np.ndarray      # (N,) int
    train: np.ndarray    # (N,) bool
    seed: int | None = None

    def __len__(self):
        return len(self.labels)

    def frame(self, i: int) -> IqFrame:
        return IqFrame(self.x[i], SCHEMES[self.labels[i]], int(self.snr[i]))

    def subset(self, mask) -> "Dataset":
        return Dataset(self.x[mask], self.labels[mask], self.snr[mask], self.train[mask], self.seed)

    @property
    def train_set(self) -> "Dataset":
        return self.subset(self.train)

    @property
    def test_set(self) -> "Dataset":
        return self.subset(~self.train)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.x, self.labels.astype("<i8"), self.snr.astype("<i8"), self.train.astype("u1")):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def synthesize_frame(name: str, snr_db: float, rng: np.random.Generator, sps: int = 8,
                     phase_offset: bool = True, length: int = FRAME_LEN):
    """One frame as ``(noisy, clean)`` complex arrays, both scaled so the noisy
    frame has unit mean power.

    The frame is a random ``length``-sample window of a longer burst; noise
    is sized from the clean window's own power.
    """
    sch = scheme(name)
    n_sym = length // sps + 16
    bits = rng.integers(0, 2, size=n_sym * sch.bits_per_symbol)
    burst = modulate(name, bits, sps)
    start = int(rng.integers(4 * sps, len(burst) - length - 4 * sps + 1))
    clean = burst[start:start + length]
    if phase_offset:
        clean = clean * np.exp(1j * rng.uniform(0, 2 * np.pi))
    noisy = awgn(clean, snr_db, rng)
    scale = 1 / np.sqrt(np.mean(np.abs(noisy) ** 2))
    return noisy * scale, clean * scale


def to_iq(z: np.ndarray) -> np.ndarray:
    """Complex (..., L) -> real (..., 2, L)."""
    return np.stack([z.real, z.imag], axis=-2)


def synthesize_dataset(per_cell: int, seed: int, test_fraction: float = 0.5, sps: int = 8,
                       phase_offset: bool = True, snrs=SNR_GRID, schemes=SCHEMES) -> Dataset:
    """Balanced synthetic corpus: ``per_cell`` frames for each (scheme, SNR) cell.

    Within every cell a ``test_fraction`` share of frames is marked test.
    """
    if per_cell <= 0:
        raise ConfigError("per-cell frame count must be positive")
    if not 0 <= test_fraction <= 1:
        raise ConfigError("test_fraction must lie in [0, 1]")
    for s in snrs:
        if s not in SNR_GRID:
            raise ConfigError(f"snr {s} dB is not on the {SNR_GRID[0]}..{SNR_GRID[-1]} dB grid")
    rng = np.random.default_rng(seed)
    n_test = int(round(per_cell * test_fraction))
    xs, labels, snr_tags, train = [], [], [], []
    for name in schemes:
        label = SCHEMES.index(name)
        for snr in snrs:
            for _ in range(per_cell):
                noisy, _ = synthesize_frame(name, snr, rng, sps, phase_offset)
                xs.append(to_iq(noisy))
            labels += [label] * per_cell
            snr_tags += [snr] * per_cell
            flags = np.ones(per_cell, dtype=bool)
            flags[rng.permutation(per_cell)[:n_test]] = False
            train.append(flags)
    return Dataset(np.asarray(xs, dtype=np.float32), np.asarray(labels, dtype=np.int64),
                   np.asarray(snr_tags, dtype=np.int64), np.concatenate(train), seed)


# --- dataset file ------------------------------------------------------------
#
# little-endian:
#   b"PHYADVD1", u32 frame count, u32 schema version (=1)
#   per frame: u8 tag, i8 snr_db, 256 x f32 (I row then Q row)
#   tag bits 0-6: index into SCHEMES; bit 7 set marks a test-split frame

DATASET_MAGIC = b"PHYADVD1"
DATASET_VERSION = 1
_RECORD = np.dtype([("tag", "u1"), ("snr", "i1"), ("samples", "<f4", (2 * FRAME_LEN,))])


def save_dataset(ds: Dataset, path) -> None:
    rec = np.empty(len(ds), dtype=_RECORD)
    rec["tag"] = ds.labels.astype(np.uint8) | np.where(ds.train, 0, 0x80).astype(np.uint8)
    rec["snr"] = ds.snr
    rec["samples"] = ds.x.reshape(len(ds), -1)
    Path(path).write_bytes(DATASET_MAGIC + struct.pack("<II", len(ds), DATASET_VERSION) + rec.tobytes())


def load_dataset(path) -> Dataset:
    """Read a PHYADVD1 file; also the import path for externally converted corpora."""
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:8] != DATASET_MAGIC:
        raise FormatError("not a PHYADVD1 file")
    count, version = struct.unpack_from("<II", buf, 8)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    if len(buf) != 16 + count * _RECORD.itemsize:
        raise FormatError(f"expected {count} records, file size {len(buf)} disagrees")
    rec = np.frombuffer(buf, dtype=_RECORD, count=count, offset=16)
    labels = (rec["tag"] & 0x7F).astype(np.int64)
    if count and labels.max() >= len(SCHEMES):
        raise FormatError("unknown scheme tag")
    snr = rec["snr"].astype(np.int64)
    if count and not np.isin(snr, SNR_GRID).all():
        raise FormatError("snr tag off the 2 dB grid")
    x = rec["samples"].reshape(count, 2, FRAME_LEN).astype(np.float32)
    if not np.all(np.isfinite(x)):
        raise FormatError("non-finite samples")
    return Dataset(x, labels, snr, (rec["tag"] & 0x80) == 0)
