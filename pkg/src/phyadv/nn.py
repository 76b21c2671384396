"""Minimal sequential network engine with taped reverse-mode gradients.

Everything is batched over a leading axis. Parameters live in float64
``Tensor`` objects; inputs and activations are plain numpy arrays.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, FormatError, NumericError, StateError

LAYER_KINDS = ("dense", "conv1d", "relu", "softmax", "energy-norm", "flatten")


@dataclass
class Tensor:
    """Real n-d array with an optional gradient slot of the same shape."""

    data: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.grad is not None and np.shape(self.grad) != self.data.shape:
            raise ConfigError(f"grad shape {np.shape(self.grad)} != data shape {self.data.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


@dataclass(frozen=True)
class LayerSpec:
    """One layer. ``sizes`` is kind-specific.

    dense: (in, out); conv1d: (in_channels, out_channels, kernel, stride);
    energy-norm: (n,); relu/softmax/flatten: ().
    """

    kind: str
    sizes: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        expected = {"dense": 2, "conv1d": 4, "energy-norm": 1}.get(self.kind, 0)
        if len(self.sizes) != expected:
            raise ConfigError(f"{self.kind} takes {expected} sizes, got {self.sizes}")
        if any(int(s) <= 0 for s in self.sizes):
            raise ConfigError(f"{self.kind} sizes must be positive: {self.sizes}")


def dense(n_in: int, n_out: int) -> LayerSpec:
    return LayerSpec("dense", (n_in, n_out))


def conv1d(in_channels: int, out_channels: int, kernel: int, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv1d", (in_channels, out_channels, kernel, stride))


def relu() -> LayerSpec:
    return LayerSpec("relu")


def softmax() -> LayerSpec:
    return LayerSpec("softmax")


def energy_norm(n: int) -> LayerSpec:
    return LayerSpec("energy-norm", (n,))


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


@dataclass(frozen=True)
class ModelSpec:
    """Per-example input shape plus an ordered layer list."""

    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shapes()  # validates

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-example activation shapes, input first, one entry per layer output."""
        shape = self.input_shape
        out = [shape]
        for i, layer in enumerate(self.layers):
            shape = _output_shape(layer, shape, i)
            out.append(shape)
        return out

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes()[-1]


def _output_shape(layer: LayerSpec, shape: tuple[int, ...], index: int) -> tuple[int, ...]:
    if layer.kind == "dense":
        n_in, n_out = layer.sizes
        if shape != (n_in,):
            raise ConfigError(f"layer {index} dense expects ({n_in},), got {shape}")
        return (n_out,)
    if layer.kind == "conv1d":
        cin, cout, k, stride = layer.sizes
        if len(shape) != 2 or shape[0] != cin or shape[1] < k:
            raise ConfigError(f"layer {index} conv1d expects ({cin}, >={k}), got {shape}")
        return (cout, (shape[1] - k) // stride + 1)
    if layer.kind == "energy-norm":
        if shape != layer.sizes:
            raise ConfigError(f"layer {index} energy-norm expects {layer.sizes}, got {shape}")
        return shape
    if layer.kind == "flatten":
        return (int(np.prod(shape)),)
    if layer.kind == "softmax" and len(shape) != 1:
        raise ConfigError(f"layer {index} softmax expects a vector, got {shape}")
    return shape


def _param_shapes(layer: LayerSpec) -> list[tuple[int, ...]]:
    if layer.kind == "dense":
        n_in, n_out = layer.sizes
        return [(n_out, n_in), (n_out,)]
    if layer.kind == "conv1d":
        cin, cout, k, _ = layer.sizes
        return [(cout, cin, k), (cout,)]
    return []


@dataclass
class ModelState:
    spec: ModelSpec
    params: list[list[Tensor]]
    seed: int = 0

    def __post_init__(self):
        if len(self.params) != len(self.spec.layers):
            raise ConfigError("one parameter list per layer required")
        for i, (layer, ps) in enumerate(zip(self.spec.layers, self.params)):
            want = _param_shapes(layer)
            got = [p.shape for p in ps]
            if want != got:
                raise ConfigError(f"layer {i} params {got} do not match spec {want}")

    def flat_params(self) -> list[Tensor]:
        return [p for ps in self.params for p in ps]

    def copy(self) -> "ModelState":
        return ModelState(self.spec, [[Tensor(p.data.copy()) for p in ps] for ps in self.params], self.seed)


def init_model(spec: ModelSpec, seed: int) -> ModelState:
    """Glorot-uniform weights and zero biases.

    Weights are rounded to float32 so a fresh model survives the float32
    weight file bit-for-bit.
    """
    if not isinstance(spec, ModelSpec):
        raise ConfigError("init_model needs a ModelSpec")
    rng = np.random.default_rng(seed)
    params = []
    for layer in spec.layers:
        ps = []
        if layer.kind in ("dense", "conv1d"):
            w_shape, b_shape = _param_shapes(layer)
            if layer.kind == "dense":
                fan_in, fan_out = w_shape[1], w_shape[0]
            else:
                fan_in, fan_out = w_shape[1] * w_shape[2], w_shape[0] * w_shape[2]
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=w_shape).astype(np.float32).astype(np.float64)
            ps = [Tensor(w), Tensor(np.zeros(b_shape))]
        params.append(ps)
    return ModelState(spec, params, int(seed))


@dataclass
class Tape:
    """Activations of one recorded forward pass.

    ``activations[0]`` is the input, ``activations[i + 1]`` the output of layer i.
    """

    model: ModelState
    activations: list[np.ndarray]

    @property
    def output(self) -> np.ndarray:
        return self.activations[-1]


@dataclass
class Gradients:
    params: list[list[np.ndarray]]
    input: np.ndarray


def _as_batch(model: ModelState, x) -> np.ndarray:
    if isinstance(x, Tensor):
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    shape = model.spec.input_shape
    if x.shape == shape:
        x = x[None]
    if x.shape[1:] != shape:
        raise ConfigError(f"input shape {x.shape[1:]} does not match model input {shape}")
    return x


def _conv_windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (N, C, Lout, k)
    return sliding_window_view(x, k, axis=2)[:, :, ::stride, :]


def _layer_forward(layer: LayerSpec, ps: list[Tensor], x: np.ndarray) -> np.ndarray:
    kind = layer.kind
    if kind == "dense":
        return x @ ps[0].data.T + ps[1].data
    if kind == "conv1d":
        cin, cout, k, stride = layer.sizes
        win = _conv_windows(x, k, stride)
        n, _, lout, _ = win.shape
        cols = win.transpose(0, 2, 1, 3).reshape(n * lout, cin * k)
        out = cols @ ps[0].data.reshape(cout, cin * k).T + ps[1].data
        return out.reshape(n, lout, cout).transpose(0, 2, 1)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "softmax":
        z = np.exp(x - x.max(axis=-1, keepdims=True))
        # floor keeps every probability strictly positive after underflow
        return np.maximum(z / z.sum(axis=-1, keepdims=True), np.finfo(float).tiny)
    if kind == "energy-norm":
        (n,) = layer.sizes
        norm = np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), np.finfo(float).tiny)
        return math.sqrt(n) * x / norm
    if kind == "flatten":
        return x.reshape(x.shape[0], -1)
    raise ConfigError(f"unknown layer kind {kind!r}")


def _layer_backward(layer, ps, x, y, g, need_params=True):
    """Return (input grad, [param grads])."""
    kind = layer.kind
    if kind == "dense":
        if not need_params:
            return g @ ps[0].data, []
        return g @ ps[0].data, [g.T @ x, g.sum(axis=0)]
    if kind == "conv1d":
        cin, cout, k, stride = layer.sizes
        n, lout = g.shape[0], g.shape[2]
        g2 = g.transpose(0, 2, 1).reshape(n * lout, cout)
        w2 = ps[0].data.reshape(cout, cin * k)
        pg = []
        if need_params:
            cols = _conv_windows(x, k, stride).transpose(0, 2, 1, 3).reshape(n * lout, cin * k)
            pg = [(g2.T @ cols).reshape(cout, cin, k), g2.sum(axis=0)]
        dcols = (g2 @ w2).reshape(n, lout, cin, k)
        gx = np.zeros_like(x)
        span = stride * (lout - 1) + 1
        for j in range(k):
            gx[:, :, j:j + span:stride] += dcols[:, :, :, j].transpose(0, 2, 1)
        return gx, pg
    if kind == "relu":
        return g * (x > 0), []
    if kind == "softmax":
        return y * (g - (g * y).sum(axis=-1, keepdims=True)), []
    if kind == "energy-norm":
        (n,) = layer.sizes
        norm = np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), np.finfo(float).tiny)
        proj = (x * g).sum(axis=-1, keepdims=True) / norm**2
        return math.sqrt(n) / norm * (g - x * proj), []
    if kind == "flatten":
        return g.reshape(x.shape), []
    raise ConfigError(f"unknown layer kind {kind!r}")


def forward(model: ModelState, x, upto: int | None = None) -> np.ndarray:
    """Evaluate the model on a batch (or a single example) without recording.

    ``upto`` stops after that many layers, e.g. ``len(layers) - 1`` for logits.
    """
    h = _as_batch(model, x)
    layers = model.spec.layers[:upto]
    for layer, ps in zip(layers, model.params):
        h = _layer_forward(layer, ps, h)
    return h


def forward_record(model: ModelState, x) -> Tape:
    """Forward pass retaining every intermediate activation."""
    h = _as_batch(model, x)
    acts = [h]
    for layer, ps in zip(model.spec.layers, model.params):
        h = _layer_forward(layer, ps, h)
        acts.append(h)
    return Tape(model, acts)


def backward(model: ModelState, tape: Tape | None, grad, at: int | None = None,
             need_params: bool = True) -> Gradients:
    """Back-propagate ``grad`` (gradient w.r.t. activation ``at``, default: output).

    Parameter gradients are also written to each parameter Tensor's ``grad``.
    Layers above ``at`` get zero gradients. ``need_params=False`` computes the
    input gradient only (attacks) and leaves parameter grads untouched.
    """
    if tape is None or not isinstance(tape, Tape):
        raise StateError("backward needs a recorded forward pass (use forward_record)")
    if tape.model is not model:
        raise StateError("tape was recorded on a different model")
    n_layers = len(model.spec.layers)
    at = n_layers if at is None else (at % (n_layers + 1) if at < 0 else at)
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != tape.activations[at].shape:
        raise ConfigError(f"grad shape {g.shape} != activation shape {tape.activations[at].shape}")
    pgrads: list[list[np.ndarray]] = [[np.zeros_like(p.data) for p in ps] for ps in model.params] \
        if need_params else [[] for _ in model.params]
    for i in range(at - 1, -1, -1):
        layer = model.spec.layers[i]
        g, pg = _layer_backward(layer, model.params[i], tape.activations[i], tape.activations[i + 1], g,
                                need_params)
        if pg and need_params:
            pgrads[i] = pg
    if not need_params:
        return Gradients(pgrads, g)
    for ps, gs in zip(model.params, pgrads):
        for p, gp in zip(ps, gs):
            p.grad = gp
    return Gradients(pgrads, g)


def cross_entropy(x, labels, from_logits: bool = False) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch and its gradient w.r.t. ``x``.

    ``x`` holds probabilities (default) or logits. Logits go through a
    log-sum-exp; probabilities are clipped at 1e-300 before the log.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    labels = np.atleast_1d(np.asarray(labels))
    n, k = x.shape
    if labels.shape != (n,) or not np.issubdtype(labels.dtype, np.integer):
        raise ConfigError("one integer label per example required")
    if labels.min() < 0 or labels.max() >= k:
        raise ConfigError(f"label out of range [0, {k})")
    rows = np.arange(n)
    if from_logits:
        shifted = x - x.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        losses = lse - shifted[rows, labels]
        grad = np.exp(shifted - lse[:, None])
        grad[rows, labels] -= 1.0
    else:
        p = np.maximum(x[rows, labels], 1e-300)
        losses = -np.log(p)
        grad = np.zeros_like(x)
        grad[rows, labels] = -1.0 / p
    return float(max(losses.mean(), 0.0)), grad / n


@dataclass
class OptimState:
    algorithm: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    def __post_init__(self):
        if self.algorithm not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.algorithm!r}")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")


def optimizer_step(optim: OptimState, params: Sequence, grads: Sequence) -> list:
    """Update ``params`` in place (Tensors or arrays) and return them."""
    if len(params) != len(grads):
        raise ConfigError("params and grads differ in length")
    arrays = [p.data if isinstance(p, Tensor) else p for p in params]
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    for a, g in zip(arrays, grads):
        if a.shape != g.shape:
            raise ConfigError(f"grad shape {g.shape} != param shape {a.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
    optim.step += 1
    if optim.algorithm == "sgd":
        for a, g in zip(arrays, grads):
            a -= optim.lr * g
        return list(params)
    if not optim.m:
        optim.m = [np.zeros_like(a) for a in arrays]
        optim.v = [np.zeros_like(a) for a in arrays]
    b1, b2, t = optim.beta1, optim.beta2, optim.step
    scale = optim.lr * math.sqrt(1 - b2**t) / (1 - b1**t)
    for a, g, m, v in zip(arrays, grads, optim.m, optim.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        a -= scale * m / (np.sqrt(v) + optim.eps * math.sqrt(1 - b2**t))
    return list(params)


# --- weight file -----------------------------------------------------------
#
# little-endian:
#   b"PHYADVW1"
#   u32 version (=1), u64 seed
#   u32 ndim, ndim x u32 input dims
#   u32 record count
#   per record: u8 kind tag, u8 nsizes, nsizes x u32 sizes
#   payload: every record's tensors as f32 row-major, in record order
#            (dense/conv1d: weight then bias; UPERT: the vector)

MAGIC = b"PHYADVW1"
VERSION = 1
KIND_TAGS = {"dense": 1, "conv1d": 2, "relu": 3, "softmax": 4, "energy-norm": 5, "flatten": 6, "UPERT": 7}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}


def _record_tensor_shapes(kind: str, sizes: tuple[int, ...]) -> list[tuple[int, ...]]:
    if kind == "UPERT":
        return [sizes]
    return _param_shapes(LayerSpec(kind, sizes))


def write_container(path, records: list[tuple[str, tuple[int, ...], list[np.ndarray]]],
                    seed: int = 0, input_shape: tuple[int, ...] = ()) -> None:
    """Write (kind, sizes, tensors) records in the PHYADVW1 layout."""
    head = bytearray(MAGIC)
    head += struct.pack("<IQI", VERSION, int(seed) & (2**64 - 1), len(input_shape))
    head += struct.pack(f"<{len(input_shape)}I", *input_shape)
    head += struct.pack("<I", len(records))
    payload = bytearray()
    for kind, sizes, tensors in records:
        head += struct.pack("<BB", KIND_TAGS[kind], len(sizes))
        head += struct.pack(f"<{len(sizes)}I", *sizes)
        for t, shape in zip(tensors, _record_tensor_shapes(kind, tuple(sizes))):
            arr = np.asarray(t, dtype="<f4")
            if arr.shape != shape:
                raise ConfigError(f"{kind} tensor shape {arr.shape} != {shape}")
            payload += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(head + payload))


def read_container(path):
    """Inverse of :func:`write_container`. Returns (records, seed, input_shape)."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise FormatError(f"truncated file at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    if buf[:8] != MAGIC:
        raise FormatError("bad magic, not a PHYADVW1 file")
    pos = 8
    version, seed, ndim = take("<IQI")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    input_shape = take(f"<{ndim}I")
    (count,) = take("<I")
    heads = []
    for _ in range(count):
        tag, nsizes = take("<BB")
        if tag not in TAG_KINDS:
            raise FormatError(f"unknown kind tag {tag}")
        heads.append((TAG_KINDS[tag], tuple(take(f"<{nsizes}I"))))
    records = []
    for kind, sizes in heads:
        try:
            shapes = _record_tensor_shapes(kind, sizes)
        except ConfigError as exc:
            raise FormatError(str(exc)) from None
        tensors = []
        for shape in shapes:
            n = int(np.prod(shape))
            if pos + 4 * n > len(buf):
                raise FormatError("truncated payload")
            tensors.append(np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float64))
            pos += 4 * n
        records.append((kind, sizes, tensors))
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes")
    return records, seed, tuple(input_shape)


def save_weights(model: ModelState, path) -> None:
    records = [(layer.kind, layer.sizes, [p.data for p in ps])
               for layer, ps in zip(model.spec.layers, model.params)]
    write_container(path, records, model.seed, model.spec.input_shape)


def load_weights(path, spec: ModelSpec | None = None) -> ModelState:
    """Load a model; if ``spec`` is given the file must match it exactly."""
    records, seed, input_shape = read_container(path)
    if any(kind == "UPERT" for kind, _, _ in records):
        raise FormatError("file holds a perturbation, not a model")
    try:
        file_spec = ModelSpec(input_shape, tuple(LayerSpec(k, s) for k, s, _ in records))
    except ConfigError as exc:
        raise FormatError(f"inconsistent layer header: {exc}") from None
    if spec is not None and spec != file_spec:
        raise FormatError("file layers do not match the expected spec")
    return ModelState(file_spec, [[Tensor(t) for t in ts] for _, _, ts in records], seed)
