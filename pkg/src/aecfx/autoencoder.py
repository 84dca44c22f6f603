"""Convolutional auto-encoders: construction, training and model files."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .exceptions import (
    ChecksumError,
    ConfigurationError,
    FormatVersionError,
    ModelFormatError,
    NonFiniteError,
    UsageError,
)
from .tensorcore import LayerSpec, Tensor

logger = logging.getLogger(__name__)

ARCHITECTURES = ("skab", "industrial")

FORMAT_MAGIC = b"AECFXMDL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")
_DIGEST_SIZE = 32


def _conv(cin, cout, k, s, p):
    return LayerSpec("conv1d", in_channels=cin, out_channels=cout, kernel_size=k, stride=s, padding=p)


def _convt(cin, cout, k, s, p):
    return LayerSpec(
        "conv1d_transpose", in_channels=cin, out_channels=cout, kernel_size=k, stride=s, padding=p
    )


def _dense(i, o):
    return LayerSpec("dense", in_units=i, out_units=o)


_RELU = LayerSpec("activation", function="relu")


def _fit_length(layers, notes, cur_len, target, where):
    if cur_len != target:
        notes.append(
            f"{where}: crop {cur_len}->{target} samples inserted to match the encoder length"
        )
        layers.append(LayerSpec("crop", length=target))
    return target


def skab_layers(
    n: int,
    length: int,
    filters: Sequence[int] = (64, 32),
    latent: int = 8,
    dense_units: int = 128,
    kernel_size: int = 5,
    stride: int = 2,
    padding: int = 2,
    transpose_padding: int = 1,
):
    """Encoder/decoder chains for the SKAB model.

    Two strided convolutions and a dense bottleneck; the decoder starts with a
    dense layer, reshapes to ``(dense_units // L2, L2)`` where ``L2`` is the
    encoder's last convolution length, and mirrors with two transposed
    convolutions. Crop layers absorb off-by-one lengths.
    """
    f1, f2 = filters
    l1 = tc.conv1d_output_length(length, kernel_size, stride, padding)
    l2 = tc.conv1d_output_length(l1, kernel_size, stride, padding)
    if l1 < 1 or l2 < 1:
        raise ConfigurationError(f"window length {length} too short for the skab encoder")
    if dense_units % l2:
        raise ConfigurationError(
            f"decoder dense size {dense_units} is not divisible by encoded length {l2}"
        )
    notes: list[str] = [
        f"encoder padding {padding}, decoder transpose padding {transpose_padding}",
    ]
    encoder = [
        _conv(n, f1, kernel_size, stride, padding),
        _RELU,
        _conv(f1, f2, kernel_size, stride, padding),
        _RELU,
        LayerSpec("flatten"),
        _dense(f2 * l2, latent),
        _RELU,
    ]
    c0 = dense_units // l2
    decoder = [_dense(latent, dense_units), _RELU, LayerSpec("reshape", shape=(c0, l2))]
    decoder.append(_convt(c0, f2, kernel_size, stride, transpose_padding))
    cur = tc.conv1d_transpose_output_length(l2, kernel_size, stride, transpose_padding)
    _fit_length(decoder, notes, cur, l1, "decoder layer 1")
    decoder.append(_RELU)
    decoder.append(_convt(f2, n, kernel_size, stride, transpose_padding))
    cur = tc.conv1d_transpose_output_length(l1, kernel_size, stride, transpose_padding)
    _fit_length(decoder, notes, cur, length, "decoder output")
    return encoder, decoder, notes


def industrial_layers(
    n: int,
    length: int,
    filters: Sequence[int] = (32, 64),
    dense_units: Sequence[int] = (64, 32, 16, 8),
    decoder_filters: Sequence[int] = (64, 32),
    kernel_size: int = 5,
    stride: int = 1,
    padding: int = 1,
):
    """Encoder/decoder chains for the industrial model.

    The decoder mirrors the dense chain back to the flattened convolution
    size, applies two transposed convolutions and ends with a kernel-1
    transposed convolution projecting to ``n`` channels.
    """
    f1, f2 = filters
    l1 = tc.conv1d_output_length(length, kernel_size, stride, padding)
    l2 = tc.conv1d_output_length(l1, kernel_size, stride, padding)
    if l1 < 1 or l2 < 1:
        raise ConfigurationError(f"window length {length} too short for the industrial encoder")
    notes = [f"output projection conv1d_transpose({decoder_filters[-1]}->{n}, k=1) added"]
    encoder = [
        _conv(n, f1, kernel_size, stride, padding),
        _RELU,
        _conv(f1, f2, kernel_size, stride, padding),
        _RELU,
        LayerSpec("flatten"),
    ]
    prev = f2 * l2
    for units in dense_units:
        encoder += [_dense(prev, units), _RELU]
        prev = units
    decoder = []
    for units in list(dense_units[-2::-1]) + [f2 * l2]:
        decoder += [_dense(prev, units), _RELU]
        prev = units
    decoder.append(LayerSpec("reshape", shape=(f2, l2)))
    d1, d2 = decoder_filters
    decoder.append(_convt(f2, d1, kernel_size, stride, padding))
    cur = tc.conv1d_transpose_output_length(l2, kernel_size, stride, padding)
    cur = _fit_length(decoder, notes, cur, l1, "decoder layer 1")
    decoder.append(_RELU)
    decoder.append(_convt(d1, d2, kernel_size, stride, padding))
    cur = tc.conv1d_transpose_output_length(l1, kernel_size, stride, padding)
    _fit_length(decoder, notes, cur, length, "decoder layer 2")
    decoder.append(_RELU)
    decoder.append(_convt(d2, n, 1, 1, 0))
    return encoder, decoder, notes


@dataclass
class AeModel:
    """Auto-encoder: layer chains, parameters and architecture descriptor.

    ``params`` holds one entry per layer of ``encoder + decoder``: a
    ``(weights, bias)`` pair of float64 arrays, or ``None``.
    """

    architecture: str
    input_shape: tuple[int, int]
    encoder: list[LayerSpec]
    decoder: list[LayerSpec]
    params: list
    notes: list[str] = field(default_factory=list)
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        shapes = tc.infer_shapes(self.layers, self.input_shape)
        if shapes[-1] != self.input_shape:
            raise ConfigurationError(
                f"decoder output {shapes[-1]} does not match input shape {self.input_shape}"
            )
        self.latent_size = int(np.prod(shapes[len(self.encoder) - 1]))
        if self.latent_size >= self.input_shape[0] * self.input_shape[1]:
            raise ConfigurationError(
                f"latent size {self.latent_size} must be smaller than the input size"
            )
        if len(self.params) != len(self.layers):
            raise ConfigurationError("one parameter entry per layer is required")
        for i, (spec, p) in enumerate(zip(self.layers, self.params)):
            expected = tc.param_shapes(spec)
            if expected is None:
                if p is not None:
                    raise ConfigurationError(f"layer {i} ({spec.kind}) takes no parameters")
                continue
            if p is None or tuple(p[0].shape) != expected[0] or tuple(p[1].shape) != expected[1]:
                raise ConfigurationError(f"layer {i} ({spec.kind}): parameter shapes differ from {expected}")
        self._frozen = None

    @property
    def layers(self) -> list[LayerSpec]:
        return list(self.encoder) + list(self.decoder)

    @property
    def n_parameters(self) -> int:
        return sum(p[0].size + p[1].size for p in self.params if p is not None)

    def param_tensors(self, requires_grad: bool = False) -> list:
        return [
            None if p is None else (Tensor(p[0], requires_grad), Tensor(p[1], requires_grad))
            for p in self.params
        ]

    def set_params(self, params) -> None:
        self.params = params
        self._frozen = None

    def forward(self, x: Tensor, params=None) -> Tensor:
        """Run encoder then decoder on ``(B, n, l)`` or ``(n, l)`` input."""
        if params is None:
            if self._frozen is None:
                self._frozen = self.param_tensors(False)
            params = self._frozen
        unbatched = x.ndim == 2
        if x.shape[-2:] != self.input_shape or x.ndim not in (2, 3):
            raise ConfigurationError(
                f"input shape {x.shape} does not match model input {self.input_shape}"
            )
        h = tc.reshape(x, (1,) + x.shape) if unbatched else x
        # the chain was type-checked at construction
        for spec, p in zip(self.layers, params):
            h = tc.apply_layer(spec, p, h)
        return tc.reshape(h, h.shape[1:]) if unbatched else h

    __call__ = forward

    def encode(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        h = Tensor(X)
        params = self.param_tensors(False)
        for spec, p in zip(self.encoder, params):
            h = tc.apply_layer(spec, p, h)
        return h.numpy()

    def descriptor(self) -> dict:
        return {
            "architecture": self.architecture,
            "input_shape": list(self.input_shape),
            "latent_size": self.latent_size,
            "encoder": [s.to_dict() for s in self.encoder],
            "decoder": [s.to_dict() for s in self.decoder],
            "notes": list(self.notes),
            "options": self.options,
        }


def _init_params(layers: Sequence[LayerSpec], rng: np.random.Generator) -> list:
    params = []
    for spec in layers:
        shapes = tc.param_shapes(spec)
        if shapes is None:
            params.append(None)
            continue
        if spec.kind == "conv1d":
            fan_in = spec.in_channels * spec.kernel_size
        elif spec.kind == "conv1d_transpose":
            # each output sample sees about in_channels * k / stride inputs
            fan_in = spec.in_channels * -(-spec.kernel_size // spec.stride)
        else:
            fan_in = spec.in_units
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=shapes[0])
        params.append((w, np.zeros(shapes[1])))
    return params


def build_model(
    architecture: str | Sequence[LayerSpec],
    n: int,
    length: int,
    seed: int = 0,
    decoder: Sequence[LayerSpec] | None = None,
    **options,
) -> AeModel:
    """Build an initialized auto-encoder.

    Parameters
    ----------
    architecture : {"skab", "industrial"} or list of LayerSpec
        Named architecture, or a custom encoder chain (``decoder`` then
        required).
    n, length : int
        Channels and window length.
    seed : int
        Seed for the Kaiming-uniform weight initialization; biases start at 0.
    **options
        Overrides for the named builders, e.g. ``filters=(8, 4)``.
    """
    if isinstance(architecture, str):
        if architecture == "skab":
            enc, dec, notes = skab_layers(n, length, **options)
        elif architecture == "industrial":
            enc, dec, notes = industrial_layers(n, length, **options)
        else:
            raise ConfigurationError(
                f"unknown architecture {architecture!r}; choose from {ARCHITECTURES}"
            )
        name = architecture
    else:
        if decoder is None:
            raise ConfigurationError("a custom encoder chain needs a decoder chain")
        enc, dec, notes, name = list(architecture), list(decoder), [], "custom"
    tc.infer_shapes(list(enc) + list(dec), (n, length))
    params = _init_params(list(enc) + list(dec), np.random.default_rng(seed))
    return AeModel(name, (n, length), list(enc), list(dec), params, notes, _jsonable(options))


def _jsonable(options: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in options.items()}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    amsgrad: bool = False
    seed: int = 125
    huber_beta: float = 1.0
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if not self.learning_rate > 0 or not self.huber_beta > 0 or not self.eps > 0:
            raise ConfigurationError("learning_rate, huber_beta and eps must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigurationError("Adam betas must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    """Adam with bias correction; ``amsgrad=True`` keeps the running maximum
    of the second moment."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, amsgrad=False):
        self.lr, self.beta1, self.beta2, self.eps, self.amsgrad = lr, beta1, beta2, eps, amsgrad
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.vmax = [np.zeros_like(p) for p in params] if amsgrad else None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            v = self.v[i]
            if self.amsgrad:
                self.vmax[i] = np.maximum(self.vmax[i], v)
                v = self.vmax[i]
            out.append(p - self.lr * (self.m[i] / c1) / (np.sqrt(v / c2) + self.eps))
        return out


def _flat_params(params) -> list[np.ndarray]:
    return [a for p in params if p is not None for a in p]


def _unflat_params(template, flat) -> list:
    it = iter(flat)
    return [None if p is None else (next(it), next(it)) for p in template]


def loss_and_grads(model: AeModel, batch: np.ndarray, huber_beta: float = 1.0):
    """Huber reconstruction loss of ``batch`` and its parameter gradients."""
    params = model.param_tensors(requires_grad=True)
    x = Tensor(batch)
    with tc.GradientTape() as tape:
        loss = tc.huber_loss(x, model.forward(x, params), huber_beta)
    sources = [t for p in params if p is not None for t in p]
    grads = tc.backward(tape, loss, sources)
    return loss.item(), [grads[t.id].data for t in sources]


def evaluate_loss(model: AeModel, X: np.ndarray, huber_beta: float = 1.0, batch_size: int = 256) -> float:
    """Mean Huber loss over all elements of ``X``."""
    total, count = 0.0, 0
    for start in range(0, len(X), batch_size):
        xb = Tensor(X[start : start + batch_size])
        total += tc.huber_loss(xb, model(xb), huber_beta).item() * xb.data.size
        count += xb.data.size
    return total / count


def train(
    model: AeModel,
    train_windows: np.ndarray,
    valid_windows: np.ndarray | None,
    config: TrainConfig,
    log_every: int = 0,
):
    """Fit ``model`` with Adam on the Huber reconstruction loss.

    Returns
    -------
    model : AeModel
        The same object, parameters updated in place.
    history : dict
        ``{"epoch": [...], "train_loss": [...], "valid_loss": [...]}`` where
        ``train_loss`` is the sample-weighted mean of the epoch's batch losses.
    """
    X = _as_windows(train_windows, model)
    V = None if valid_windows is None or len(valid_windows) == 0 else _as_windows(valid_windows, model)
    if len(X) == 0:
        raise UsageError("training set is empty")
    rng = np.random.default_rng(config.seed)
    flat = _flat_params(model.params)
    opt = Adam(flat, config.learning_rate, config.beta1, config.beta2, config.eps, config.amsgrad)
    history = {"epoch": [], "train_loss": [], "valid_loss": []}
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(X))
        total = 0.0
        for b, start in enumerate(range(0, len(X), config.batch_size)):
            idx = order[start : start + config.batch_size]
            try:
                loss, grads = loss_and_grads(model, X[idx], config.huber_beta)
                flat = opt.step(flat, grads)
                model.set_params(_unflat_params(model.params, flat))
                for arr in flat:
                    if not np.isfinite(arr).all():
                        raise NonFiniteError("parameters became non-finite")
            except NonFiniteError as exc:
                raise NonFiniteError(f"training diverged at epoch {epoch}, batch {b}: {exc}") from exc
            total += loss * len(idx)
        history["epoch"].append(epoch)
        history["train_loss"].append(total / len(X))
        history["valid_loss"].append(
            evaluate_loss(model, V, config.huber_beta) if V is not None else float("nan")
        )
        if log_every and epoch % log_every == 0:
            logger.info(
                "epoch %d train %.6g valid %.6g",
                epoch, history["train_loss"][-1], history["valid_loss"][-1],
            )
    return model, history


def _as_windows(X, model: AeModel) -> np.ndarray:
    X = np.asarray(getattr(X, "windows", X), dtype=np.float64)
    if X.ndim != 3 or X.shape[1:] != model.input_shape:
        raise ConfigurationError(
            f"windows of shape {X.shape} do not match model input {model.input_shape}"
        )
    return X


def reconstruct(model, X: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Reconstruction of ``(n, l)`` or ``(N, n, l)`` windows, without a tape."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        return model(Tensor(X)).numpy()
    parts = [model(Tensor(X[s : s + batch_size])).data for s in range(0, len(X), batch_size)]
    return np.concatenate(parts, axis=0) if parts else np.empty_like(X)


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------


def _encode_model(model: AeModel, train_config: dict | None, version: int) -> bytes:
    blobs, entries, offset = [], [], 0
    for i, p in enumerate(model.params):
        if p is None:
            continue
        for name, arr in zip(("weight", "bias"), p):
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            entries.append({"layer": i, "name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
    header = {
        "descriptor": model.descriptor(),
        "dtype": "<f8",
        "parameters": entries,
        "train_config": train_config,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _HEADER.pack(FORMAT_MAGIC, version, len(hbytes)) + hbytes + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def save_model(model: AeModel, path, train_config: TrainConfig | dict | None = None) -> Path:
    """Write ``model`` to a versioned, checksummed binary file.

    Layout: magic, format version (u32), header length (u64), JSON header with
    the architecture descriptor and parameter table, little-endian float64
    parameter blobs, SHA-256 of everything before it.
    """
    if isinstance(train_config, TrainConfig):
        train_config = train_config.to_dict()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_encode_model(model, train_config, FORMAT_VERSION))
    return path


def load_model(path, return_config: bool = False):
    """Read a model file written by :func:`save_model`.

    Raises
    ------
    ChecksumError
        Contents do not match the stored digest.
    FormatVersionError
        The file's format version is not supported by this reader.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + _DIGEST_SIZE:
        raise ModelFormatError(f"{path}: file too short to be a model")
    body, digest = raw[:-_DIGEST_SIZE], raw[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupted")
    magic, version, hlen = _HEADER.unpack_from(body)
    if magic != FORMAT_MAGIC:
        raise ModelFormatError(f"{path}: not a model file")
    if version != FORMAT_VERSION:
        raise FormatVersionError(
            f"{path}: format version {version} unsupported (reader supports {FORMAT_VERSION})"
        )
    header = json.loads(body[_HEADER.size : _HEADER.size + hlen].decode("utf-8"))
    payload = body[_HEADER.size + hlen :]
    desc = header["descriptor"]
    enc = [LayerSpec.from_dict(d) for d in desc["encoder"]]
    dec = [LayerSpec.from_dict(d) for d in desc["decoder"]]
    params: list = [None] * (len(enc) + len(dec))
    pending: dict[int, dict] = {}
    for e in header["parameters"]:
        arr = np.frombuffer(payload, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
        pending.setdefault(e["layer"], {})[e["name"]] = arr.astype(np.float64).reshape(e["shape"])
    for i, d in pending.items():
        params[i] = (d["weight"], d["bias"])
    model = AeModel(
        desc["architecture"], tuple(desc["input_shape"]), enc, dec, params,
        list(desc["notes"]), desc.get("options", {}),
    )
    if return_config:
        return model, header.get("train_config")
    return model
