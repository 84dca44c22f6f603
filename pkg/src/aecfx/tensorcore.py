"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the layer family used by the convolutional auto-encoders is supported:
1-D convolution and its transpose, dense, ReLU, flatten, reshape and crop,
plus the reconstruction losses and anomaly scores built on top of them.

Batched activations are laid out as ``(batch, channels, length)``; dense
activations as ``(batch, units)``.

Examples
--------
>>> x = Tensor([[1.0, 2.0, 3.0]], requires_grad=True)
>>> with GradientTape() as tape:
...     loss = tsum(x)
>>> backward(tape, loss)[x.id].data
array([[1., 1., 1.]])
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigurationError, NonFiniteError, UsageError

__all__ = [
    "Tensor",
    "GradientTape",
    "LayerSpec",
    "backward",
    "forward_layer",
    "apply_layer",
    "infer_shapes",
    "param_shapes",
    "conv1d_output_length",
    "conv1d_transpose_output_length",
    "add",
    "scale",
    "tsum",
    "tmean",
    "reshape",
    "flatten",
    "crop",
    "relu",
    "dense",
    "conv1d",
    "conv1d_transpose",
    "huber_loss",
    "anomaly_score",
    "anomaly_score_window",
    "mean_squared_error",
    "mean_abs_diff",
]

_ids = itertools.count()
_TAPES: list["GradientTape"] = []


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    """Immutable float64 array of rank 0 to 3.

    Parameters
    ----------
    data : array_like
        Values; copied and converted to float64.
    requires_grad : bool
        Mark as a differentiation source. Gradients for such tensors are
        returned by :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "id", "is_leaf")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 3:
            raise UsageError(f"tensor rank must be <= 3, got {arr.ndim}")
        _check_finite(arr, "Tensor()")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)
        self.is_leaf = True

    @classmethod
    def _wrap(cls, arr: np.ndarray, what: str) -> "Tensor":
        # Internal constructor: no copy, but the finiteness invariant is kept.
        _check_finite(arr, what)
        t = cls.__new__(cls)
        arr = np.array(arr, dtype=np.float64, order="C", copy=None)
        if arr.flags.writeable and arr.base is not None:
            arr = arr.copy()
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.id = next(_ids)
        t.is_leaf = True
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        """Return a writable copy of the values."""
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    grad_fn: Callable[[np.ndarray], tuple]


class GradientTape:
    """Records primitive operations executed inside its ``with`` block.

    Any operation with at least one input that requires gradients is recorded.
    Tapes are single-threaded; nested tapes record only on the innermost one.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._sources: dict[int, Tensor] = {}

    def __enter__(self) -> "GradientTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def _record(self, name, inputs, output, grad_fn) -> None:
        for t in inputs:
            if t.requires_grad and t.is_leaf:
                self._sources.setdefault(t.id, t)
        self.nodes.append(_Node(name, tuple(inputs), output, grad_fn))
        self._produced.add(output.id)

    @property
    def sources(self) -> list[Tensor]:
        """Leaf tensors requiring gradient that were consumed on this tape."""
        return list(self._sources.values())


def _emit(name: str, inputs: Sequence[Tensor], out: np.ndarray, grad_fn) -> Tensor:
    result = Tensor._wrap(out, name)
    if _TAPES and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.is_leaf = False
        _TAPES[-1]._record(name, inputs, result, grad_fn)
    return result


def backward(
    tape: GradientTape, loss: Tensor, sources: Sequence[Tensor] | None = None
) -> dict[int, Tensor]:
    """Replay ``tape`` in reverse and return ``{tensor.id: dloss/dtensor}``.

    Parameters
    ----------
    tape : GradientTape
    loss : Tensor
        Scalar produced under ``tape``.
    sources : sequence of Tensor, optional
        Tensors to differentiate with respect to. Defaults to every leaf
        tensor marked ``requires_grad`` that the tape saw.
    """
    if loss.data.shape != ():
        raise UsageError(f"loss must be a scalar, got shape {loss.shape}")
    if loss.id not in tape._produced and loss.id not in tape._sources:
        raise UsageError("loss was not produced under this tape")
    if sources is None:
        sources = tape.sources
    for s in sources:
        if s.id not in tape._sources and s.id not in tape._produced:
            raise UsageError(f"{s!r} was not recorded on this tape")

    grads: dict[int, np.ndarray] = {loss.id: np.ones((), dtype=np.float64)}
    for node in reversed(tape.nodes):
        g = grads.get(node.output.id)
        if g is None:
            continue
        in_grads = node.grad_fn(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.id in grads:
                grads[inp.id] = grads[inp.id] + gi
            else:
                grads[inp.id] = gi

    out = {}
    for s in sources:
        g = grads.get(s.id)
        if g is None:
            g = np.zeros_like(s.data)
        out[s.id] = Tensor._wrap(np.reshape(g, s.shape), f"gradient of tensor {s.id}")
    return out


# ---------------------------------------------------------------------------
# Elementwise and structural primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two tensors of equal shape."""
    if a.shape != b.shape:
        raise ConfigurationError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum", (a,), np.sum(a.data), lambda g: (np.broadcast_to(g, shape),))


def tmean(a: Tensor) -> Tensor:
    shape, size = a.shape, a.data.size
    return _emit(
        "mean", (a,), np.mean(a.data), lambda g: (np.broadcast_to(g / size, shape),)
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    in_shape = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ConfigurationError(f"reshape: cannot map {in_shape} to {tuple(shape)}") from exc
    return _emit("reshape", (a,), out, lambda g: (g.reshape(in_shape),))


def flatten(a: Tensor) -> Tensor:
    """``(batch, channels, length) -> (batch, channels * length)``."""
    return reshape(a, (a.shape[0], -1))


def crop(a: Tensor, length: int) -> Tensor:
    """Trim trailing samples, or zero-pad at the end, to reach ``length``."""
    b, c, cur = a.shape
    if length <= cur:
        out = a.data[:, :, :length]

        def grad_fn(g):
            full = np.zeros((b, c, cur))
            full[:, :, :length] = g
            return (full,)

    else:
        out = np.zeros((b, c, length))
        out[:, :, :cur] = a.data

        def grad_fn(g):
            return (g[:, :, :cur],)

    return _emit("crop", (a,), out, grad_fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Parameterized layers
# ---------------------------------------------------------------------------


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``y = x @ w.T + b`` with ``x`` of shape ``(batch, in)`` and ``w`` ``(out, in)``."""
    xd, wd = x.data, w.data

    def grad_fn(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _emit("dense", (x, w, b), xd @ wd.T + b.data, grad_fn)


def conv1d_output_length(length: int, kernel_size: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel_size) // stride + 1


def conv1d_transpose_output_length(
    length: int, kernel_size: int, stride: int, padding: int
) -> int:
    return (length - 1) * stride - 2 * padding + kernel_size


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x (B, Cin, L)`` with ``w (Cout, Cin, k)``."""
    bsz, cin, length = x.shape
    cout, _, k = w.shape
    lout = conv1d_output_length(length, k, stride, padding)
    if lout < 1:
        raise ConfigurationError(f"conv1d: input length {length} too short for kernel {k}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    # (B, Cin, Lout, k) -> (B, Lout, Cin*k)
    win = sliding_window_view(xp, k, axis=2)[:, :, : (lout - 1) * stride + 1 : stride, :]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(bsz * lout, cin * k)
    wmat = w.data.reshape(cout, cin * k)
    y = (cols @ wmat.T).reshape(bsz, lout, cout).transpose(0, 2, 1) + b.data[None, :, None]

    def grad_fn(g):
        gmat = g.transpose(0, 2, 1).reshape(bsz * lout, cout)
        gw = (gmat.T @ cols).reshape(w.shape)
        gb = g.sum(axis=(0, 2))
        gcols = (gmat @ wmat).reshape(bsz, lout, cin, k)
        gxp = np.zeros(xp.shape)
        span = (lout - 1) * stride + 1
        for j in range(k):
            gxp[:, :, j : j + span : stride] += gcols[:, :, :, j].transpose(0, 2, 1)
        gx = gxp[:, :, padding : padding + length] if padding else gxp
        return gx, gw, gb

    return _emit("conv1d", (x, w, b), y, grad_fn)


def conv1d_transpose(
    x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0
) -> Tensor:
    """Transposed convolution of ``x (B, Cin, L)`` with ``w (Cin, Cout, k)``."""
    bsz, cin, length = x.shape
    _, cout, k = w.shape
    lout = conv1d_transpose_output_length(length, k, stride, padding)
    if lout < 1:
        raise ConfigurationError(f"conv1d_transpose: padding {padding} leaves no output")
    full_len = (length - 1) * stride + k
    span = (length - 1) * stride + 1
    wmat = w.data.reshape(cin, cout * k)
    # (B, L, Cin) @ (Cin, Cout*k) -> (B, L, Cout, k)
    xt = np.ascontiguousarray(x.data.transpose(0, 2, 1))
    z = (xt.reshape(bsz * length, cin) @ wmat).reshape(bsz, length, cout, k)
    full = np.zeros((bsz, cout, full_len))
    for j in range(k):
        full[:, :, j : j + span : stride] += z[:, :, :, j].transpose(0, 2, 1)
    y = full[:, :, padding : padding + lout] + b.data[None, :, None]

    def grad_fn(g):
        gfull = np.zeros((bsz, cout, full_len))
        gfull[:, :, padding : padding + lout] = g
        gz = np.empty((bsz, length, cout, k))
        for j in range(k):
            gz[:, :, :, j] = gfull[:, :, j : j + span : stride].transpose(0, 2, 1)
        gzmat = gz.reshape(bsz * length, cout * k)
        gx = (gzmat @ wmat.T).reshape(bsz, length, cin).transpose(0, 2, 1)
        gw = (xt.reshape(bsz * length, cin).T @ gzmat).reshape(w.shape)
        gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    return _emit("conv1d_transpose", (x, w, b), y, grad_fn)


# ---------------------------------------------------------------------------
# Losses and scores
# ---------------------------------------------------------------------------


def _pair_check(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ConfigurationError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _reduce(values: np.ndarray, per_sample: bool):
    """Mean over everything, or over all but the leading axis."""
    if per_sample:
        axes = tuple(range(1, values.ndim))
        count = int(np.prod(values.shape[1:]))
        return values.mean(axis=axes), count
    return np.mean(values), values.size


def _expand(g: np.ndarray, ndim: int) -> np.ndarray:
    return np.reshape(g, g.shape + (1,) * (ndim - g.ndim))


def huber_loss(x: Tensor, xhat: Tensor, beta: float = 1.0) -> Tensor:
    """Huber loss on squared residuals ``y = (x - xhat)**2``.

    Each element contributes ``0.5 * y / beta`` when ``sqrt(y) < beta`` and
    ``sqrt(y) - 0.5 * beta`` otherwise; the result is the mean over elements.
    """
    _pair_check("huber_loss", x, xhat)
    if not beta > 0:
        raise UsageError(f"huber_loss: beta must be positive, got {beta}")
    r = x.data - xhat.data
    y = r * r
    root = np.abs(r)
    quad = root < beta
    value = np.mean(np.where(quad, 0.5 * y / beta, root - 0.5 * beta))
    size = r.size

    def grad_fn(g):
        dr = np.where(quad, r / beta, np.sign(r)) * (g / size)
        return dr, -dr

    return _emit("huber_loss", (x, xhat), value, grad_fn)


def anomaly_score(x: Tensor, xhat: Tensor, per_sample: bool = False) -> Tensor:
    """Mean squared error plus mean absolute error between ``x`` and ``xhat``.

    With ``per_sample=True`` the means run over all axes but the first and a
    vector of per-window scores is returned.
    """
    _pair_check("anomaly_score", x, xhat)
    r = x.data - xhat.data
    value, count = _reduce(r * r + np.abs(r), per_sample)
    # sign(0) == 0: the subgradient of |r| at a zero residual is taken as 0.
    slope = 2.0 * r + np.sign(r)

    def grad_fn(g):
        dr = slope * _expand(np.asarray(g), r.ndim) / count
        return dr, -dr

    return _emit("anomaly_score", (x, xhat), value, grad_fn)


def anomaly_score_window(x: Tensor, xhat: Tensor) -> Tensor:
    """Elementwise ``(x - xhat)**2 + |x - xhat|`` without averaging."""
    _pair_check("anomaly_score_window", x, xhat)
    r = x.data - xhat.data
    slope = 2.0 * r + np.sign(r)

    def grad_fn(g):
        return g * slope, -g * slope

    return _emit("anomaly_score_window", (x, xhat), r * r + np.abs(r), grad_fn)


def mean_squared_error(x: Tensor, y: Tensor, per_sample: bool = False) -> Tensor:
    _pair_check("mean_squared_error", x, y)
    r = x.data - y.data
    value, count = _reduce(r * r, per_sample)

    def grad_fn(g):
        dr = 2.0 * r * _expand(np.asarray(g), r.ndim) / count
        return dr, -dr

    return _emit("mean_squared_error", (x, y), value, grad_fn)


def mean_abs_diff(x: Tensor, y: Tensor, per_sample: bool = False) -> Tensor:
    _pair_check("mean_abs_diff", x, y)
    r = x.data - y.data
    value, count = _reduce(np.abs(r), per_sample)

    def grad_fn(g):
        dr = np.sign(r) * _expand(np.asarray(g), r.ndim) / count
        return dr, -dr

    return _emit("mean_abs_diff", (x, y), value, grad_fn)


# ---------------------------------------------------------------------------
# Layer specifications
# ---------------------------------------------------------------------------

LAYER_KINDS = ("conv1d", "conv1d_transpose", "dense", "activation", "flatten", "reshape", "crop")
ACTIVATIONS = ("relu", "linear")


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer.

    Shapes exclude the batch axis. ``crop`` trims or zero-pads the time axis
    to ``length`` and is how mirrored decoders are brought back to the input
    length.
    """

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 1
    stride: int = 1
    padding: int = 0
    in_units: int = 0
    out_units: int = 0
    function: str = "relu"
    shape: tuple[int, ...] = field(default=())
    length: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv1d", "conv1d_transpose"):
            if self.kernel_size < 1 or self.stride < 1 or self.padding < 0:
                raise ConfigurationError(
                    f"{self.kind}: need kernel_size >= 1, stride >= 1, padding >= 0"
                )
            if self.in_channels < 1 or self.out_channels < 1:
                raise ConfigurationError(f"{self.kind}: channel counts must be positive")
        if self.kind == "dense" and (self.in_units < 1 or self.out_units < 1):
            raise ConfigurationError("dense: unit counts must be positive")
        if self.kind == "activation" and self.function not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.function!r}")
        if self.kind == "crop" and self.length < 1:
            raise ConfigurationError("crop: length must be positive")
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    def to_dict(self) -> dict:
        keys = {
            "conv1d": ("in_channels", "out_channels", "kernel_size", "stride", "padding"),
            "conv1d_transpose": ("in_channels", "out_channels", "kernel_size", "stride", "padding"),
            "dense": ("in_units", "out_units"),
            "activation": ("function",),
            "flatten": (),
            "reshape": ("shape",),
            "crop": ("length",),
        }[self.kind]
        d = {"kind": self.kind}
        for key in keys:
            value = getattr(self, key)
            d[key] = list(value) if isinstance(value, tuple) else value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        if "shape" in d:
            d["shape"] = tuple(d["shape"])
        return cls(**d)

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Shape produced from an unbatched input shape, or raise."""
        kind = self.kind
        if kind in ("conv1d", "conv1d_transpose"):
            if len(in_shape) != 2 or in_shape[0] != self.in_channels:
                raise ConfigurationError(
                    f"{kind} expects ({self.in_channels}, L), got {in_shape}"
                )
            fn = conv1d_output_length if kind == "conv1d" else conv1d_transpose_output_length
            lout = fn(in_shape[1], self.kernel_size, self.stride, self.padding)
            if lout < 1:
                raise ConfigurationError(f"{kind} produces empty output from {in_shape}")
            return (self.out_channels, lout)
        if kind == "dense":
            if in_shape != (self.in_units,):
                raise ConfigurationError(f"dense expects ({self.in_units},), got {in_shape}")
            return (self.out_units,)
        if kind == "activation":
            return in_shape
        if kind == "flatten":
            if len(in_shape) != 2:
                raise ConfigurationError(f"flatten expects (C, L), got {in_shape}")
            return (in_shape[0] * in_shape[1],)
        if kind == "reshape":
            if int(np.prod(in_shape)) != int(np.prod(self.shape)):
                raise ConfigurationError(f"reshape cannot map {in_shape} to {self.shape}")
            return self.shape
        if len(in_shape) != 2:
            raise ConfigurationError(f"crop expects (C, L), got {in_shape}")
        return (in_shape[0], self.length)


def param_shapes(spec: LayerSpec) -> tuple[tuple[int, ...], tuple[int, ...]] | None:
    """``(weight_shape, bias_shape)`` for parameterized layers, else ``None``."""
    if spec.kind == "conv1d":
        return (spec.out_channels, spec.in_channels, spec.kernel_size), (spec.out_channels,)
    if spec.kind == "conv1d_transpose":
        return (spec.in_channels, spec.out_channels, spec.kernel_size), (spec.out_channels,)
    if spec.kind == "dense":
        return (spec.out_units, spec.in_units), (spec.out_units,)
    return None


def infer_shapes(specs: Sequence[LayerSpec], in_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Type-check a chain; returns the shape after each layer.

    Raises
    ------
    ConfigurationError
        Naming the first layer whose input does not fit.
    """
    shapes = []
    cur = tuple(in_shape)
    for i, spec in enumerate(specs):
        try:
            cur = spec.output_shape(cur)
        except ConfigurationError as exc:
            raise ConfigurationError(f"layer {i} ({spec.kind}): {exc}") from None
        shapes.append(cur)
    return shapes


def apply_layer(spec: LayerSpec, params, x: Tensor) -> Tensor:
    """Apply ``spec`` to a batched input without shape checks."""
    kind = spec.kind
    if kind == "conv1d":
        return conv1d(x, params[0], params[1], spec.stride, spec.padding)
    if kind == "conv1d_transpose":
        return conv1d_transpose(x, params[0], params[1], spec.stride, spec.padding)
    if kind == "dense":
        return dense(x, params[0], params[1])
    if kind == "activation":
        return relu(x) if spec.function == "relu" else x
    if kind == "flatten":
        return flatten(x)
    if kind == "reshape":
        return reshape(x, (x.shape[0],) + spec.shape)
    return crop(x, spec.length)


def forward_layer(spec: LayerSpec, params, x: Tensor, index: int | None = None) -> Tensor:
    """Apply one layer to a batched or unbatched input.

    Unbatched inputs are ``(C, L)`` for convolutional layers (``(L,)`` is
    accepted as a single-channel signal) and ``(units,)`` for dense layers;
    the output is returned without the batch axis in that case.

    Parameters
    ----------
    spec : LayerSpec
    params : pair of Tensor or None
        ``(weights, bias)`` for parameterized layers.
    x : Tensor
    index : int, optional
        Position in a chain, used in error messages.
    """
    where = f"layer {index} ({spec.kind})" if index is not None else spec.kind
    expected = param_shapes(spec)
    if expected is not None:
        if params is None or len(params) != 2:
            raise ConfigurationError(f"{where}: expected (weights, bias)")
        for p, shp, name in zip(params, expected, ("weights", "bias")):
            if p.shape != shp:
                raise ConfigurationError(f"{where}: {name} shape expected {shp}, got {p.shape}")

    if spec.kind == "activation":
        return apply_layer(spec, params, x)
    if spec.kind == "reshape":
        unbatched = x.data.size == int(np.prod(spec.shape))
    elif spec.kind == "dense":
        unbatched = x.ndim == 1
    else:
        unbatched = x.ndim <= 2
    squeeze_channel = spec.kind != "reshape" and spec.kind != "dense" and x.ndim == 1
    if squeeze_channel:
        batched = reshape(x, (1, 1, x.shape[0]))
    elif unbatched:
        batched = reshape(x, (1,) + x.shape)
    else:
        batched = x

    in_shape = batched.shape[1:]
    try:
        spec.output_shape(in_shape)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{where}: {exc}") from None

    y = apply_layer(spec, params, batched)
    if batched is x:
        return y
    if squeeze_channel and y.ndim == 3 and y.shape[1] == 1:
        return reshape(y, (y.shape[2],))
    return reshape(y, y.shape[1:])
