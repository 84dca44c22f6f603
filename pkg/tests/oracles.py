"""Independent reference computations used by the tests."""

import numpy as np

from aecfx import tensorcore as tc
from aecfx.tensorcore import GradientTape, LayerSpec, Tensor, backward

FD_STEP = 1e-5
# relative error is taken against max(|analytic|, |numeric|, floor) with
# floor = REL_FLOOR * max(1, |f|): central-difference roundoff grows like
# eps * |f| / h, so entries whose true gradient is below that scale are judged
# on absolute error instead
REL_FLOOR = 1e-4


def central_difference(f, arrays, h=FD_STEP):
    """Numerical gradient of scalar ``f(*arrays)`` w.r.t. every array."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + h
            up = f(*arrays)
            a[idx] = orig - h
            down = f(*arrays)
            a[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def fd_floor(fvalue):
    return REL_FLOOR * max(1.0, abs(float(fvalue)))


def relative_error(analytic, numeric, floor=REL_FLOOR):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def conv1d_loops(x, w, b, stride, padding):
    """Direct-loop 1-D convolution, x (C_in, L), w (C_out, C_in, K)."""
    cin, length = x.shape
    cout, _, k = w.shape
    xp = np.zeros((cin, length + 2 * padding))
    xp[:, padding : padding + length] = x
    lout = (length + 2 * padding - k) // stride + 1
    y = np.zeros((cout, lout))
    for o in range(cout):
        for t in range(lout):
            acc = b[o]
            for c in range(cin):
                for j in range(k):
                    acc += w[o, c, j] * xp[c, t * stride + j]
            y[o, t] = acc
    return y


def conv1d_transpose_loops(x, w, b, stride, padding):
    """Scatter-form transposed convolution, x (C_in, L), w (C_in, C_out, K)."""
    cin, length = x.shape
    _, cout, k = w.shape
    full = np.zeros((cout, (length - 1) * stride + k))
    for c in range(cin):
        for t in range(length):
            for o in range(cout):
                for j in range(k):
                    full[o, t * stride + j] += x[c, t] * w[c, o, j]
    out = full[:, padding : full.shape[1] - padding]
    return out + b[:, None]


def huber_scalar(r, beta):
    y = r * r
    return 0.5 * y / beta if np.sqrt(y) < beta else np.sqrt(y) - 0.5 * beta


# -- gradient-check harness -------------------------------------------------------

LAYER_CASES = [
    (LayerSpec("conv1d", in_channels=2, out_channels=3, kernel_size=5, stride=2, padding=2), (2, 2, 11)),
    (LayerSpec("conv1d", in_channels=3, out_channels=2, kernel_size=3, stride=1, padding=1), (2, 3, 8)),
    (LayerSpec("conv1d_transpose", in_channels=2, out_channels=3, kernel_size=5, stride=2, padding=1), (2, 2, 6)),
    (LayerSpec("conv1d_transpose", in_channels=3, out_channels=2, kernel_size=5, stride=1, padding=1), (2, 3, 7)),
    (LayerSpec("conv1d_transpose", in_channels=3, out_channels=2, kernel_size=1), (2, 3, 5)),
    (LayerSpec("dense", in_units=6, out_units=4), (3, 6)),
    (LayerSpec("activation", function="relu"), (2, 3, 5)),
    (LayerSpec("flatten"), (2, 3, 4)),
    (LayerSpec("reshape", shape=(4, 3)), (2, 12)),
    (LayerSpec("crop", length=4), (2, 3, 6)),
    (LayerSpec("crop", length=8), (2, 3, 6)),
]


def _pt(pv):
    return tuple(Tensor(p) for p in pv) if len(pv) else None


def _mul_const(y, c):
    # sum(y * c) expressed with the tape's own primitives: a dense layer
    # with the weights c and zero bias on the flattened activations
    flat = tc.reshape(y, (1, int(np.prod(y.shape))))
    return tc.dense(flat, Tensor(c.reshape(1, -1)), Tensor([0.0]))


def layer_fd_error(spec, in_shape, seed=0):
    """Max relative error of input and parameter gradients for one layer."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(in_shape)
    shapes = tc.param_shapes(spec)
    ps = [rng.standard_normal(s) for s in shapes] if shapes else []
    out_shape = tc.apply_layer(spec, _pt(ps), Tensor(x)).shape
    c = rng.standard_normal(out_shape)

    def f(xv, *pv):
        return float(np.sum(tc.apply_layer(spec, _pt(pv), Tensor(xv)).data * c))

    xt = Tensor(x, requires_grad=True)
    pt = [Tensor(p, requires_grad=True) for p in ps]
    with GradientTape() as tape:
        y = tc.apply_layer(spec, tuple(pt) if pt else None, xt)
        loss = tc.tsum(_mul_const(y, c))
    g = backward(tape, loss, [xt] + pt)
    numeric = central_difference(f, [x] + ps)
    floor = fd_floor(f(x, *ps))
    return max(relative_error(g[t.id].data, n, floor) for t, n in zip([xt] + pt, numeric))


def model_fd_error(model, x, seed=0):
    """Max relative error of the Huber loss gradients of a whole model.

    Biases are first set to small random values: zero biases put exact zeros
    in front of some ReLUs, where central differences straddle the kink.
    """
    rng = np.random.default_rng(seed)
    model.set_params([
        None if p is None else (p[0], rng.uniform(-0.1, 0.1, p[1].shape)) for p in model.params
    ])
    params = model.param_tensors(requires_grad=True)
    xt = Tensor(x, requires_grad=True)
    with GradientTape() as tape:
        loss = tc.huber_loss(xt, model.forward(xt, params), 1.0)
    flat = [t for p in params if p is not None for t in p]
    g = backward(tape, loss, [xt] + flat)

    def f(xv, *pv):
        it = iter(pv)
        ps = [None if p is None else (Tensor(next(it)), Tensor(next(it))) for p in params]
        return tc.huber_loss(Tensor(xv), model.forward(Tensor(xv), ps), 1.0).item()

    numeric = central_difference(f, [x] + [t.data for t in flat])
    floor = fd_floor(loss.item())
    return max(relative_error(g[t.id].data, n, floor) for t, n in zip([xt] + flat, numeric))
