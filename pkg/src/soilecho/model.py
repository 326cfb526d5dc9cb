"""Convolutional regressor from a 64x64 height-range image to moisture.

Three blocks of conv(3x3, pad 1) -> batch norm -> LeakyReLU(0.1) -> 2x2 max
pool take the image from 1x64x64 to 64x8x8; a 4096-128-64-1 fully connected
head with LeakyReLU and dropout produces the estimate. Everything runs on
numpy with hand-written reverse-mode gradients; activations are kept in
NHWC layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LEAK = 0.1
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
CHANNELS = (1, 16, 32, 64)
HIDDEN = (4096, 128, 64, 1)
INPUT_SIZE = 64


def parameter_shapes() -> dict[str, tuple[int, ...]]:
    shapes = {}
    for i in range(3):
        c_in, c_out = CHANNELS[i], CHANNELS[i + 1]
        shapes[f"conv{i + 1}.w"] = (c_out, c_in, 3, 3)
        shapes[f"conv{i + 1}.b"] = (c_out,)
        shapes[f"bn{i + 1}.gamma"] = (c_out,)
        shapes[f"bn{i + 1}.beta"] = (c_out,)
    for i in range(3):
        shapes[f"fc{i + 1}.w"] = (HIDDEN[i], HIDDEN[i + 1])
        shapes[f"fc{i + 1}.b"] = (HIDDEN[i + 1],)
    return shapes


@dataclass
class ModelParams:
    """Learnable parameters plus non-learned buffers.

    Buffers hold the batch-norm running statistics and the affine map
    (``output.shift``, ``output.scale``) from the network output to %VWC.
    """

    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dtype(self):
        return self.params["conv1.w"].dtype

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.params.items()},
                           {k: v.copy() for k, v in self.buffers.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: v.astype(dtype) for k, v in self.params.items()},
                           {k: v.astype(dtype) for k, v in self.buffers.items()})


@dataclass
class Prediction:
    theta_hat: float


def default_buffers(dtype=np.float32) -> dict[str, np.ndarray]:
    buf = {}
    for i in range(3):
        c = CHANNELS[i + 1]
        buf[f"bn{i + 1}.running_mean"] = np.zeros(c, dtype)
        buf[f"bn{i + 1}.running_var"] = np.ones(c, dtype)
    buf["output.shift"] = np.zeros(1, dtype)
    buf["output.scale"] = np.ones(1, dtype)
    return buf


def init_model(seed: int, dtype=np.float32) -> ModelParams:
    """He-normal weights scaled by fan-in, zero biases, unit BN scales."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes().items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype)
        else:
            params[name] = np.zeros(shape, dtype)
    return ModelParams(params, default_buffers(dtype))


# ---------------------------------------------------------------- layers

def _conv_forward(x, w, b):
    n, h, wd, c = x.shape
    f = w.shape[0]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    # (n, h, w, c, 3, 3) -> (n, h, w, 3, 3, c) so channels stay innermost
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    cols = cols.reshape(n * h * wd, 9 * c)
    wmat = w.transpose(0, 2, 3, 1).reshape(f, 9 * c)
    out = cols @ wmat.T + b
    return out.reshape(n, h, wd, f), (cols, wmat, x.shape)


def _conv_backward(dout, cache, need_dx=True):
    cols, wmat, (n, h, wd, c) = cache
    f = wmat.shape[0]
    d2 = dout.reshape(-1, f)
    dw = (d2.T @ cols).reshape(f, 3, 3, c).transpose(0, 3, 1, 2)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ wmat).reshape(n, h, wd, 3, 3, c)
    dxp = np.zeros((n, h + 2, wd + 2, c), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + wd, :] += dcols[:, :, :, i, j, :]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def _channel_sum(x2):
    # a BLAS matvec is far quicker than a strided reduction over rows
    return np.ones(x2.shape[0], dtype=x2.dtype) @ x2


def _bn_forward(x, gamma, beta, mean, var, batch_stats):
    c = x.shape[-1]
    x2 = x.reshape(-1, c)
    if batch_stats:
        m = x2.shape[0]
        mean = _channel_sum(x2) / m
        xhat = x2 - mean
        var = np.einsum("ij,ij->j", xhat, xhat) / m
    else:
        xhat = x2 - mean
    inv = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
    xhat *= inv
    y = xhat * gamma
    y += beta
    return y.reshape(x.shape), (xhat, inv, gamma, batch_stats), (mean, var)


def _bn_backward(dy, cache):
    xhat, inv, gamma, batch_stats = cache
    shape = dy.shape
    dy = dy.reshape(xhat.shape)
    dgamma = np.einsum("ij,ij->j", dy, xhat)
    dbeta = _channel_sum(dy)
    if not batch_stats:
        return (dy * (gamma * inv)).reshape(shape), dgamma, dbeta
    m = dy.shape[0]
    # with dxhat = gamma*dy the usual expression folds into one affine pass
    dx = xhat * (-gamma * inv * dgamma / m)
    dx += dy * (gamma * inv)
    dx -= gamma * inv * dbeta / m
    return dx.reshape(shape), dgamma, dbeta


def _leaky(x):
    return np.maximum(x, LEAK * x)


def _leaky_backward(dy, x):
    return np.where(x > 0, dy, LEAK * dy)


def _quads(x):
    n, h, w, c = x.shape
    r = x.reshape(n, h // 2, 2, w // 2, 2, c)
    return r[:, :, 0, :, 0], r[:, :, 0, :, 1], r[:, :, 1, :, 0], r[:, :, 1, :, 1]


def _pool_forward(x):
    """2x2 max pool; ties go to the first window element in row-major order."""
    q = _quads(x)
    best = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    return best, (x, best)


def _pool_backward(dout, cache):
    x, best = cache
    n, h, w, c = x.shape
    r = x.reshape(n, h // 2, 2, w // 2, 2, c)
    hit = r == best[:, :, None, :, None]
    if np.count_nonzero(hit) == best.size:
        return np.where(hit, dout[:, :, None, :, None], 0).astype(dout.dtype, copy=False).reshape(x.shape)
    # exact ties: route the gradient to the first maximal element only
    dx = np.zeros(x.shape, dtype=dout.dtype)
    taken = np.zeros(best.shape, dtype=bool)
    for qx, qd in zip(_quads(x), _quads(dx)):
        first = qx == best
        first &= ~taken
        np.copyto(qd, dout, where=first)
        taken |= first
    return dx


# ---------------------------------------------------------------- network

def _as_batch(x, dtype) -> np.ndarray:
    if hasattr(x, "values"):
        x = x.values
    elif isinstance(x, (list, tuple)):
        x = np.stack([xi.values if hasattr(xi, "values") else np.asarray(xi) for xi in x])
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (INPUT_SIZE, INPUT_SIZE):
        raise ValueError(f"expected (N, {INPUT_SIZE}, {INPUT_SIZE}) images, got {x.shape}")
    return x[..., None]


def run_forward(m: ModelParams, x, batch_stats: bool = False, dropout_p: float = 0.0, rng=None):
    """Forward pass keeping everything needed for :func:`run_backward`.

    Returns
    -------
    theta_hat : ndarray, shape (N,)
    cache : dict
    stats : list of (mean, var)
        Per-block batch statistics when ``batch_stats`` (for the running
        averages), else the running values that were used.
    """
    p, b = m.params, m.buffers
    a = _as_batch(x, m.dtype)
    cache = {}
    stats = []
    for i in range(1, 4):
        z, cache[f"conv{i}"] = _conv_forward(a, p[f"conv{i}.w"], p[f"conv{i}.b"])
        y, cache[f"bn{i}"], st = _bn_forward(z, p[f"bn{i}.gamma"], p[f"bn{i}.beta"],
                                             b[f"bn{i}.running_mean"], b[f"bn{i}.running_var"], batch_stats)
        stats.append(st)
        # max pooling commutes with the increasing LeakyReLU, so pool first
        pooled, cache[f"pool{i}"] = _pool_forward(y)
        cache[f"act{i}"] = pooled
        a = _leaky(pooled)
    h = a.reshape(a.shape[0], -1)
    for i in (1, 2):
        cache[f"in{i}"] = h
        z = h @ p[f"fc{i}.w"] + p[f"fc{i}.b"]
        cache[f"pre{i}"] = z
        h = _leaky(z)
        if dropout_p > 0:
            if rng is None:
                raise ValueError("dropout requires an rng")
            mask = (rng.random(h.shape) >= dropout_p).astype(h.dtype) / (1.0 - dropout_p)
            cache[f"drop{i}"] = mask
            h = h * mask
    cache["in3"] = h
    out = (h @ p["fc3.w"] + p["fc3.b"])[:, 0]
    theta = out * b["output.scale"][0] + b["output.shift"][0]
    return theta, cache, stats


def run_backward(m: ModelParams, cache: dict, dtheta: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of every parameter given dLoss/dtheta_hat per batch item."""
    p = m.params
    grads = {}
    dout = (np.asarray(dtheta, dtype=m.dtype) * m.buffers["output.scale"][0])[:, None]
    grads["fc3.w"] = cache["in3"].T @ dout
    grads["fc3.b"] = dout.sum(axis=0)
    dh = dout @ p["fc3.w"].T
    for i in (2, 1):
        if f"drop{i}" in cache:
            dh = dh * cache[f"drop{i}"]
        dz = _leaky_backward(dh, cache[f"pre{i}"])
        grads[f"fc{i}.w"] = cache[f"in{i}"].T @ dz
        grads[f"fc{i}.b"] = dz.sum(axis=0)
        dh = dz @ p[f"fc{i}.w"].T
    n = dh.shape[0]
    da = dh.reshape(n, 8, 8, CHANNELS[3])
    for i in (3, 2, 1):
        dy = _pool_backward(_leaky_backward(da, cache[f"act{i}"]), cache[f"pool{i}"])
        dz, grads[f"bn{i}.gamma"], grads[f"bn{i}.beta"] = _bn_backward(dy, cache[f"bn{i}"])
        da, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = _conv_backward(dz, cache[f"conv{i}"], need_dx=i > 1)
    return {k: grads[k].astype(m.dtype, copy=False) for k in p}


def forward(m: ModelParams, x, training: bool = False, dropout_p: float = 0.5, rng=None) -> np.ndarray:
    """Moisture estimates in %VWC for one image or a batch.

    With ``training`` the batch norms use batch statistics and dropout is
    active; otherwise running statistics are used and dropout is off.
    """
    theta, _, _ = run_forward(m, x, batch_stats=training, dropout_p=dropout_p if training else 0.0, rng=rng)
    return theta


def predict(m: ModelParams, image) -> Prediction:
    return Prediction(float(forward(m, image)[0]))


def feature_length() -> int:
    return CHANNELS[3] * (INPUT_SIZE // 8) ** 2


def first_layer_activations(m: ModelParams, image) -> np.ndarray:
    """Output of the first conv block before pooling, shape (16, 64, 64)."""
    p, b = m.params, m.buffers
    z, _ = _conv_forward(_as_batch(image, m.dtype), p["conv1.w"], p["conv1.b"])
    y, _, _ = _bn_forward(z, p["bn1.gamma"], p["bn1.beta"], b["bn1.running_mean"], b["bn1.running_var"], False)
    return _leaky(y)[0].transpose(2, 0, 1)
