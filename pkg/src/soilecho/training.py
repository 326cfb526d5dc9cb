"""Range-aware loss, optimisation and leave-one-group-out evaluation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError
from .model import BN_MOMENTUM, ModelParams, forward, init_model, run_backward, run_forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MoistureRange:
    theta_min: float
    theta_max: float

    def __post_init__(self):
        if not (0 <= self.theta_min <= self.theta_max <= 100):
            raise ValueError(f"invalid moisture range [{self.theta_min}, {self.theta_max}]")

    @property
    def mid(self) -> float:
        return 0.5 * (self.theta_min + self.theta_max)


@dataclass
class Sample:
    image: np.ndarray
    theta_min: float
    theta_max: float
    group: str = ""
    scan_id: str = ""


def vwc_error(theta_hat, theta_min, theta_max):
    """Distance from the estimate to the ground-truth interval (0 inside it)."""
    theta_hat = np.asarray(theta_hat, dtype=np.float64)
    err = np.maximum(theta_hat - theta_max, 0.0) + np.maximum(theta_min - theta_hat, 0.0)
    return float(err) if err.ndim == 0 else err


def _vwc_error_grad(theta_hat, theta_min, theta_max):
    """Subgradient of vwc_error; 0 on the closed interval including its ends."""
    return np.where(theta_hat > theta_max, 1.0, 0.0) - np.where(theta_hat < theta_min, 1.0, 0.0)


def _stack(batch):
    images = np.stack([s.image for s in batch])
    lo = np.array([s.theta_min for s in batch])
    hi = np.array([s.theta_max for s in batch])
    return images, lo, hi


def loss(m: ModelParams, batch) -> float:
    """Mean squared range-aware error with dropout off and running BN statistics."""
    if not batch:
        raise ValueError("empty batch")
    images, lo, hi = _stack(batch)
    err = vwc_error(forward(m, images), lo, hi)
    return float(np.mean(np.square(err)))


def loss_and_gradients(m: ModelParams, images, lo, hi, batch_stats=False, dropout_p=0.0, rng=None):
    theta, cache, stats = run_forward(m, images, batch_stats=batch_stats, dropout_p=dropout_p, rng=rng)
    theta64 = theta.astype(np.float64)
    err = vwc_error(theta64, lo, hi)
    n = theta.shape[0]
    dtheta = 2.0 * err * _vwc_error_grad(theta64, lo, hi) / n
    grads = run_backward(m, cache, dtheta)
    return float(np.mean(err ** 2)), grads, stats


def backward(m: ModelParams, batch, batch_stats: bool = False, dropout_p: float = 0.0, rng=None):
    """Loss and its exact gradients for a list of :class:`Sample`.

    By default batch norm uses the running statistics and dropout is off,
    which makes the loss a deterministic function of the parameters.

    Returns
    -------
    loss : float
    grads : dict
        Same keys and shapes as ``m.params``.
    """
    if not batch:
        raise ValueError("empty batch")
    images, lo, hi = _stack(batch)
    value, grads, _ = loss_and_gradients(m, images, lo, hi, batch_stats, dropout_p, rng)
    return value, grads


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 200
    dropout_p: float = 0.5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError("dropout_p must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        for key in ("batch_size", "epochs", "seed"):
            if key in d:
                d[key] = int(d[key])
        return cls(**d)


class Adam:
    def __init__(self, params: dict, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)


@dataclass
class TrainResult:
    model: ModelParams
    history: list[float] = field(default_factory=list)


def fit_output_scale(m: ModelParams, samples) -> None:
    """Point the output affine map at the spread of the training targets."""
    mids = np.array([0.5 * (s.theta_min + s.theta_max) for s in samples])
    spread = float(mids.std())
    m.buffers["output.shift"][:] = mids.mean()
    m.buffers["output.scale"][:] = spread if spread > 1e-6 else 1.0


def train(dataset, cfg: TrainConfig | None = None, init: ModelParams | None = None) -> TrainResult:
    """Mini-batch Adam on the mean squared range-aware error.

    The epoch loss in the history is the sample-weighted mean of the batch
    losses seen during that epoch (training mode, dropout on).

    Raises
    ------
    DivergenceError
        If a batch loss is not finite.
    """
    cfg = cfg or TrainConfig()
    samples = list(dataset)
    if not samples:
        raise ValueError("need at least one training sample")
    m = init.copy() if init is not None else init_model(cfg.seed)
    fit_output_scale(m, samples)
    rng = np.random.default_rng(cfg.seed)
    images, lo, hi = _stack(samples)
    images = images.astype(m.dtype)
    opt = Adam(m.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    history = []
    n = len(samples)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            # batch norm needs more than one value per channel
            bstats = idx.size > 1
            value, grads, stats = loss_and_gradients(m, images[idx], lo[idx], hi[idx], batch_stats=bstats,
                                                     dropout_p=cfg.dropout_p, rng=rng)
            if not np.isfinite(value):
                raise DivergenceError(epoch, value)
            if bstats:
                _update_running(m, stats, idx.size)
            if cfg.learning_rate > 0:
                opt.step(m.params, grads)
            total += value * idx.size
        history.append(total / n)
        log.debug("epoch %d loss %.4f", epoch, history[-1])
    return TrainResult(m, history)


def _update_running(m: ModelParams, stats, n_items: int):
    for i, (mean, var) in enumerate(stats, start=1):
        count = n_items * (64 // 2 ** (i - 1)) ** 2
        unbiased = var * count / max(count - 1, 1)
        rm = m.buffers[f"bn{i}.running_mean"]
        rv = m.buffers[f"bn{i}.running_var"]
        rm *= 1 - BN_MOMENTUM
        rm += BN_MOMENTUM * mean
        rv *= 1 - BN_MOMENTUM
        rv += BN_MOMENTUM * unbiased


def predict_samples(m: ModelParams, samples, batch_size: int = 64) -> np.ndarray:
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        out.append(forward(m, np.stack([s.image for s in chunk])))
    return np.concatenate(out).astype(np.float64) if out else np.zeros(0)


@dataclass
class FoldResult:
    group: str
    n_scans: int
    gt_min: float
    gt_max: float
    mae: float
    predictions: list[float]
    errors: list[float]
    scan_ids: list[str]


@dataclass
class EvalReport:
    folds: list[FoldResult]

    @property
    def overall_mae(self) -> float:
        errs = [e for f in self.folds for e in f.errors]
        return float(np.mean(errs)) if errs else float("nan")

    def to_json(self) -> dict:
        return {
            "overall_mae": self.overall_mae,
            "groups": [
                {"group": f.group, "n_scans": f.n_scans, "gt_min": f.gt_min, "gt_max": f.gt_max, "mae": f.mae}
                for f in self.folds
            ],
            "predictions": [
                {"group": f.group, "scan_id": sid, "theta_hat": p, "error": e}
                for f in self.folds for sid, p, e in zip(f.scan_ids, f.predictions, f.errors)
            ],
        }


def group_samples(samples) -> dict[str, list[Sample]]:
    groups: dict[str, list[Sample]] = {}
    for s in samples:
        if not s.group:
            raise ValueError(f"sample {s.scan_id!r} has no group id")
        groups.setdefault(s.group, []).append(s)
    return groups


def evaluate(m: ModelParams, group: str, samples) -> FoldResult:
    if not samples:
        raise ValueError(f"group {group!r} has no scans")
    pred = predict_samples(m, samples)
    err = vwc_error(pred, np.array([s.theta_min for s in samples]), np.array([s.theta_max for s in samples]))
    err = np.atleast_1d(err)
    return FoldResult(
        group=group,
        n_scans=len(samples),
        gt_min=float(min(s.theta_min for s in samples)),
        gt_max=float(max(s.theta_max for s in samples)),
        mae=float(err.mean()),
        predictions=[float(p) for p in pred],
        errors=[float(e) for e in err],
        scan_ids=[s.scan_id for s in samples],
    )


def loocv(dataset, cfg: TrainConfig | None = None, fit=None) -> EvalReport:
    """Hold out each group once, train on the rest, score the held-out scans.

    ``fit`` replaces :func:`train` (it takes the training samples and the
    config and returns a :class:`ModelParams`); useful for oracle models.
    """
    cfg = cfg or TrainConfig()
    groups = group_samples(dataset)
    if len(groups) < 2:
        raise ValueError("leave-one-out needs at least two groups")
    for g, items in groups.items():
        if not items:
            raise ValueError(f"group {g!r} has no scans")
    fit = fit or (lambda tr, c: train(tr, c).model)
    folds = []
    for g in groups:
        train_set = [s for h, items in groups.items() if h != g for s in items]
        log.info("fold %s: %d train scans, %d held out", g, len(train_set), len(groups[g]))
        folds.append(evaluate(fit(train_set, cfg), g, groups[g]))
    return EvalReport(folds)


def holdout(train_set, test_set, cfg: TrainConfig | None = None, fit=None) -> EvalReport:
    """Train on one collection of groups and score every group of another."""
    cfg = cfg or TrainConfig()
    fit = fit or (lambda tr, c: train(tr, c).model)
    m = fit(list(train_set), cfg)
    return EvalReport([evaluate(m, g, items) for g, items in group_samples(test_set).items()])
