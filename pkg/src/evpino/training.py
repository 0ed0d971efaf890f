"""Hybrid loss, Adam, cosine schedule and the two-stage training loop.

Stage 1 (warm-up) trains only the six baseline scalars on top of a frozen,
randomly initialised trunk. Stage 2 trains everything with early stopping on
the validation MSE and restores the best weights at the end.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DivergenceError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    buff: float = 1e-2
    smooth: float = 1e-3
    param: float = 1e-4

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) >= 0:
                raise ConfigError(f"loss weight {f.name} must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    """Optimiser and schedule settings.

    ``max_epochs`` counts both stages, so stage 2 lasts at most
    ``max_epochs - warmup_epochs`` epochs. ``warmup_lr`` is the peak rate of
    the stage-1 cosine, reached through a linear ramp over the first
    ``warmup_ramp`` epochs; the six baselines live in logit space and need a
    larger step than the trunk to travel across their bounds.
    """

    lr: float = 3e-4
    lr_min: float = 1e-6
    warmup_lr: float = 0.5
    warmup_ramp: int = 50
    batch: int = 128
    warmup_epochs: int = 400
    max_epochs: int = 3500
    patience: int = 200
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            object.__setattr__(self, "loss_weights", LossWeights(**self.loss_weights))
        if not 0 <= self.warmup_epochs < self.max_epochs:
            raise ConfigError("training.warmup_epochs must be >= 0 and below training.max_epochs")
        if self.patience < 1:
            raise ConfigError("training.patience must be at least 1")
        if self.warmup_ramp < 1:
            raise ConfigError("training.warmup_ramp must be at least 1")
        if self.batch < 1:
            raise ConfigError("training.batch must be at least 1")
        for key in ("lr", "lr_min", "warmup_lr"):
            if not getattr(self, key) >= 0:
                raise ConfigError(f"training.{key} must be non-negative")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training key(s): {', '.join(sorted(unknown))}")
        d = dict(d)
        if "loss_weights" in d:
            lw = d["loss_weights"]
            bad = set(lw) - {f.name for f in fields(LossWeights)}
            if bad:
                raise ConfigError(f"unknown training.loss_weights key(s): {', '.join(sorted(bad))}")
            d["loss_weights"] = LossWeights(**lw)
        return cls(**d)

    def to_dict(self):
        return asdict(self)


# ------------------------------------------------------------------ loss
def _sq_time_diff(d):
    step = d[:, 1:] - d[:, :-1]
    return nx.tsum(step * step)


def hybrid_loss(p_data, p_pred, p_res, d_eta, d_mu, theta_raw, weights: LossWeights = LossWeights(),
                d_paux=None):
    """Data misfit plus buffer, smoothness and prior penalties.

    All series are ``(B, L)``. Returns ``(total, parts)`` where ``parts`` maps
    ``data``, ``buffer``, ``smooth`` and ``prior`` to scalar tensors that sum
    to ``total``. A third variation channel ``d_paux`` joins the smoothness
    term when given.
    """
    p_pred = nx.as_tensor(p_pred)
    shape = p_pred.shape
    for name, arr in (("p_data", p_data), ("p_res", p_res), ("d_eta", d_eta), ("d_mu", d_mu)):
        if np.shape(getattr(arr, "data", arr)) != shape:
            raise ContractError(f"hybrid_loss: {name} has shape {np.shape(getattr(arr, 'data', arr))}, "
                                f"expected {shape}")
    if len(shape) != 2:
        raise ContractError("hybrid_loss expects (batch, time) series")
    B, L = shape
    err = p_pred - p_data
    data = nx.mean(err * err)
    p_res = nx.as_tensor(p_res)
    buffer = weights.buff * nx.mean(p_res * p_res)
    if L > 1:
        rough = _sq_time_diff(nx.as_tensor(d_eta)) + _sq_time_diff(nx.as_tensor(d_mu))
        if d_paux is not None:
            rough = rough + _sq_time_diff(nx.as_tensor(d_paux))
        smooth = (weights.smooth / (B * (L - 1))) * rough
    else:
        smooth = nx.Tensor(0.0)
    theta = nx.as_tensor(theta_raw)
    prior = weights.param * nx.tsum(theta * theta)
    parts = {"data": data, "buffer": buffer, "smooth": smooth, "prior": prior}
    total = data + buffer + smooth + prior
    return total, parts


def model_loss(model, windows, spec, weights: LossWeights, Z=None):
    """Hybrid loss of ``model`` on a window batch; ``Z`` reuses cached trunk features."""
    if Z is None:
        Z = model.features(windows.v_n, windows.a_n, windows.xi)
    trace, p_res, p_pred = model.heads(Z, windows.v_raw, windows.a_raw, spec)
    return hybrid_loss(windows.p, p_pred, p_res, trace.d_eta, trace.d_mu, model["baselines"], weights,
                       d_paux=trace.d_paux)


# ------------------------------------------------------------------ optimiser
def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update in place; frozen parameters are skipped.

    ``state`` is a dict (empty on the first call) holding the step count and
    per-parameter moments keyed by name. Returns ``state``.
    """
    if len(params) != len(grads):
        raise ContractError("adam_step needs one gradient per parameter")
    b1, b2 = betas
    t = state.get("t", 0) + 1
    state["t"] = t
    m, v = state.setdefault("m", {}), state.setdefault("v", {})
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for p, g in zip(params, grads):
        if not getattr(p, "trainable", True) or g is None:
            continue
        g = np.asarray(g, dtype=float)
        if g.shape != p.shape:
            raise ContractError(f"gradient for {p.name} has shape {g.shape}, parameter is {p.shape}")
        if p.name not in m:
            m[p.name] = np.zeros(p.shape)
            v[p.name] = np.zeros(p.shape)
        mk, vk = m[p.name], v[p.name]
        mk *= b1
        mk += (1.0 - b1) * g
        vk *= b2
        vk += (1.0 - b2) * (g * g)
        p.data -= lr * (mk / c1) / (np.sqrt(vk / c2) + eps)
    return state


def cosine_lr(epoch, stage_start, stage_len, lr_max, lr_min):
    """Half-cosine anneal from ``lr_max`` at ``stage_start`` to ``lr_min`` at the stage end."""
    if stage_len <= 0:
        raise ConfigError("cosine schedule needs a positive stage length")
    frac = (epoch - stage_start) / stage_len
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


def warmup_lr(epoch, cfg: TrainConfig):
    """Stage-1 rate: the cosine anneal scaled by a linear ramp.

    The ramp keeps the first large-gradient steps small. Along the flat
    direction where drag, mass and both efficiencies trade off exactly, the
    early steps decide where the baselines settle.
    """
    ramp = min(1.0, (epoch + 1) / cfg.warmup_ramp)
    return ramp * cosine_lr(epoch, 0, cfg.warmup_epochs, cfg.warmup_lr, cfg.lr_min)


# ------------------------------------------------------------------ report
@dataclass
class TrainReport:
    epoch: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    r2: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    stage: list = field(default_factory=list)
    stage_boundary: int = 0
    best_epoch: int = -1
    best_val: float = math.inf
    stop_reason: str = ""
    wall_time: float = 0.0

    def log_epoch(self, epoch, train_loss, val_loss, r2, lr, stage):
        self.epoch.append(epoch)
        self.train_loss.append(float(train_loss))
        self.val_loss.append(float(val_loss))
        self.r2.append(float(r2))
        self.lr.append(float(lr))
        self.stage.append(stage)

    def rows(self):
        return zip(self.epoch, self.train_loss, self.val_loss, self.r2, self.lr, self.stage)

    def write_csv(self, path):
        tmp = f"{path}.tmp"
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "r2", "lr", "stage"])
            for e, tl, vl, r2, lr, st in self.rows():
                w.writerow([e, repr(tl), repr(vl), repr(r2), repr(lr), st])
        os.replace(tmp, path)


# ------------------------------------------------------------------ loops
def _batches(n, size, rng):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _take(windows, idx, Z=None):
    sub = windows.subset(idx)
    return sub, (None if Z is None else nx.Tensor(Z.data[idx]))


def features_no_grad(model, windows, chunk=256):
    with nx.no_grad():
        parts = [model.features(windows.v_n[i:i + chunk], windows.a_n[i:i + chunk], windows.xi).data
                 for i in range(0, len(windows), chunk)]
    return nx.Tensor(np.concatenate(parts, axis=0))


def predict_windows(model, windows, spec, chunk=256, Z=None):
    """``(trace_list, p_res, p_pred)`` as numpy arrays without building a graph."""
    res, pred, traces = [], [], []
    with nx.no_grad():
        for i in range(0, len(windows), chunk):
            idx = np.arange(i, min(i + chunk, len(windows)))
            sub, z = _take(windows, idx, Z)
            if z is None:
                z = model.features(sub.v_n, sub.a_n, sub.xi)
            trace, p_res, p_pred = model.heads(z, sub.v_raw, sub.a_raw, spec)
            traces.append(trace)
            res.append(p_res.data)
            pred.append(p_pred.data)
    return traces, np.concatenate(res), np.concatenate(pred)


def validation_scores(model, windows, spec, Z=None):
    """Validation MSE (kW^2) and R^2 = 1 - SSE/SST over every sample."""
    _, _, pred = predict_windows(model, windows, spec, Z=Z)
    err = pred - windows.p
    sse = float(np.sum(err * err))
    sst = float(np.sum((windows.p - windows.p.mean()) ** 2))
    r2 = 1.0 - sse / sst if sst > 0 else (1.0 if sse == 0 else -math.inf)
    return sse / err.size, r2


def _run_epoch(model, train, spec, weights, lr, state, rng, batch, Z=None):
    total, count = 0.0, 0
    params = model.parameters()
    for idx in _batches(len(train), batch, rng):
        sub, z = _take(train, idx, Z)
        model.zero_grad()
        loss, _ = model_loss(model, sub, spec, weights, Z=z)
        value = loss.item()
        if not math.isfinite(value):
            return value
        loss.backward()
        adam_step(params, [p.grad for p in params], state, lr)
        total += value * len(idx)
        count += len(idx)
    return total / count


def train_warmup(model, train, val, spec, cfg: TrainConfig, report: TrainReport | None = None):
    """Stage 1: only the baselines move; the trunk and heads stay bit-identical.

    Trunk features are computed once because the frozen trunk cannot change.
    """
    report = report if report is not None else TrainReport()
    if cfg.warmup_epochs == 0:
        return model
    start = time.perf_counter()
    model.set_trainable({"baselines"})
    rng = np.random.default_rng(cfg.seed)
    Z_train, Z_val = features_no_grad(model, train), features_no_grad(model, val)
    state = {}
    for epoch in range(cfg.warmup_epochs):
        lr = warmup_lr(epoch, cfg)
        loss = _run_epoch(model, train, spec, cfg.loss_weights, lr, state, rng, cfg.batch, Z_train)
        if not math.isfinite(loss):
            model.set_trainable(None)
            raise DivergenceError(f"non-finite training loss in warm-up epoch {epoch}")
        val_mse, r2 = validation_scores(model, val, spec, Z_val)
        report.log_epoch(epoch, loss, val_mse, r2, lr, 1)
        if epoch % 50 == 0 or epoch == cfg.warmup_epochs - 1:
            log.info("warm-up %4d  train %.4g  val %.4g  r2 %.4f", epoch, loss, val_mse, r2)
    report.stage_boundary = cfg.warmup_epochs
    report.wall_time += time.perf_counter() - start
    model.set_trainable(None)
    return model


def train_operator(model, train, val, spec, cfg: TrainConfig, report: TrainReport | None = None):
    """Stage 2: train all parameters with early stopping; returns ``(model, report)``.

    The best validation weights are restored before returning. A non-finite
    loss restores them too and raises :class:`DivergenceError`, whose
    ``report`` attribute holds the history so far.
    """
    report = report if report is not None else TrainReport(stage_boundary=cfg.warmup_epochs)
    start = time.perf_counter()
    model.set_trainable(None)
    rng = np.random.default_rng(cfg.seed + 1)
    first = cfg.warmup_epochs
    stage_len = cfg.max_epochs - first
    best_state = model.state_dict()
    best_val, best_epoch = math.inf, -1
    state = {}
    report.stop_reason = "max_epochs"
    try:
        for epoch in range(first, cfg.max_epochs):
            lr = cosine_lr(epoch, first, stage_len, cfg.lr, cfg.lr_min)
            loss = _run_epoch(model, train, spec, cfg.loss_weights, lr, state, rng, cfg.batch)
            val_mse, r2 = validation_scores(model, val, spec) if math.isfinite(loss) else (loss, math.nan)
            if not (math.isfinite(loss) and math.isfinite(val_mse)):
                report.stop_reason = "diverged"
                model.load_state_dict(best_state)
                err = DivergenceError(f"non-finite loss at epoch {epoch}; restored epoch {best_epoch}")
                err.report = report
                raise err
            report.log_epoch(epoch, loss, val_mse, r2, lr, 2)
            if val_mse < best_val:
                best_val, best_epoch = val_mse, epoch
                best_state = model.state_dict()
            if epoch % 50 == 0:
                log.info("stage 2 %4d  train %.4g  val %.4g  r2 %.4f  lr %.3g", epoch, loss, val_mse, r2, lr)
            if epoch - best_epoch >= cfg.patience:
                report.stop_reason = "early_stop"
                break
        model.load_state_dict(best_state)
    finally:
        report.best_epoch, report.best_val = best_epoch, best_val
        report.wall_time += time.perf_counter() - start
    return model, report


def fit(model, train, val, spec, cfg: TrainConfig = TrainConfig()):
    """Warm-up followed by stage 2; returns ``(model, report)``."""
    report = TrainReport()
    train_warmup(model, train, val, spec, cfg, report)
    return train_operator(model, train, val, spec, cfg, report)
