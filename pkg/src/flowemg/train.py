"""Conditional flow-matching training loop."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import atomic_write_bytes, load_checkpoint, save_checkpoint
from .data import WindowDataset
from .model import NULL, ModelConfig, VelocityNet
from .optim import OptimState, adam_step, cosine_lr, ema_update
from .rng import stream

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TimeSampler:
    kind: str = "logit_normal"
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "logit_normal"):
            raise ValueError(f"unknown time sampler {self.kind!r}")
        if self.kind == "logit_normal" and not self.sigma > 0:
            raise ValueError("logit_normal needs sigma > 0")


def sample_time(sampler: TimeSampler, n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    if sampler.kind == "uniform":
        t = rng.uniform(0.0, 1.0, size=n)
    else:
        z = rng.normal(sampler.mu, sampler.sigma, size=n)
        t = 1.0 / (1.0 + np.exp(-z))
    # keep draws strictly inside (0, 1)
    tiny = np.finfo(np.float64).eps
    return np.clip(t, tiny, 1.0 - tiny)


def make_pair(x1: np.ndarray, t, rng: np.random.Generator):
    """Return (x0, x_t, u) for the straight path from noise x0 to data x1."""
    x1 = np.asarray(x1)
    x0 = rng.standard_normal(x1.shape).astype(x1.dtype)
    t = np.asarray(t, dtype=x1.dtype)
    if t.ndim == 1:
        t = t.reshape((-1,) + (1,) * (x1.ndim - 1))
    xt = (1 - t) * x0 + t * x1
    return x0, xt.astype(x1.dtype), x1 - x0


def fm_loss(v_pred, u_target):
    if tuple(v_pred.shape) != tuple(np.shape(u_target.data if isinstance(u_target, T.Tensor) else u_target)):
        raise ValueError("prediction and target shapes differ")
    return T.mse(v_pred, u_target)


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 64
    lr: float = 5e-4
    lr_schedule: str = "cosine"
    ema_start_step: int = 6000
    ema_decay: float = 0.9999
    cond_drop_prob: float = 0.05
    time_sampler: TimeSampler = field(default_factory=TimeSampler)
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if isinstance(self.time_sampler, dict):
            self.time_sampler = TimeSampler(**self.time_sampler)
        if not 0.0 <= self.cond_drop_prob <= 1.0:
            raise ValueError("cond_drop_prob must lie in [0, 1]")
        if self.ema_start_step > self.steps:
            raise ValueError("ema_start_step must not exceed steps")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        return cosine_lr(self.lr, step, self.steps)


@dataclass
class TrainResult:
    net: VelocityNet
    ema: VelocityNet
    history: list[tuple[int, float, float]]

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in self.history:
            w.writerow([step, repr(loss), repr(lr)])
        return buf.getvalue()


def train_generator(model_cfg: ModelConfig, train_cfg: TrainConfig, data: WindowDataset,
                    progress_every: int = 0) -> TrainResult:
    if len(data) == 0:
        raise ValueError("training data is empty")
    if data.labels.min() < 1 or data.labels.max() > model_cfg.K:
        raise ValueError(f"labels must lie in [1, {model_cfg.K}]")
    if data.shape != (model_cfg.C, model_cfg.L):
        raise ValueError(f"data windows {data.shape} do not match model {(model_cfg.C, model_cfg.L)}")
    net = VelocityNet(model_cfg, seed=train_cfg.seed)
    params = net.parameters()
    state = OptimState.for_params(params, train_cfg.weight_decay)
    shadow = [p.data.copy() for p in params]
    rng = stream(train_cfg.seed, data.subject_id, "fm-train")
    x_all = data.windows
    history = []
    for step in range(train_cfg.steps):
        idx = rng.integers(0, len(data), size=train_cfg.batch_size)
        x1 = x_all[idx]
        y = data.labels[idx].copy()
        y[rng.random(len(y)) < train_cfg.cond_drop_prob] = NULL
        t = sample_time(train_cfg.time_sampler, len(idx), rng)
        _, xt, u = make_pair(x1, t, rng)
        lr = train_cfg.lr_at(step)
        with T.Tape() as tape:
            loss = fm_loss(net(xt, t, y), u)
            grads = T.backward(loss, tape)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at step {step}")
        adam_step(params, [grads.get(p) for p in params], state, lr)
        if step < train_cfg.ema_start_step:
            for s, p in zip(shadow, params):
                s[...] = p.data
        else:
            ema_update(shadow, [p.data for p in params], train_cfg.ema_decay)
        history.append((step, value, lr))
        if progress_every and step % progress_every == 0:
            log.info("step %d loss %.4f lr %.2e", step, value, lr)
    ema = copy.deepcopy(net)
    for p, s in zip(ema.parameters(), shadow):
        p.data = s.copy()
    return TrainResult(net, ema, history)


def save_generator(path, result: TrainResult, train_cfg: TrainConfig | None = None) -> None:
    header = result.net.cfg.to_header()
    if train_cfg is not None:
        header["train_config"] = train_cfg.to_json()
    save_checkpoint(path, result.net.state_dict(), result.ema.state_dict(), header)


def load_generator(path, use_ema: bool = True) -> VelocityNet:
    params, ema, header = load_checkpoint(path)
    net = VelocityNet(ModelConfig.from_header(header))
    net.load_state_dict(ema if (use_ema and ema) else params)
    return net


def write_loss_csv(path, result: TrainResult) -> None:
    atomic_write_bytes(path, result.loss_csv().encode("utf-8"))
