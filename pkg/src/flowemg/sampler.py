"""ODE sampling of a trained velocity field with classifier-free guidance."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import WindowDataset
from .model import NULL
from .rng import stream

EVALS_PER_STEP = {"euler": 1, "heun": 2, "rk4": 4}


class IntegrationError(RuntimeError):
    pass


@dataclass
class SolverConfig:
    method: str = "heun"
    nfe_budget: int = 40
    guidance_weight: float = 1.0

    def __post_init__(self):
        if self.method not in EVALS_PER_STEP:
            raise ValueError(f"unknown solver {self.method!r}")
        if self.guidance_weight < 0:
            raise ValueError("guidance weight must be >= 0")
        nfe_plan(self.method, self.nfe_budget, self.guidance_weight)

    @property
    def steps(self) -> int:
        return nfe_plan(self.method, self.nfe_budget, self.guidance_weight)["steps"]

    def grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.steps + 1)


@dataclass
class SampleRequest:
    labels: list[int]
    seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)


def nfe_plan(method: str, nfe_budget: int, w: float = 1.0) -> dict:
    """Steps per trajectory for a budget counted at w=1.

    Guided sampling (w != 1) needs two forward passes per evaluation, which is
    reported separately as ``effective_nfe``.
    """
    per = EVALS_PER_STEP[method]
    if nfe_budget < per or nfe_budget % per:
        raise ValueError(f"nfe_budget {nfe_budget} is not a positive multiple of {per} for {method}")
    return {"steps": nfe_budget // per, "nfe": nfe_budget,
            "effective_nfe": nfe_budget * (1 if w == 1 else 2)}


def guided_velocity(net, x, t, y, w: float) -> np.ndarray:
    """v(x,t,NULL) + w (v(x,t,y) - v(x,t,NULL)); the unconditional pass is skipped at w == 1."""
    y = np.asarray(y)
    if np.any(y == NULL):
        raise ValueError("guided_velocity needs real class labels")
    cond = _eval(net, x, t, y)
    if w == 1:
        return cond
    uncond = _eval(net, x, t, np.zeros_like(y))
    return uncond + w * (cond - uncond)


def _eval(net, x, t, y) -> np.ndarray:
    out = net(x, t, y)
    return out.data if isinstance(out, T.Tensor) else np.asarray(out)


def integrate(net, x0: np.ndarray, y, cfg: SolverConfig):
    """Integrate dx/dt = v from t=0 to 1 on a uniform grid; returns (x1, nfe_used).

    ``net`` may be any callable ``(x, t, y) -> velocity``.
    """
    plan = nfe_plan(cfg.method, cfg.nfe_budget, cfg.guidance_weight)
    n = plan["steps"]
    h = 1.0 / n
    w = cfg.guidance_weight
    x = np.array(x0, copy=True)
    dtype = x.dtype
    batch = x.shape[0] if x.ndim == 3 else None

    def tvec(t):
        return np.full(batch, t) if batch is not None else t

    def v(state, t):
        return guided_velocity(net, state, tvec(t), y, w)

    for i in range(n):
        t = i * h
        if cfg.method == "euler":
            x = x + h * v(x, t)
        elif cfg.method == "heun":
            k1 = v(x, t)
            pred = x + h * k1
            # last corrector lands exactly on t = 1
            k2 = v(pred, 1.0 if i == n - 1 else t + h)
            x = x + (h / 2) * (k1 + k2)
        else:
            tm = t + h / 2
            k1 = v(x, t)
            k2 = v(x + (h / 2) * k1, tm)
            k3 = v(x + (h / 2) * k2, tm)
            k4 = v(x + h * k3, 1.0 if i == n - 1 else t + h)
            x = x + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        x = np.asarray(x, dtype=dtype)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(f"non-finite state after step {i}")
    return x, plan["effective_nfe"]


def initial_noise(seed: int, index: int, shape) -> np.ndarray:
    return stream(seed, "x0", int(index)).standard_normal(shape).astype(T.default_dtype())


def sample_batch(net, request: SampleRequest, batch_size: int = 256,
                 subject_id: str = "s0") -> WindowDataset:
    cfg = net.cfg
    labels = np.asarray(request.labels, dtype=np.int64)
    if labels.size and (labels.min() < 1 or labels.max() > cfg.K):
        raise ValueError(f"labels must lie in [1, {cfg.K}]")
    out = np.empty((len(labels), cfg.C, cfg.L), dtype=np.float32)
    for lo in range(0, len(labels), batch_size):
        hi = min(lo + batch_size, len(labels))
        x0 = np.stack([initial_noise(request.seed, i, (cfg.C, cfg.L)) for i in range(lo, hi)])
        out[lo:hi], _ = integrate(net, x0, labels[lo:hi], request.solver)
    return WindowDataset(out, labels, np.zeros(len(labels), np.int64), subject_id, "synthetic", cfg.K)


def balanced_labels(K: int, n: int) -> list[int]:
    """n labels cycling through 1..K, so class counts differ by at most one."""
    return [i % K + 1 for i in range(n)]


def bench_throughput(net, cfg: SolverConfig, n_samples: int, seed: int = 0) -> dict:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    req = SampleRequest(balanced_labels(net.cfg.K, n_samples), seed, cfg)
    start = time.perf_counter()
    sample_batch(net, req, batch_size=n_samples)
    wall = (time.perf_counter() - start) * 1000.0
    plan = nfe_plan(cfg.method, cfg.nfe_budget, cfg.guidance_weight)
    return {"method": cfg.method, "nfe": plan["effective_nfe"], "w": cfg.guidance_weight,
            "samples_per_sec": n_samples / (wall / 1000.0), "wall_ms": wall}


def bench_json(result: dict) -> str:
    return json.dumps(result, sort_keys=True)
