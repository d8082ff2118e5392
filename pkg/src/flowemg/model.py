"""Conditional velocity network v(x_t, t, y) on a compact 1-D U-Net.

Class labels are 1..K; label 0 is the null (dropped) condition and maps to the
last row of the class table. That row is a fixed zero vector and the K class rows
start at zero too, so a row that never receives a gradient stays equal to null.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .rng import stream
from .tensor import Tensor

NULL = 0
COND_MODES = ("adagn", "add", "concat")


@dataclass
class ModelConfig:
    C: int = 4
    L: int = 400
    K: int = 6
    base_width: int = 16
    depth: int = 2
    time_embed_dim: int = 128
    embed_dim: int = 64
    cond_mode: str = "adagn"
    groups: int = 8
    time_scale: float = 1000.0
    gn_eps: float = 1e-5

    def __post_init__(self):
        if self.cond_mode not in COND_MODES:
            raise ValueError(f"cond_mode must be one of {COND_MODES}")
        if self.L % (2 ** self.depth):
            raise ValueError(f"L={self.L} not divisible by 2**depth={2 ** self.depth}")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        for w in self.widths():
            if w % self.groups:
                raise ValueError(f"width {w} not divisible by groups={self.groups}")

    def widths(self) -> list[int]:
        return [self.base_width * (1 if i == 0 else 2) for i in range(self.depth + 1)]

    def to_header(self) -> dict[str, str]:
        return {k: str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_header(cls, header: dict[str, str]) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name in header:
                raw = header[f.name]
                kw[f.name] = raw if f.type == "str" else (float(raw) if f.type == "float" else int(raw))
        return cls(**kw)


def sinusoidal(t: np.ndarray, dim: int, scale: float = 1000.0) -> np.ndarray:
    """Sin/cos features of ``scale * t`` with frequencies 10^(-4 i / (dim/2))."""
    half = dim // 2
    freqs = 10.0 ** (-4.0 * np.arange(half) / half)
    args = scale * np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class VelocityNet:
    """Parameters live in ``self.params`` (name -> Tensor), in creation order."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.calls = 0
        self._rng = stream(seed, "velocity-init")
        self._build()
        self._rng = None

    # ---------------------------------------------------------------- building

    def _param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _uniform(self, name, shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return self._param(name, self._rng.uniform(-bound, bound, size=shape))

    def _conv(self, name, cin, cout, k):
        self._uniform(f"{name}.w", (cout, cin, k), cin * k)
        self._param(f"{name}.b", np.zeros(cout))

    def _dense(self, name, din, dout, zero=False):
        if zero:
            self._param(f"{name}.w", np.zeros((din, dout)))
        else:
            self._uniform(f"{name}.w", (din, dout), din)
        self._param(f"{name}.b", np.zeros(dout))

    def _norm(self, name, ch):
        self._param(f"{name}.g", np.ones(ch))
        self._param(f"{name}.beta", np.zeros(ch))
        if self.cfg.cond_mode == "adagn":
            self._dense(f"{name}.mod", self.cfg.embed_dim, 2 * ch, zero=True)

    def _resblock(self, name, cin, cout):
        self._norm(f"{name}.n1", cin)
        self._conv(f"{name}.c1", cin, cout, 3)
        self._norm(f"{name}.n2", cout)
        self._conv(f"{name}.c2", cout, cout, 3)
        if cin != cout:
            self._conv(f"{name}.skip", cin, cout, 1)

    def _build(self):
        cfg = self.cfg
        E = cfg.embed_dim
        widths = cfg.widths()
        self._dense("temb.l1", cfg.time_embed_dim, E)
        self._dense("temb.l2", E, E)
        self._param("class_table", np.zeros((cfg.K, E)))
        stem_in = cfg.C + (E if cfg.cond_mode == "concat" else 0)
        self._conv("stem", stem_in, widths[0], 3)
        if cfg.cond_mode == "add":
            self._dense("add_proj", E, widths[0])
        for i in range(cfg.depth):
            self._resblock(f"enc{i}", widths[i], widths[i])
            self._conv(f"down{i}", widths[i], widths[i + 1], 3)
        self._resblock("mid", widths[-1], widths[-1])
        for i in reversed(range(cfg.depth)):
            self._resblock(f"dec{i}", widths[i + 1] + widths[i], widths[i])
        h = widths[0]
        self._norm("out_norm", h)
        self._conv("out", h, cfg.C, 3)

    # ---------------------------------------------------------------- forward

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, t in self.params.items():
            if state[k].shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}")
            t.data = np.array(state[k], dtype=t.data.dtype)

    def __call__(self, x, t, y):
        return velocity_forward(self, x, t, y)


def condition_embed(net: VelocityNet, t, y) -> Tensor:
    """Time features through a small MLP plus the class-table row (NULL -> row K).

    ``t`` is a scalar or (N,) array in [0, 1]; ``y`` is a label, ``None`` for
    the null condition, or an (N,) integer array with 0 meaning null.
    """
    cfg = net.cfg
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    rows = _label_rows(y, cfg.K, len(t))
    p = net.params
    feats = Tensor(sinusoidal(t, cfg.time_embed_dim, cfg.time_scale))
    h = T.silu(T.linear(feats, p["temb.l1.w"], p["temb.l1.b"]))
    h = T.linear(h, p["temb.l2.w"], p["temb.l2.b"])
    null = Tensor(np.zeros((1, cfg.embed_dim)))
    table = T.concat([p["class_table"], null], axis=0)
    # rows start at zero; the sqrt(E) factor lets them grow at a useful rate under Adam
    return T.add(h, T.scale(T.take_rows(table, rows), math.sqrt(cfg.embed_dim)))


def _label_rows(y, K: int, n: int) -> np.ndarray:
    if y is None:
        labels = np.zeros(n, dtype=np.int64)
    else:
        labels = np.asarray(y, dtype=np.int64)
        if labels.ndim == 0:
            labels = np.full(n, int(labels))
    if labels.shape != (n,):
        raise ValueError("one label per sample required")
    if np.any(labels < 0) or np.any(labels > K):
        raise ValueError(f"labels must be in [1, {K}] or NULL")
    # label k -> row k-1, NULL (0) -> row K
    return np.where(labels == NULL, K, labels - 1)


def adagn_modulate(h: Tensor, emb: Tensor, mod_w: Tensor, mod_b: Tensor) -> Tensor:
    """``(1 + gamma) * h + beta`` with (gamma, beta) projected from ``emb``.

    ``h`` is the already-normalized (N, C', L') feature map.
    """
    ch = h.shape[1]
    gb = T.linear(T.silu(emb), mod_w, mod_b)
    gb = T.reshape(gb, (gb.shape[0], 2 * ch, 1))
    gamma = _slice_channels(gb, 0, ch)
    beta = _slice_channels(gb, ch, 2 * ch)
    return T.add(T.mul(h, T.add(gamma, 1.0)), beta)


def _slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, lo:hi] = g
        return (full,)

    return T._make(x.data[:, lo:hi], (x,), bw)


def _norm_site(net: VelocityNet, name: str, h: Tensor, emb: Tensor) -> Tensor:
    p = net.params
    out = T.group_norm(h, net.cfg.groups, p[f"{name}.g"], p[f"{name}.beta"], net.cfg.gn_eps)
    if net.cfg.cond_mode == "adagn":
        out = adagn_modulate(out, emb, p[f"{name}.mod.w"], p[f"{name}.mod.b"])
    return out


def _conv(net, name, h, stride=1):
    p = net.params
    w = p[f"{name}.w"]
    return T.conv1d(h, w, p[f"{name}.b"], stride=stride, pad=w.shape[2] // 2)


def _resblock(net, name, x, emb):
    h = _conv(net, f"{name}.c1", T.silu(_norm_site(net, f"{name}.n1", x, emb)))
    h = _conv(net, f"{name}.c2", T.silu(_norm_site(net, f"{name}.n2", h, emb)))
    skip = _conv(net, f"{name}.skip", x) if f"{name}.skip.w" in net.params else x
    return T.add(h, skip)


def velocity_forward(net: VelocityNet, x_t, t, y) -> Tensor:
    """Predict the velocity field; output has the shape of ``x_t``.

    ``x_t`` is (C, L) or (N, C, L); ``t`` a scalar or (N,) array; ``y`` as in
    :func:`condition_embed`.
    """
    cfg = net.cfg
    x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    unbatched = x.ndim == 2
    if unbatched:
        x = T.reshape(x, (1,) + x.shape)
    n = x.shape[0]
    if x.shape[1:] != (cfg.C, cfg.L):
        raise ValueError(f"expected windows of shape {(cfg.C, cfg.L)}, got {x.shape[1:]}")
    t_arr = np.asarray(t, dtype=np.float64)
    if t_arr.ndim == 0:
        t_arr = np.full(n, float(t_arr))
    net.calls += 1
    emb = condition_embed(net, t_arr, y)
    p = net.params
    if cfg.cond_mode == "concat":
        x = T.concat([x, T.expand_time(emb, cfg.L)], axis=1)
    h = _conv(net, "stem", x)
    if cfg.cond_mode == "add":
        proj = T.linear(emb, p["add_proj.w"], p["add_proj.b"])
        h = T.add(h, T.reshape(proj, proj.shape + (1,)))
    skips = []
    for i in range(cfg.depth):
        h = _resblock(net, f"enc{i}", h, emb)
        skips.append(h)
        h = _conv(net, f"down{i}", h, stride=2)
    h = _resblock(net, "mid", h, emb)
    for i in reversed(range(cfg.depth)):
        h = T.upsample_nearest(h, 2)
        h = T.concat([h, skips[i]], axis=1)
        h = _resblock(net, f"dec{i}", h, emb)
    h = T.silu(_norm_site(net, "out_norm", h, emb))
    out = _conv(net, "out", h)
    if unbatched:
        out = T.reshape(out, out.shape[1:])
    return out
