"""Compact 1-D convolutional classifier, used both as the feature extractor for
fidelity metrics and as the downstream model in TSTR / augmentation runs."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import WindowDataset
from .optim import OptimState, adam_step, cosine_lr, warmup_cosine_lr
from .rng import stream
from .tensor import Tensor

PURPOSES = ("feature_extractor", "downstream")


class ContaminationError(RuntimeError):
    """A classifier saw data its protocol forbids."""


@dataclass
class ClassifierConfig:
    purpose: str = "downstream"
    epochs: int = 100
    lr: float = 1e-3
    weight_decay: float = 3e-4
    batch_size: int = 256
    smoothing: float = 0.0
    warmup_epochs: int = 0
    width: int = 16
    feature_dim: int = 64
    groups: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.purpose not in PURPOSES:
            raise ValueError(f"purpose must be one of {PURPOSES}")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError("smoothing must lie in [0, 1)")

    @classmethod
    def for_purpose(cls, purpose: str, **overrides) -> "ClassifierConfig":
        if purpose == "feature_extractor":
            base = dict(epochs=75, lr=1e-3, weight_decay=0.0, smoothing=0.05, warmup_epochs=5)
        else:
            base = dict(epochs=100, lr=1e-3, weight_decay=3e-4, batch_size=256)
        base.update(overrides)
        return cls(purpose=purpose, **base)


@dataclass
class Provenance:
    """What a classifier was trained on: window counts per split tag plus a content hash."""
    counts: dict[str, int] = field(default_factory=dict)
    data_hash: str = ""

    @classmethod
    def of(cls, ds: WindowDataset | list[WindowDataset]) -> "Provenance":
        parts = ds if isinstance(ds, list) else [ds]
        counts: dict[str, int] = {}
        h = hashlib.sha256()
        for p in parts:
            counts[p.split] = counts.get(p.split, 0) + len(p)
            h.update(p.windows.tobytes())
            h.update(p.labels.tobytes())
        return cls(counts, h.hexdigest()[:16])

    def real_train_windows(self) -> int:
        return self.counts.get("train", 0)


class ConvClassifier:
    def __init__(self, C: int, L: int, K: int, cfg: ClassifierConfig):
        self.C, self.L, self.K, self.cfg = C, L, K, cfg
        self.params: dict[str, Tensor] = {}
        self.provenance = Provenance()
        rng = stream(cfg.seed, "classifier-init", C, L, K)
        w = cfg.width
        chans = [(C, w, 7), (w, 2 * w, 5), (2 * w, 2 * w, 3)]
        for i, (cin, cout, k) in enumerate(chans):
            bound = 1.0 / np.sqrt(cin * k)
            self._p(f"conv{i}.w", rng.uniform(-bound, bound, (cout, cin, k)))
            self._p(f"conv{i}.b", np.zeros(cout))
            self._p(f"gn{i}.g", np.ones(cout))
            self._p(f"gn{i}.b", np.zeros(cout))
        d = 2 * w
        self._p("feat.w", rng.uniform(-1, 1, (d, cfg.feature_dim)) / np.sqrt(d))
        self._p("feat.b", np.zeros(cfg.feature_dim))
        self._p("head.w", rng.uniform(-1, 1, (cfg.feature_dim, K)) / np.sqrt(cfg.feature_dim))
        self._p("head.b", np.zeros(K))

    def _p(self, name, value):
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def features(self, x) -> Tensor:
        p = self.params
        h = x if isinstance(x, Tensor) else Tensor(x)
        for i in range(3):
            w = p[f"conv{i}.w"]
            h = T.conv1d(h, w, p[f"conv{i}.b"], stride=2, pad=w.shape[2] // 2)
            h = T.silu(T.group_norm(h, self.cfg.groups, p[f"gn{i}.g"], p[f"gn{i}.b"]))
        h = T.reduce_mean(h, axis=2)
        return T.silu(T.linear(h, p["feat.w"], p["feat.b"]))

    def logits(self, x) -> Tensor:
        return T.linear(self.features(x), self.params["head.w"], self.params["head.b"])

    def _batched(self, windows: np.ndarray, fn, batch: int = 512) -> np.ndarray:
        if windows.shape[1:] != (self.C, self.L):
            raise ValueError(f"expected windows of shape {(self.C, self.L)}, got {windows.shape[1:]}")
        outs = [fn(windows[i:i + batch]).data for i in range(0, len(windows), batch)]
        if not outs:
            return np.zeros((0, self.K), np.float32)
        return np.concatenate(outs)

    def predict_proba(self, windows: np.ndarray) -> np.ndarray:
        logits = self._batched(windows, self.logits).astype(np.float64)
        return np.exp(T.log_softmax(logits))

    def predict(self, windows: np.ndarray) -> np.ndarray:
        """Labels in 1..K."""
        return self.predict_proba(windows).argmax(axis=1) + 1

    def embed(self, windows: np.ndarray) -> np.ndarray:
        return self._batched(windows, self.features)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()[:16]


def train_classifier(cfg: ClassifierConfig, train_set: WindowDataset | list[WindowDataset],
                     K: int | None = None) -> ConvClassifier:
    parts = train_set if isinstance(train_set, list) else [train_set]
    parts = [p for p in parts if len(p)]
    if not parts:
        raise ValueError("training set is empty")
    x = np.concatenate([p.windows for p in parts])
    y = np.concatenate([p.labels for p in parts])
    K = K or max(p.K for p in parts)
    present = np.unique(y)
    if present.min() < 1 or present.max() > K or len(present) != K:
        raise ValueError(f"labels must cover 1..{K} without gaps, got {present.tolist()}")
    C, L = x.shape[1:]
    model = ConvClassifier(C, L, K, cfg)
    model.provenance = Provenance.of(parts)
    params = model.parameters()
    state = OptimState.for_params(params, cfg.weight_decay)
    rng = stream(cfg.seed, "classifier-train", model.provenance.data_hash)
    n = len(y)
    per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * per_epoch
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            if cfg.warmup_epochs:
                lr = warmup_cosine_lr(cfg.lr, step, total, cfg.warmup_epochs * per_epoch)
            else:
                lr = cosine_lr(cfg.lr, step, total)
            with T.Tape() as tape:
                loss = T.softmax_xent(model.logits(x[idx]), y[idx] - 1, cfg.smoothing)
                grads = T.backward(loss, tape)
            adam_step(params, [grads.get(p) for p in params], state, lr)
            step += 1
    return model


def require_clean(model: ConvClassifier, forbid: str) -> None:
    """Contamination guard: ``forbid`` is the split tag the model must not have seen."""
    seen = model.provenance.counts.get(forbid, 0)
    if seen:
        raise ContaminationError(f"classifier was trained on {seen} '{forbid}' windows")
