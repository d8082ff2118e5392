"""Evaluation metrics over classifier feature spaces and predictions."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.stats import rankdata

from .classifier import require_clean
from .data import WindowDataset

log = logging.getLogger(__name__)

SOURCES = {"train": "real_train", "test": "real_test", "synthetic": "synthetic"}


class ExtractorMismatch(ValueError):
    pass


@dataclass
class FeatureMatrix:
    features: np.ndarray
    source: str
    fingerprint: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be (N, D)")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")

    def __len__(self):
        return self.features.shape[0]


def extract_features(classifier, ds: WindowDataset) -> FeatureMatrix:
    return FeatureMatrix(classifier.embed(ds.windows), SOURCES[ds.split], classifier.fingerprint())


def _same_extractor(*mats: FeatureMatrix) -> None:
    prints = {m.fingerprint for m in mats}
    if len(prints) > 1:
        raise ExtractorMismatch(f"feature matrices come from different extractors: {sorted(prints)}")


def _as_array(x) -> np.ndarray:
    return x.features if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float64)


def _check_mats(*xs):
    mats = [x for x in xs if isinstance(x, FeatureMatrix)]
    if mats:
        _same_extractor(*mats)
    return [_as_array(x) for x in xs]


# ---------------------------------------------------------------- FID


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    sa = _psd_sqrt(cov_a)
    inner = sa @ cov_b @ sa
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    scale = max(np.trace(inner), 0.0)
    if vals.min() < -1e-6 * scale:
        log.warning("covariance product has eigenvalue %.3g; clamped to 0", vals.min())
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = mu_a - mu_b
    value = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt
    return float(max(value, 0.0))


def fid(a, b) -> float:
    xa, xb = _check_mats(a, b)
    if len(xa) < 2 or len(xb) < 2:
        raise ValueError("fid needs at least 2 samples per side")
    cov_a = np.cov(xa, rowvar=False, bias=True).reshape(xa.shape[1], xa.shape[1])
    cov_b = np.cov(xb, rowvar=False, bias=True).reshape(xb.shape[1], xb.shape[1])
    return frechet_distance(xa.mean(0), cov_a, xb.mean(0), cov_b)


# ---------------------------------------------------------------- IS / CAS


def inception_score(probs, n_splits: int = 10) -> tuple[float, float]:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise ValueError("probs must be a non-empty (N, K) matrix")
    if np.any(p < 0) or np.any(np.abs(p.sum(1) - 1.0) > 1e-5):
        raise ValueError("every row must be a probability distribution")
    n_splits = max(1, min(n_splits, len(p)))
    usable = (len(p) // n_splits) * n_splits
    scores = []
    for part in np.split(p[:usable], n_splits):
        marginal = part.mean(0)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0)
        scores.append(math.exp(terms.sum(1).mean()))
    return float(np.mean(scores)), float(np.std(scores))


def cas(classifier, gen: WindowDataset) -> float:
    """Accuracy of a real-trained classifier on generated windows."""
    require_clean(classifier, "synthetic")
    if len(gen) == 0:
        raise ValueError("no generated samples")
    return float(np.mean(classifier.predict(gen.windows) == gen.labels))


# ---------------------------------------------------------------- neighbourhoods


def pairwise_distances(a: np.ndarray, b: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Euclidean distances from explicit differences (no Gram-matrix shortcut)."""
    out = np.empty((len(a), len(b)))
    for lo in range(0, len(a), chunk):
        d = a[lo:lo + chunk, None, :] - b[None, :, :]
        out[lo:lo + chunk] = np.sqrt(np.einsum("ijk,ijk->ij", d, d))
    return out


def knn_radii(x: np.ndarray, k: int) -> np.ndarray:
    """Distance from each point to its k-th nearest other point in the same set."""
    d = pairwise_distances(x, x)
    np.fill_diagonal(d, np.inf)
    return np.partition(d, k - 1, axis=1)[:, k - 1]


def prdc(real, fake, k: int = 5) -> tuple[float, float, float, float]:
    r, f = _check_mats(real, fake)
    if k < 1 or len(r) < k + 1 or len(f) < k + 1:
        raise ValueError(f"prdc needs k >= 1 and at least k+1={k + 1} points per side")
    real_r = knn_radii(r, k)
    fake_r = knn_radii(f, k)
    d = pairwise_distances(f, r)  # (fake, real)
    inside = d <= real_r[None, :]
    precision = inside.any(axis=1).mean()
    recall = (d <= fake_r[:, None]).any(axis=0).mean()
    density = inside.sum() / (k * len(f))
    coverage = (d.min(axis=0) <= real_r).mean()
    return float(precision), float(recall), float(density), float(coverage)


def knn_realism(fake, train, test) -> tuple[float, float, float]:
    f, tr, te = _check_mats(fake, train, test)
    if not (len(f) and len(tr) and len(te)):
        raise ValueError("knn_realism needs non-empty sets")
    r_train = -pairwise_distances(f, tr).min(axis=1).mean()
    r_test = -pairwise_distances(f, te).min(axis=1).mean()
    return float(r_train), float(r_test), float(r_train - r_test)


def prototype_concentration(fake, train, ratio_thresholds=(0.8, 0.6), top_m=(1, 10)) -> dict:
    f, tr = _check_mats(fake, train)
    if len(tr) < 2:
        raise ValueError("prototype ratios need at least two train points")
    if len(f) == 0:
        raise ValueError("no generated points")
    d = pairwise_distances(f, tr)
    nearest = d.argmin(axis=1)
    to_template = d[np.arange(len(f)), nearest]
    dt = pairwise_distances(tr, tr)
    np.fill_diagonal(dt, np.inf)
    own = dt.min(axis=1)[nearest]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(own > 0, to_template / own, np.where(to_template > 0, np.inf, 0.0))
    hits = np.bincount(nearest, minlength=len(tr))
    ranked = np.sort(hits)[::-1]
    out = {f"top{m}": float(ranked[:m].sum() / len(f)) for m in top_m}
    out["frac_r_lt"] = {str(t): float(np.mean(ratio < t)) for t in ratio_thresholds}
    out["median_c"] = float(np.median(hits[hits > 0] / len(f)))
    return out


# ---------------------------------------------------------------- tests & scores


def _signed_rank_setup(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.ndim != 1:
        raise ValueError("score vectors must be 1-D and equally long")
    d = d[d != 0]
    if len(d) == 0:
        raise ValueError("degenerate pairs: every difference is zero")
    if len(d) < 5:
        raise ValueError(f"need at least 5 non-zero differences, got {len(d)}")
    ranks = rankdata(np.abs(d))
    return d, ranks


def wilcoxon_exact_p(ranks: np.ndarray, w_plus: float) -> float:
    n = len(ranks)
    signs = ((np.arange(2 ** n)[:, None] >> np.arange(n)) & 1).astype(np.float64)
    dist = signs @ ranks
    tol = 1e-9
    lower = np.mean(dist <= w_plus + tol)
    upper = np.mean(dist >= w_plus - tol)
    return float(min(1.0, 2.0 * min(lower, upper)))


def wilcoxon_signed_rank(a, b, exact_max_n: int = 12) -> tuple[float, float]:
    """Paired two-sided test; returns (min(W+, W-), p)."""
    d, ranks = _signed_rank_setup(a, b)
    n = len(d)
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    stat = min(w_plus, w_minus)
    if n <= exact_max_n:
        return stat, wilcoxon_exact_p(ranks, w_plus)
    _, counts = np.unique(ranks, return_counts=True)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(counts ** 3 - counts) / 48.0
    z = (w_plus - mean) / math.sqrt(var)
    return stat, float(math.erfc(abs(z) / math.sqrt(2.0)))


def macro_scores(preds, labels, K: int) -> tuple[float, float, float]:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0 or preds.shape != labels.shape:
        raise ValueError("need equally long, non-empty prediction and label arrays")
    cm = np.zeros((K, K), dtype=np.int64)
    np.add.at(cm, (labels - 1, preds - 1), 1)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(1)
    predicted = cm.sum(0)
    recall = np.divide(tp, support, out=np.zeros(K), where=support > 0)
    precision = np.divide(tp, predicted, out=np.zeros(K), where=predicted > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(K), where=denom > 0)
    return float(tp.sum() / len(labels)), float(f1.mean()), float(recall.mean())


# ---------------------------------------------------------------- reports


@dataclass
class MetricReport:
    fid: float | None = None
    fid_anchor: float | None = None
    is_mean: float | None = None
    is_std: float | None = None
    cas: float | None = None
    precision: float | None = None
    recall: float | None = None
    density: float | None = None
    coverage: float | None = None
    realism_train: float | None = None
    realism_test: float | None = None
    traintest_gap: float | None = None
    proto_top1: float | None = None
    proto_top10: float | None = None
    proto_frac_r_lt: dict | None = None
    proto_median_c: float | None = None
    acc: float | None = None
    macro_f1: float | None = None
    macro_recall: float | None = None
    extractor: str | None = None
    meta: dict = field(default_factory=dict)

    def scores(self) -> dict:
        """Numeric metrics only, flattened (threshold dicts become ``name@t`` keys)."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None or f.name in ("extractor", "meta"):
                continue
            if isinstance(v, dict):
                out.update({f"{f.name}@{k}": x for k, x in v.items()})
            else:
                out[f.name] = v
        return out

    def validate(self) -> None:
        for k, v in self.scores().items():
            if not math.isfinite(v):
                raise ValueError(f"metric {k} is not finite")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None and v != {}}

    def to_json(self) -> str:
        self.validate()
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)


def report_csv(rows: list[dict]) -> str:
    """One CSV line per row; columns are the union of keys, in first-seen order."""
    cols: list[str] = []
    for row in rows:
        cols.extend(k for k in row if k not in cols)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    return buf.getvalue()
