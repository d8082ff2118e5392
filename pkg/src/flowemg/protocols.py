"""Evaluation protocols built from the generator, sampler, classifier and metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .classifier import (ClassifierConfig, ContaminationError, ConvClassifier, require_clean,
                         train_classifier)
from .data import (SynthConfig, WindowDataset, augment_baseline, concat_datasets, dataset_load,
                   prepare_subject, read_session_csv, synth_generate)
from .metrics import (MetricReport, cas, extract_features, fid, inception_score, knn_realism,
                      macro_scores, prdc, prototype_concentration)
from .model import ModelConfig
from .rng import stream
from .sampler import SampleRequest, SolverConfig, balanced_labels, sample_batch
from .train import TimeSampler, TrainConfig

PROTOCOLS = ("fidelity", "tstr", "augmentation", "scan_guidance", "scan_solver",
             "scan_time_sampling", "bench")
PAPER_GUIDANCE_GRID = (1.0, 1.25, 1.5, 2.0, 2.5)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- generators


class FlowGenerator:
    def __init__(self, net, solver: SolverConfig):
        self.net = net
        self.solver = solver
        self._last = None  # fidelity and TSTR ask for the same balanced set; sample it once

    def with_solver(self, solver: SolverConfig) -> "FlowGenerator":
        return FlowGenerator(self.net, solver)

    def generate(self, labels, seed: int, subject_id: str = "s0") -> WindowDataset:
        key = (np.asarray(labels, np.int64).tobytes(), seed, subject_id)
        if self._last is None or self._last[0] != key:
            ds = sample_batch(self.net, SampleRequest(list(labels), seed, self.solver),
                              subject_id=subject_id)
            self._last = (key, ds)
        return self._last[1]


class ReplayGenerator:
    """Hands back real training windows of the requested class (an oracle generator)."""

    def __init__(self, source: WindowDataset):
        self.source = source

    def generate(self, labels, seed: int, subject_id: str = "s0") -> WindowDataset:
        labels = np.asarray(labels, dtype=np.int64)
        rng = stream(seed, subject_id, "replay")
        out = np.empty((len(labels),) + self.source.shape, np.float32)
        for k in np.unique(labels):
            pool = np.flatnonzero(self.source.labels == k)
            want = np.flatnonzero(labels == k)
            order = np.concatenate([rng.permutation(pool) for _ in range(-(-len(want) // len(pool)))])
            out[want] = self.source.windows[order[:len(want)]]
        return WindowDataset(out, labels, np.zeros(len(labels)), subject_id, "synthetic", self.source.K)


class NoiseGenerator:
    """Gaussian noise windows; labels carry no information."""

    def __init__(self, C: int, L: int, K: int):
        self.C, self.L, self.K = C, L, K

    def generate(self, labels, seed: int, subject_id: str = "s0") -> WindowDataset:
        rng = stream(seed, subject_id, "noise")
        x = rng.standard_normal((len(labels), self.C, self.L)).astype(np.float32)
        return WindowDataset(x, np.asarray(labels), np.zeros(len(labels)), subject_id, "synthetic", self.K)


# ---------------------------------------------------------------- results


@dataclass
class ProtocolConfig:
    downstream: ClassifierConfig = field(
        default_factory=lambda: ClassifierConfig.for_purpose("downstream"))
    extractor: ClassifierConfig = field(
        default_factory=lambda: ClassifierConfig.for_purpose("feature_extractor"))
    n_fidelity: int = 5000
    prdc_k: int = 5
    ratio_thresholds: tuple = (0.8, 0.6)
    top_m: tuple = (1, 10)


@dataclass
class SubjectResult:
    subject_id: str
    seed: int
    protocol: str
    report: MetricReport
    point: dict = field(default_factory=dict)  # scan coordinates, if any

    def to_dict(self) -> dict:
        out = {"subject_id": self.subject_id, "seed": self.seed, "protocol": self.protocol,
               "report": self.report.to_dict()}
        if self.point:
            out["point"] = self.point
        return out

    def to_json(self) -> str:
        self.report.validate()
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def _classifier_for(cfg: ClassifierConfig, seed: int) -> ClassifierConfig:
    return replace(cfg, seed=seed)


def _downstream_report(clf, real_test: WindowDataset, meta: dict) -> MetricReport:
    acc, f1, rec = macro_scores(clf.predict(real_test.windows), real_test.labels, real_test.K)
    meta = dict(meta, classifier_width=clf.cfg.width, classifier=clf.provenance.counts)
    return MetricReport(acc=acc, macro_f1=f1, macro_recall=rec, meta=meta)


def run_tstr(generator, real_train: WindowDataset, real_test: WindowDataset,
             cfg: ProtocolConfig, seed: int = 0) -> SubjectResult:
    labels = balanced_labels(real_train.K, len(real_train))
    synth = generator.generate(labels, seed, real_train.subject_id)
    if synth.split != "synthetic":
        raise ContaminationError("TSTR generator must emit synthetic-tagged windows")
    clf = train_classifier(_classifier_for(cfg.downstream, seed), synth, K=real_train.K)
    require_clean(clf, "train")
    report = _downstream_report(clf, real_test, {"n_synthetic": len(synth)})
    return SubjectResult(real_train.subject_id, seed, "tstr", report)


def run_augmentation(generator, real_train: WindowDataset, real_test: WindowDataset,
                     cfg: ProtocolConfig, seed: int = 0, volume: int | None = None) -> SubjectResult:
    """Train on real + synthetic; ``generator`` may be a baseline name such as ``"replicate"``.

    The synthetic volume defaults to ``len(real_train)``, so the total is twice the real set.
    """
    volume = len(real_train) if volume is None else volume
    if generator is None or volume == 0:
        parts, method = [real_train], "none"
    elif isinstance(generator, str):
        aug = augment_baseline(real_train, generator, seed=seed)
        extra = aug.subset(np.arange(len(real_train), len(aug)))
        if volume != len(real_train):
            raise ValueError("classical baselines always add one copy of the training set")
        parts, method = [real_train, replace(extra, split="train")], generator
    else:
        synth = generator.generate(balanced_labels(real_train.K, volume), seed, real_train.subject_id)
        parts, method = [real_train, synth], "generator"
    clf = train_classifier(_classifier_for(cfg.downstream, seed), parts, K=real_train.K)
    total = sum(len(p) for p in parts)
    report = _downstream_report(clf, real_test, {"augmentation": method, "synthetic_volume": volume
                                                 if method != "none" else 0, "n_train_total": total})
    return SubjectResult(real_train.subject_id, seed, "augmentation", report)


def train_extractor(real_train: WindowDataset, cfg: ProtocolConfig, seed: int = 0) -> ConvClassifier:
    return train_classifier(_classifier_for(cfg.extractor, seed), real_train)


def check_extractor(extractor) -> None:
    counts = extractor.provenance.counts
    if set(counts) != {"train"}:
        raise ContaminationError(f"feature extractor must be trained on real train only, saw {counts}")


def run_fidelity(generator, real_train: WindowDataset, real_test: WindowDataset,
                 extractor: ConvClassifier, cfg: ProtocolConfig, seed: int = 0) -> SubjectResult:
    check_extractor(extractor)
    n = min(5000, cfg.n_fidelity)
    synth = generator.generate(balanced_labels(real_train.K, n), seed, real_train.subject_id)
    f_train = extract_features(extractor, real_train)
    f_test = extract_features(extractor, real_test)
    f_syn = extract_features(extractor, synth)
    is_mean, is_std = inception_score(extractor.predict_proba(synth.windows))
    p, r, d, c = prdc(f_train, f_syn, cfg.prdc_k)
    rt, rs, gap = knn_realism(f_syn, f_train, f_test)
    proto = prototype_concentration(f_syn, f_train, cfg.ratio_thresholds, cfg.top_m)
    report = MetricReport(
        fid=fid(f_train, f_syn), fid_anchor=fid(f_train, f_test), is_mean=is_mean, is_std=is_std,
        cas=cas(extractor, synth), precision=p, recall=r, density=d, coverage=c,
        realism_train=rt, realism_test=rs, traintest_gap=gap,
        proto_top1=proto.get("top1"), proto_top10=proto.get("top10"),
        proto_frac_r_lt=proto["frac_r_lt"], proto_median_c=proto["median_c"],
        extractor=extractor.fingerprint(),
        meta={"n_synthetic": n, "fid_reference": "real_train", "prdc_k": cfg.prdc_k})
    return SubjectResult(real_train.subject_id, seed, "fidelity", report)


def merge_reports(*reports: MetricReport) -> MetricReport:
    out = MetricReport()
    meta = {}
    for rep in reports:
        for k, v in rep.to_dict().items():
            if k == "meta":
                meta.update(v)
            else:
                setattr(out, k, v)
    out.meta = meta
    return out


# ---------------------------------------------------------------- scans


def run_scan(kind: str, grid, generator, real_train: WindowDataset, real_test: WindowDataset,
             extractor: ConvClassifier, cfg: ProtocolConfig, seed: int = 0,
             include_tstr: bool = True) -> list[SubjectResult]:
    """One row per grid point.

    guidance: grid of weights, ``generator`` a FlowGenerator reused for every weight.
    solver_nfe: grid of (method, budget) pairs.
    time_sampling: grid of names, ``generator`` a mapping name -> FlowGenerator.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("scan grid is empty")
    rows = []
    for g in grid:
        if kind == "guidance":
            gen = generator.with_solver(replace(generator.solver, guidance_weight=float(g)))
            point = {"w": float(g)}
        elif kind == "solver_nfe":
            method, budget = g
            gen = generator.with_solver(replace(generator.solver, method=method, nfe_budget=int(budget)))
            point = {"method": method, "nfe": int(budget)}
        elif kind == "time_sampling":
            gen = generator[g]
            point = {"time_sampling": g}
        else:
            raise ValueError(f"unknown scan kind {kind!r}")
        fidel = run_fidelity(gen, real_train, real_test, extractor, cfg, seed).report
        reps = [fidel]
        if include_tstr:
            reps.append(run_tstr(gen, real_train, real_test, cfg, seed).report)
        rows.append(SubjectResult(real_train.subject_id, seed, f"scan_{kind}", merge_reports(*reps), point))
    return rows


def trend_summary(xs, rows: list[SubjectResult]) -> dict[str, int]:
    """Sign of the Spearman correlation between each metric and the grid value."""
    out = {}
    keys = set.intersection(*(set(r.report.scores()) for r in rows))
    for key in sorted(keys):
        ys = [r.report.scores()[key] for r in rows]
        if len(set(ys)) < 2 or len(set(xs)) < 2:
            out[key] = 0
            continue
        rho = spearmanr(xs, ys).statistic
        out[key] = 0 if not np.isfinite(rho) or rho == 0 else int(np.sign(rho))
    return out


def aggregate_subjects(results: list[SubjectResult]) -> dict[str, tuple[float, float]]:
    """Unweighted mean and sample std per metric; metrics missing from any row are dropped."""
    if not results:
        raise ValueError("no results to aggregate")
    tables = [r.report.scores() for r in results]
    keys = set.intersection(*(set(t) for t in tables))
    out = {}
    for key in sorted(keys):
        vals = np.array(sorted(t[key] for t in tables))
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out[key] = (float(vals.mean()), std)
    return out


# ---------------------------------------------------------------- experiment config


@dataclass
class ExperimentConfig:
    data: dict
    model: ModelConfig
    train: TrainConfig
    solver: SolverConfig
    classifier: ProtocolConfig
    protocol: str
    options: dict
    seeds: list[int]
    out: str

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        allowed = {"data", "model", "train", "solver", "classifier", "protocol", "seeds", "out"}
        extra = set(d) - allowed
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        try:
            data = dict(d.get("data", {"synth": {}}))
            sources = [k for k in ("synth", "path", "train_path") if k in data]
            if len(sources) != 1:
                raise ConfigError("data must name exactly one source: synth, path, or train_path/test_path")
            if "train_path" in data and "test_path" not in data:
                raise ConfigError("train_path requires test_path")
            proto = d.get("protocol", "fidelity")
            options = {}
            if isinstance(proto, dict):
                options = {k: v for k, v in proto.items() if k != "name"}
                proto = proto.get("name")
            if proto not in PROTOCOLS:
                raise ConfigError(f"protocol must be one of {PROTOCOLS}")
            seeds = list(d.get("seeds", [0]))
            if not seeds:
                raise ConfigError("seeds must be non-empty")
            cls_cfg = d.get("classifier", {})
            unknown = set(cls_cfg) - {"feature_extractor", "downstream", "n_fidelity", "prdc_k"}
            if unknown:
                raise ConfigError(f"unknown classifier keys: {sorted(unknown)}")
            pcfg = ProtocolConfig(
                downstream=ClassifierConfig.for_purpose("downstream", **cls_cfg.get("downstream", {})),
                extractor=ClassifierConfig.for_purpose("feature_extractor",
                                                       **cls_cfg.get("feature_extractor", {})),
                n_fidelity=int(cls_cfg.get("n_fidelity", 5000)),
                prdc_k=int(cls_cfg.get("prdc_k", 5)))
            return cls(data, ModelConfig(**d.get("model", {})), TrainConfig(**d.get("train", {})),
                       SolverConfig(**d.get("solver", {})), pcfg, proto, options,
                       [int(s) for s in seeds], str(d.get("out", "out")))
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)


def load_subjects(data: dict) -> dict[str, tuple[WindowDataset, WindowDataset]]:
    """Return {subject_id: (train, test)} z-scored with train statistics."""
    if "synth" in data:
        sessions = synth_generate(SynthConfig(**data["synth"]), int(data.get("seed", 0)))
    elif "path" in data:
        sessions = [read_session_csv(data["path"], data.get("subject", "s0"), data.get("sampling_rate"))]
    else:
        train, test = dataset_load(data["train_path"]), dataset_load(data["test_path"])
        return {train.subject_id: (train, test)}
    win = data.get("win_ms", 200.0)
    stride = data.get("stride_ms", 50.0)
    out = {}
    for s in sessions:
        tr, te, _ = prepare_subject(s, win, stride, data.get("train_trials", (1, 3, 4, 6)),
                                    data.get("test_trials", (2, 5)))
        out[s.subject_id] = (tr, te)
    return out
