"""Command-line entry point: ``flowemg <subcommand> --config c.json [--seed N] [--out DIR] [--subject ID]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import atomic_write_bytes
from .data import dataset_load, dataset_save
from .metrics import report_csv
from .protocols import (PAPER_GUIDANCE_GRID, ConfigError, ExperimentConfig, FlowGenerator,
                        aggregate_subjects, load_subjects, run_augmentation, run_fidelity, run_scan,
                        run_tstr, train_extractor, trend_summary)
from .sampler import SampleRequest, balanced_labels, bench_throughput, sample_batch
from .train import TimeSampler, load_generator, save_generator, train_generator, write_loss_csv

log = logging.getLogger("flowemg")

COMMANDS = ("synth-data", "gen-train", "sample", "eval", "tstr", "augment", "scan", "bench")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flowemg", description="Conditional flow-matching toolkit for EMG windows")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON experiment config")
        s.add_argument("--seed", type=int, help="run a single seed instead of the config list")
        s.add_argument("--out", help="output directory override")
        s.add_argument("--subject", help="restrict to one subject id")
    return p


def _write_json(path: Path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, sort_keys=True, indent=1) + "\n").encode("utf-8"))


class Runner:
    def __init__(self, cfg: ExperimentConfig, subject: str | None):
        self.cfg = cfg
        self.out = Path(cfg.out)
        subjects = load_subjects(cfg.data)
        if subject is not None:
            if subject not in subjects:
                raise ConfigError(f"unknown subject {subject!r}; have {sorted(subjects)}")
            subjects = {subject: subjects[subject]}
        self.subjects = subjects
        self._extractors = {}

    def run_dir(self, sid: str, seed: int) -> Path:
        return self.out / sid / f"seed{seed}"

    def generator(self, sid: str, seed: int, time_sampling: str | None = None) -> FlowGenerator:
        """Train (or reuse) the generator for (subject, seed)."""
        tcfg = replace(self.cfg.train, seed=seed)
        name = "generator.fmck"
        if time_sampling is not None:
            tcfg = replace(tcfg, time_sampler=TimeSampler(time_sampling))
            name = f"generator_{time_sampling}.fmck"
        path = self.run_dir(sid, seed) / name
        if not path.exists():
            train, _ = self.subjects[sid]
            model_cfg = replace(self.cfg.model, C=train.shape[0], L=train.shape[1], K=train.K)
            result = train_generator(model_cfg, tcfg, train)
            save_generator(path, result, tcfg)
            write_loss_csv(path.with_suffix(".loss.csv"), result)
        return FlowGenerator(load_generator(path), self.cfg.solver)

    def extractor(self, sid: str, seed: int):
        key = (sid, seed)
        if key not in self._extractors:
            self._extractors[key] = train_extractor(self.subjects[sid][0], self.cfg.classifier, seed)
        return self._extractors[key]

    # ------------------------------------------------------------ commands

    def synth_data(self, seed):
        for sid, (train, test) in self.subjects.items():
            dataset_save(train, self.out / sid / "train.emgw")
            dataset_save(test, self.out / sid / "test.emgw")

    def gen_train(self, seed):
        for sid in self.subjects:
            self.generator(sid, seed)

    def sample(self, seed):
        n = int(self.cfg.options.get("n_samples", 0))
        for sid, (train, _) in self.subjects.items():
            gen = self.generator(sid, seed)
            ds = gen.generate(balanced_labels(train.K, n or len(train)), seed, sid)
            dataset_save(ds, self.run_dir(sid, seed) / "synthetic.emgw")

    def _protocol(self, seed, name, fn):
        results = []
        for sid, (train, test) in self.subjects.items():
            res = fn(sid, train, test)
            _write_json(self.run_dir(sid, seed) / f"{name}.json", res.to_dict())
            results.append(res)
        return results

    def eval(self, seed):
        return self._protocol(seed, "fidelity", lambda sid, tr, te: run_fidelity(
            self.generator(sid, seed), tr, te, self.extractor(sid, seed), self.cfg.classifier, seed))

    def tstr(self, seed):
        return self._protocol(seed, "tstr", lambda sid, tr, te: run_tstr(
            self.generator(sid, seed), tr, te, self.cfg.classifier, seed))

    def augment(self, seed):
        method = self.cfg.options.get("method", "generator")

        def go(sid, tr, te):
            gen = self.generator(sid, seed) if method == "generator" else method
            return run_augmentation(gen, tr, te, self.cfg.classifier, seed)

        return self._protocol(seed, f"augment_{method}", go)

    def scan(self, seed):
        proto = self.cfg.protocol
        opts = self.cfg.options
        rows_all = []
        for sid, (train, test) in self.subjects.items():
            ext = self.extractor(sid, seed)
            if proto == "scan_guidance":
                grid = opts.get("grid", list(PAPER_GUIDANCE_GRID))
                rows = run_scan("guidance", grid, self.generator(sid, seed), train, test, ext,
                                self.cfg.classifier, seed)
                xs = [float(g) for g in grid]
            elif proto == "scan_solver":
                methods = opts.get("methods", ["euler", "heun", "rk4"])
                budgets = opts.get("budgets", [4, 8, 16, 32])
                grid = [(m, b) for m in methods for b in budgets]
                rows = run_scan("solver_nfe", grid, self.generator(sid, seed), train, test, ext,
                                self.cfg.classifier, seed, include_tstr=opts.get("tstr", True))
                xs = None
            elif proto == "scan_time_sampling":
                grid = ["uniform", "logit_normal"]
                gens = {g: self.generator(sid, seed, g) for g in grid}
                rows = run_scan("time_sampling", grid, gens, train, test, ext, self.cfg.classifier, seed)
                xs = [0.0, 1.0]
            else:
                raise ConfigError(f"scan needs a scan_* protocol, got {proto!r}")
            table = [dict(r.point, subject_id=sid, seed=seed, **r.report.scores()) for r in rows]
            d = self.run_dir(sid, seed)
            atomic_write_bytes(d / f"{proto}.csv", report_csv(table).encode("utf-8"))
            summary = {"rows": [r.to_dict() for r in rows]}
            if xs is not None:
                summary["trend"] = trend_summary(xs, rows)
            _write_json(d / f"{proto}.json", summary)
            rows_all.extend(rows)
        return rows_all

    def bench(self, seed):
        n = int(self.cfg.options.get("n_samples", 64))
        for sid in self.subjects:
            gen = self.generator(sid, seed)
            res = bench_throughput(gen.net, self.cfg.solver, n, seed)
            _write_json(self.run_dir(sid, seed) / "bench.json", res)
            print(json.dumps(res, sort_keys=True))


def cli_main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.out:
            cfg.out = args.out
        if args.seed is not None:
            cfg.seeds = [args.seed]
        runner = Runner(cfg, args.subject)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    method = getattr(runner, args.command.replace("-", "_"))
    try:
        collected = []
        for seed in cfg.seeds:
            got = method(seed)
            if got:
                collected.extend(got)
        if collected and args.command in ("eval", "tstr", "augment"):
            agg = aggregate_subjects(collected)
            _write_json(Path(cfg.out) / f"aggregate_{args.command}.json",
                        {k: {"mean": m, "std": s} for k, (m, s) in agg.items()})
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.error("%s failed: %s", args.command, exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
