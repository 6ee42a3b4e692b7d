"""``energykd`` command line: data generation, teacher pretraining, scoring,
partitioning, augmentation, distillation, evaluation, full pipeline and r sweeps.

Run directory layout (fixed names)::

    config.txt              fully resolved config, ``key = value`` per line
    train.ekds, test.ekds   datasets (unless external paths are configured)
    data_params.txt         generation parameters as ``# key=value``
    teacher.ekdm            teacher checkpoint
    teacher_logits.ekdl     teacher logits over the training set
    energies.csv            sample_id,energy,rank
    energy_manifest.csv     per-sample bucket and temperature
    heda.ekds               originals + augmented samples (augment != none)
    heda_provenance.csv     provenance of the augmented samples
    student.ekdm            distilled student
    metrics.jsonl           one JSON object per record
    bucket_confidence.csv   teacher confidence statistics per energy bucket
    correlation_disparity.csv
    FAILED                  present only if a stage failed

Exit codes: 0 success, 2 config/validation error, 3 runtime/training failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import augment, data, energy, models, report
from .kdloss import PolicyMode, TemperaturePolicy

log = logging.getLogger("energykd")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclasses.dataclass
class RunConfig:
    run_dir: str = ""
    name: str = "run"
    # data
    kind: str = "blobs"
    classes: int = 6
    per_class: int = 500
    dim: int = 16
    separation: float = 4.0
    noise: float = 1.5
    imbalance: float = 0.5
    test_per_class: int = 500
    data_seed: int = 0
    train_path: str = ""
    test_path: str = ""
    # models and optimisation
    teacher_hidden: str = "64"
    teacher_epochs: int = 30
    student_hidden: str = "16"
    epochs: int = 50
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    alpha: float = 0.9
    # temperature policy
    policy: str = "energy"
    base_t: float = 4.0
    t_plus: float = 2.0
    t_minus: float = -2.0
    segments: int = 10
    t_min: float = 2.0
    t_max: float = 6.0
    t_squared_scaling: bool = True
    r: float = 0.2
    t_e: float = 1.0
    # augmentation
    augment: str = "none"
    aug_source: str = "high"
    aug_fraction: float = 0.0  # 0 means "use r"
    aug_temperature_mode: str = "base"

    def validate(self):
        choices = {
            "kind": ("blobs", "longtail"),
            "policy": tuple(m.value for m in PolicyMode),
            "augment": ("none", "cutmix", "mixup"),
            "aug_source": ("high", "low", "both"),
            "aug_temperature_mode": ("base", "inherit"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key}={getattr(self, key)!r}: expected one of {allowed}")
        if not 0 < self.r <= 0.5:
            raise ConfigError(f"r={self.r}: must be in (0, 0.5]")
        if not 0 <= self.aug_fraction <= 1:
            raise ConfigError("aug_fraction must be in [0, 1]")
        for key in ("classes", "per_class", "dim", "test_per_class", "teacher_epochs", "epochs",
                    "batch_size"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        try:
            self.temperature_policy()
            self.train_config(self.epochs)
            _hidden(self.teacher_hidden)
            _hidden(self.student_hidden)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def temperature_policy(self):
        return TemperaturePolicy(PolicyMode(self.policy), self.base_t, self.t_plus, self.t_minus,
                                 self.segments, self.t_min, self.t_max)

    def train_config(self, epochs):
        return models.TrainConfig(
            epochs=epochs, batch_size=self.batch_size, learning_rate=self.lr,
            momentum=self.momentum, weight_decay=self.weight_decay, seed=self.seed,
            alpha=self.alpha, policy=self.temperature_policy(), r=self.r, t_e=self.t_e,
            t_squared_scaling=self.t_squared_scaling,
            aug_temperature_mode=self.aug_temperature_mode,
        )

    def resolved_run_dir(self):
        if self.run_dir:
            return Path(self.run_dir)
        return Path(os.environ.get("EKD_RUN_ROOT", "runs")) / self.name

    def to_text(self):
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n"
                       for f in dataclasses.fields(self))


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key, text):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELDS[key].type
    text = str(text).strip()
    try:
        if kind in (bool, "bool"):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            value = float(text)
            if not math.isfinite(value):
                raise ValueError(text)
            return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from None
    return text


def _hidden(text):
    dims = [int(p) for p in str(text).replace(",", " ").split()]
    if not dims or min(dims) < 1:
        raise ValueError(f"hidden layer sizes must be positive integers, got {text!r}")
    return tuple(dims)


def parse_config_text(text):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key = key.strip()
        values[key] = _coerce(key, value)
    return values


def resolve_config(config_path=None, overrides=None):
    values = {}
    if config_path:
        try:
            values.update(parse_config_text(Path(config_path).read_text(encoding="utf-8")))
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from None
    for key, value in (overrides or {}).items():
        values[key] = _coerce(key, value)
    return RunConfig(**values).validate()


# ---------------------------------------------------------------- stages


class Run:
    """File locations inside one run directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.dir = cfg.resolved_run_dir()

    def path(self, name):
        return self.dir / name

    @property
    def train_file(self):
        return Path(self.cfg.train_path) if self.cfg.train_path else self.path("train.ekds")

    @property
    def test_file(self):
        return Path(self.cfg.test_path) if self.cfg.test_path else self.path("test.ekds")

    def metrics(self, record):
        report.append_jsonl(self.path("metrics.jsonl"), record)


def stage_gen_data(run: Run):
    cfg = run.cfg
    if cfg.kind == "blobs":
        train, test = data.make_blobs(cfg.classes, cfg.per_class, cfg.dim, cfg.separation,
                                      cfg.noise, cfg.data_seed, cfg.test_per_class)
    else:
        spec = data.LongTailSpec(cfg.classes, cfg.per_class, cfg.imbalance)
        train, test = data.make_long_tail(spec, cfg.dim, cfg.separation, cfg.noise,
                                          cfg.data_seed, cfg.test_per_class)
    data.save_dataset(train, run.path("train.ekds"))
    data.save_dataset(test, run.path("test.ekds"))
    params = {k: getattr(cfg, k) for k in ("kind", "classes", "per_class", "dim", "separation",
                                           "noise", "imbalance", "test_per_class", "data_seed")}
    params["class_counts"] = " ".join(map(str, train.class_counts()))
    data.write_params(run.path("data_params.txt"), params)
    return train, test


def stage_pretrain(run: Run):
    train, test = data.load_dataset(run.train_file), data.load_dataset(run.test_file)
    tcfg = run.cfg.train_config(run.cfg.teacher_epochs)
    teacher, logits, history = models.pretrain_teacher(train, tcfg, _hidden(run.cfg.teacher_hidden),
                                                       test)
    models.save_model(teacher, run.path("teacher.ekdm"))
    models.save_logits(logits, run.path("teacher_logits.ekdl"))
    for row in history:
        run.metrics({"stage": "teacher", **row})
    return teacher


def stage_score(run: Run):
    teacher = models.load_model(run.path("teacher.ekdm"))
    train = data.load_dataset(run.train_file)
    logits = models.forward(teacher, train.features)
    models.save_logits(logits, run.path("teacher_logits.ekdl"))
    records = energy.rank_dataset(logits, run.cfg.t_e)
    lines = ["sample_id,energy,rank"]
    lines += [f"{r.sample_id},{r.energy!r},{r.rank}" for r in sorted(records, key=lambda r: r.sample_id)]
    run.path("energies.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return records


def _read_energies(run: Run):
    lines = run.path("energies.csv").read_text(encoding="utf-8").splitlines()[1:]
    recs = []
    for line in lines:
        sid, e, rank = line.split(",")
        recs.append(energy.EnergyRecord(int(sid), float(e), int(rank)))
    return recs


def stage_partition(run: Run):
    cfg = run.cfg
    records = _read_energies(run)
    teacher = models.load_model(run.path("teacher.ekdm"))
    plan = energy.partition(records, cfg.r)
    manifest = energy.build_manifest(plan, records, cfg.temperature_policy(), teacher.n_classes,
                                     cfg.t_e, teacher.checksum())
    energy.write_manifest(manifest, run.path("energy_manifest.csv"))
    low, mid, high = plan.sizes()
    run.metrics({"stage": "partition", "n": plan.n, "r": cfg.r, "n_boundary": plan.n_boundary,
                 "low": low, "else": mid, "high": high, "e_low": plan.e_low,
                 "e_high": plan.e_high})
    return manifest


def stage_augment(run: Run):
    cfg = run.cfg
    if cfg.augment == "none":
        return None
    train = data.load_dataset(run.train_file)
    manifest = energy.read_manifest(run.path("energy_manifest.csv"))
    plan = energy.plan_from_manifest(manifest)
    fraction = cfg.aug_fraction or None
    t0 = time.perf_counter()
    heda = augment.build_heda_dataset(train, plan, cfg.augment, seed=cfg.seed,
                                      fraction=fraction, source=cfg.aug_source)
    elapsed = time.perf_counter() - t0
    data.save_dataset(heda.dataset, run.path("heda.ekds"))
    augment.write_provenance(heda.provenance, run.path("heda_provenance.csv"))
    added = len(heda.provenance)
    run.metrics({"stage": "augment", "method": cfg.augment, "source": cfg.aug_source,
                 "n_original": len(train), "n_added": added,
                 "step_increase": report.cost_report(len(train), added / len(train))})
    log.info("augment: %d samples added in %.3fs", added, elapsed)
    return heda


def stage_distill(run: Run):
    cfg = run.cfg
    train, test = data.load_dataset(run.train_file), data.load_dataset(run.test_file)
    teacher = models.load_model(run.path("teacher.ekdm"))
    manifest = energy.read_manifest(run.path("energy_manifest.csv"))
    if manifest.teacher_checksum != teacher.checksum():
        raise ValueError("energy manifest was computed from a different teacher")
    heda = None
    if cfg.augment != "none":
        aug_ds = data.load_dataset(run.path("heda.ekds"))
        prov = augment.read_provenance(run.path("heda_provenance.csv"))
        heda = augment.heda_from_files(aug_ds, prov, len(train))
    t0 = time.perf_counter()
    student, history = models.distill_student(train, teacher, manifest,
                                              cfg.train_config(cfg.epochs),
                                              _hidden(cfg.student_hidden), test, heda)
    log.info("distill: %d epochs in %.2fs", cfg.epochs, time.perf_counter() - t0)
    models.save_model(student, run.path("student.ekdm"))
    for row in history:
        run.metrics({"stage": "student", **row})
    return student


def stage_eval(run: Run):
    train, test = data.load_dataset(run.train_file), data.load_dataset(run.test_file)
    teacher = models.load_model(run.path("teacher.ekdm"))
    student = models.load_model(run.path("student.ekdm"))
    manifest = energy.read_manifest(run.path("energy_manifest.csv"))
    plan = energy.plan_from_manifest(manifest)
    stats = report.bucket_confidence(models.forward(teacher, train.features), plan)
    run.path("bucket_confidence.csv").write_text(report.bucket_stats_csv(stats), encoding="utf-8")
    z_t, z_s = models.forward(teacher, test.features), models.forward(student, test.features)
    disparity, summary = report.correlation_disparity(z_s, z_t)
    run.path("correlation_disparity.csv").write_text(report.matrix_csv(disparity),
                                                     encoding="utf-8")
    result = {
        "stage": "eval",
        "teacher_test_acc": report.accuracy(z_t, test.labels),
        "student_test_acc": report.accuracy(z_s, test.labels),
        "disparity_mean_offdiag": summary,
    }
    for b, s in stats.items():
        result[f"{b.name.lower()}_mean_confidence"] = s.mean_confidence
    run.metrics(result)
    return result


STAGES = {
    "gen-data": stage_gen_data,
    "pretrain": stage_pretrain,
    "score": stage_score,
    "partition": stage_partition,
    "augment": stage_augment,
    "distill": stage_distill,
    "eval": stage_eval,
}


def _run_stage(run: Run, name):
    try:
        return STAGES[name](run)
    except Exception as exc:
        run.dir.mkdir(parents=True, exist_ok=True)
        run.path("FAILED").write_text(f"stage={name}\nerror={exc}\n", encoding="utf-8")
        raise StageError(name, exc) from exc


def _prepare(cfg: RunConfig):
    run = Run(cfg)
    run.dir.mkdir(parents=True, exist_ok=True)
    echoed = dataclasses.replace(cfg, run_dir=str(run.dir))
    run.path("config.txt").write_text(echoed.to_text(), encoding="utf-8")
    failed = run.path("FAILED")
    if failed.exists():
        failed.unlink()
    return run


def run_pipeline(cfg: RunConfig):
    """All stages in order; returns the eval record."""
    run = _prepare(cfg)
    metrics = run.path("metrics.jsonl")
    if metrics.exists():
        metrics.unlink()
    stages = ["pretrain", "score", "partition", "augment", "distill", "eval"]
    if not cfg.train_path:
        stages.insert(0, "gen-data")
    result = None
    for name in stages:
        log.info("stage %s", name)
        result = _run_stage(run, name)
    return result


# ---------------------------------------------------------------- sweep


def _sweep_cell(args):
    cfg, label, r, seed = args
    try:
        result = run_pipeline(cfg)
        return label, r, seed, result["student_test_acc"], None
    except StageError as exc:
        return label, r, seed, None, str(exc)


def run_sweep(base: RunConfig, r_values, seeds, jobs=1):
    root = base.resolved_run_dir()
    cells = []
    for seed in seeds:
        for r in r_values:
            cfg = dataclasses.replace(base, r=r, seed=seed, run_dir=str(root / f"r{r}_seed{seed}"))
            cells.append((cfg.validate(), "energy", r, seed))
        cfg = dataclasses.replace(base, policy="constant", seed=seed,
                                  run_dir=str(root / f"constant_seed{seed}"))
        cells.append((cfg.validate(), "constant", None, seed))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_sweep_cell, cells))
    else:
        results = [_sweep_cell(c) for c in cells]
    return summarize_sweep(results)


def summarize_sweep(results):
    """Rows of (label, r, n_ok, n_failed, mean, sd) sorted by label then r."""
    groups = {}
    for label, r, seed, acc, err in results:
        groups.setdefault((label, r), []).append((seed, acc, err))
    rows = []
    for (label, r), cells in sorted(groups.items(), key=lambda kv: (kv[0][0] != "constant",
                                                                     kv[0][1] or 0.0)):
        accs = [a for _, a, e in sorted(cells) if e is None]
        mean = float(np.mean(accs)) if accs else float("nan")
        sd = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
        rows.append({"policy": label, "r": r, "n_ok": len(accs),
                     "n_failed": len(cells) - len(accs), "mean_acc": mean, "sd_acc": sd})
    return rows


def sweep_table(rows):
    body = []
    for row in rows:
        cell = "FAILED" if row["n_ok"] == 0 else f"{100 * row['mean_acc']:.2f} ± {100 * row['sd_acc']:.2f}"
        if row["n_failed"] and row["n_ok"]:
            cell += f" ({row['n_failed']} failed)"
        body.append([row["policy"], "-" if row["r"] is None else row["r"], row["n_ok"], cell])
    return report.text_table(["policy", "r", "seeds", "student acc % (mean ± sd)"], body)


# ---------------------------------------------------------------- argparse


_FLAG_HELP = {
    "kind": "dataset kind: blobs | longtail",
    "imbalance": "long-tail imbalance factor (rarest/most frequent class count)",
    "policy": "temperature policy: constant | energy | gradation",
    "augment": "HE-DA method: none | cutmix | mixup",
    "aug_source": "which energy end to augment: high | low | both (ablation only)",
    "aug_fraction": "augmentation budget as a fraction of N; 0 uses r",
}


def _config_parent():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("-v", "--verbose", action="store_true")
    g = p.add_argument_group("run config")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        g.add_argument(flag, dest=f.name, default=argparse.SUPPRESS, metavar="V",
                       help=_FLAG_HELP.get(f.name, f"default {_fmt(f.default)}"))
    return p


def build_parser():
    parent = _config_parent()
    parser = argparse.ArgumentParser(prog="energykd", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", parents=[parent], help="generate a synthetic dataset")
    gen.add_argument("--out", help="output directory (default: the run directory)")

    for name, helptext in [("pretrain", "train the teacher"),
                           ("score", "teacher logits and energy ranking"),
                           ("partition", "bucket samples and assign temperatures"),
                           ("augment", "build the HE-DA dataset"),
                           ("distill", "distill the student"),
                           ("eval", "evaluate teacher and student"),
                           ("pipeline", "run every stage")]:
        sub.add_parser(name, parents=[parent], help=helptext)

    sweep = sub.add_parser("sweep-r", parents=[parent], help="sweep r over seeds")
    sweep.add_argument("--r-values", default="0.1,0.2,0.3,0.4,0.5")
    sweep.add_argument("--seeds", default="5", help="seed count N (seeds 0..N-1) or a comma list")
    sweep.add_argument("--jobs", type=int, default=1)
    return parser


def _overrides(ns):
    return {k: v for k, v in vars(ns).items() if k in _FIELDS}


def _parse_seeds(text):
    if "," in text:
        return [int(s) for s in text.split(",") if s.strip()]
    return list(range(int(text)))


def main(argv=None):
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _overrides(ns)
        if ns.command == "gen-data":
            if "kind" not in overrides:
                raise ConfigError("the following arguments are required: --kind")
            # for gen-data, --seed names the data seed
            if "seed" in overrides and "data_seed" not in overrides:
                overrides["data_seed"] = overrides.pop("seed")
            if ns.out:
                overrides["run_dir"] = ns.out
        cfg = resolve_config(ns.config, overrides)
        if ns.command == "sweep-r":
            r_values = [float(v) for v in ns.r_values.split(",") if v.strip()]
            seeds = _parse_seeds(ns.seeds)
            for r in r_values:
                if not 0 < r <= 0.5:
                    raise ConfigError(f"r={r}: must be in (0, 0.5]")
    except (ConfigError, ValueError) as exc:
        print(f"energykd: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if ns.command == "pipeline":
            result = run_pipeline(cfg)
            print(f"run dir: {cfg.resolved_run_dir()}")
            print(f"teacher test acc {result['teacher_test_acc']:.4f}  "
                  f"student test acc {result['student_test_acc']:.4f}  "
                  f"disparity {result['disparity_mean_offdiag']:.4f}")
        elif ns.command == "sweep-r":
            rows = run_sweep(cfg, r_values, seeds, ns.jobs)
            table = sweep_table(rows)
            root = cfg.resolved_run_dir()
            root.mkdir(parents=True, exist_ok=True)
            (root / "sweep_summary.txt").write_text(table + "\n", encoding="utf-8")
            summary = root / "sweep_summary.jsonl"
            if summary.exists():
                summary.unlink()
            for row in rows:
                report.append_jsonl(summary, row)
            print(table)
        else:
            run = _prepare(cfg)
            result = _run_stage(run, ns.command)
            if ns.command == "gen-data":
                train, _ = result
                print(f"wrote {run.path('train.ekds')} (N={len(train)}, "
                      f"class counts {' '.join(map(str, train.class_counts()))})")
            elif ns.command == "eval":
                print(" ".join(f"{k}={v:.4f}" for k, v in result.items() if isinstance(v, float)))
    except StageError as exc:
        print(f"energykd: {exc}", file=sys.stderr)
        # malformed input files are validation errors; everything else is a runtime failure
        if isinstance(exc.cause, data.DatasetFormatError):
            return EXIT_CONFIG
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
