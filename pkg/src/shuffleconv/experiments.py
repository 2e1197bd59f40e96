"""Config-driven experiment protocols that emit one CSV row per finished run.

Each protocol expands a config into *rows*.  Rows that need the same trained
network (same architecture, train scheme, seed and augmentation) share one
training *unit*, so e.g. the no-shuffle baseline of a layer sweep is trained
once and reused by every curve.  Units may run in worker processes; rows are
always emitted in declared order.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .data import DATA_DIR_ENV, Dataset, SyntheticSpatialTask, gen_synthetic, load_cifar, load_dataset
from .model import Model
from .shuffle import parse_mechanism
from .train import OptimConfig, SchemeMatrixCell, SCHEME_PAIRS, config_digest, eval_seed_for, evaluate, train
from .zoo import (
    MODEL_NAMES, ModelSpec, SurgeryPlan, apply_surgery, build_model, build_vgg_tiny, count_params, input_shapes,
    percent_to_k,
)

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
EXPERIMENT_KINDS = ("scheme-matrix", "layer-sweep", "single-vs-multi", "patch-sweep", "aug-ablation", "param-table")
CSV_HEADER = ("experiment_id", "model", "mechanism", "coordinate", "top1", "params", "seed", "runtime_s")
MANIFEST_SUFFIX = ".manifest.json"

# Published parameter counts (millions), echoed next to the param table for comparison only.
PUBLISHED_PARAMS_M = {
    "vgg16": {"baseline": 37.70, "gapfc": 35.61},
    "resnet50": {"baseline": 25.56, "gapfc": 23.46},
    "resnet152": {"baseline": 60.19, "gapfc": 52.85},
}

# Desk-scale synthetic task used by the bundled configs and the acceptance suite.
DESK_TASK = {"seed": 0, "size": 16, "family": "texture", "classes": 8, "channels": 3, "glyph": 9,
             "glyph_pixels": 30, "copies": 1, "noise": 0.3}


class ConfigError(ValueError):
    """A config that cannot run (bad values, impossible sweep points, unwritable output)."""


# --- configuration -------------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    kind: str = "layer-sweep"
    experiment_id: str | None = None
    model: str = "vgg-tiny"
    model_options: dict = field(default_factory=dict)  # with_bn, small_stem, widths
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic", "task": dict(DESK_TASK),
                                                   "train": 2000, "test": 1000})
    mechanism: str = "spatial"
    mechanisms: list = field(default_factory=lambda: ["spatial", "channel", "gapfc"])
    percent: float = 30.0  # scheme-matrix and aug-ablation: trailing share of layers modified
    percents: list = field(default_factory=lambda: [0, 30, 60, 100])
    patches: list = field(default_factory=lambda: [1, 2, 4, 8, 16])
    layers: list | None = None
    models: list | None = None  # param-table only
    seed: int = 0
    replicates: int = 1
    optim: dict = field(default_factory=dict)
    augment: bool = True
    eval_passes: int = 1
    dtype: str = "float64"
    share_skip: bool = True
    out: str | None = None
    jobs: int = 1
    record_runtime: bool = False

    # -- construction --

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        version = raw.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version}; expected {CONFIG_VERSION}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {"version": CONFIG_VERSION, **asdict(self)}

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        """Copy with every non-None override applied (command-line flags win over file values)."""
        changes = {k: v for k, v in overrides.items() if v is not None}
        cfg = replace(self, **changes)
        cfg.validate()
        return cfg

    @property
    def digest(self) -> str:
        d = self.to_dict()
        for volatile in ("out", "jobs", "record_runtime", "experiment_id"):
            d.pop(volatile)
        return config_digest(d)

    @property
    def resolved_id(self) -> str:
        return self.experiment_id or f"{self.kind}-{self.digest[:8]}"

    def optim_config(self) -> OptimConfig:
        opts = dict(self.optim)
        if "schedule" in opts and opts["schedule"] is not None:
            opts["schedule"] = tuple(tuple(s) for s in opts["schedule"])
        try:
            return OptimConfig(**opts)
        except TypeError as exc:
            raise ConfigError(f"bad optim section: {exc}") from None

    def seeds(self) -> list[int]:
        """Replicate seeds; replicate 0 uses the master seed itself."""
        if self.replicates == 1:
            return [self.seed]
        return [self.seed] + [derive_seed(self.seed, r) for r in range(1, self.replicates)]

    # -- validation --

    def validate(self) -> None:
        try:
            self._validate()
        except ConfigError:
            raise
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(str(exc)) from None

    def _validate(self) -> None:
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"kind must be one of {EXPERIMENT_KINDS}, got {self.kind!r}")
        if self.model not in MODEL_NAMES:
            raise ConfigError(f"model must be one of {MODEL_NAMES}, got {self.model!r}")
        if self.replicates < 1 or self.jobs < 1 or self.eval_passes < 1:
            raise ConfigError("replicates, jobs and eval_passes must be at least 1")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")
        if self.dataset.get("kind") not in ("synthetic", "cifar", "files"):
            raise ConfigError("dataset.kind must be synthetic, cifar or files")
        self.optim_config()
        for p in [self.percent, *self.percents]:
            if not 0 <= p <= 100:
                raise ConfigError(f"percent {p} outside [0, 100]")
        for p in self.patches:
            if int(p) != p or p < 1:
                raise ConfigError(f"patch sizes must be positive integers, got {p}")
        for m in self.mechanisms:
            parse_mechanism(m)
        name, _ = parse_mechanism(self.mechanism)
        if self.kind in ("single-vs-multi", "patch-sweep") and name in ("none", "gapfc"):
            raise ConfigError(f"{self.kind} needs a shuffle mechanism, got {self.mechanism!r}")
        if self.kind == "param-table":
            for m in self.models or ():
                if m not in MODEL_NAMES:
                    raise ConfigError(f"unknown model {m!r} in models")
            return
        spec = self.build_spec()
        n = spec.countable_count
        for i in self.layers or ():
            if not 1 <= i <= n:
                raise ConfigError(f"layer index {i} outside 1..{n} for {spec.name}")
        if self.kind == "patch-sweep":
            extents = input_shapes(spec)
            targets = [spec.countable_indices[i - 1] for i in self.layer_indices(spec)]
            largest = max(min(extents[t][1:]) for t in targets)
            too_big = [p for p in self.patches if p > largest]
            if too_big:
                raise ConfigError(f"patch sizes {too_big} exceed every target layer's feature map")

    # -- derived pieces --

    def input_shape_and_classes(self) -> tuple[tuple[int, int, int], int]:
        ds = self.dataset
        if ds["kind"] == "synthetic":
            task = SyntheticSpatialTask(**ds.get("task", {}))
            return (task.channels, task.size, task.size), task.classes
        if ds["kind"] == "cifar":
            return (3, 32, 32), 100 if ds.get("variant", "cifar100-fine") == "cifar100-fine" else 10
        meta = json.loads(Path(str(ds["train_path"]) + ".json").read_text())
        return tuple(meta["shape"]), meta["classes"]

    def build_spec(self, name: str | None = None, shape=None, classes=None) -> ModelSpec:
        if shape is None:
            shape, classes = self.input_shape_and_classes()
        name = name or self.model
        opts = dict(self.model_options)
        if name == "vgg-tiny" and "widths" in opts:
            widths = tuple(w if w == "M" else int(w) for w in opts["widths"])
            return build_vgg_tiny(shape, classes, opts.get("with_bn", True), widths)
        return build_model(name, shape, classes, opts.get("with_bn", True), opts.get("small_stem", True))

    def layer_indices(self, spec: ModelSpec) -> list[int]:
        if self.layers:
            return [int(i) for i in self.layers]
        n = spec.countable_count
        if self.kind == "patch-sweep":
            return [1, n] if n > 1 else [1]
        return list(range(1, n + 1))


def derive_seed(master: int, *coords: int) -> int:
    state = np.random.SeedSequence([master & 0xFFFFFFFF, *coords]).generate_state(1, dtype=np.uint32)
    return int(state[0])


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold one JSON object")
    return ExperimentConfig.from_dict(raw)


# --- result rows -----------------------------------------------------------------------------------

@dataclass(frozen=True)
class ResultRow:
    experiment_id: str
    model: str
    mechanism: str
    coordinate: str
    top1: float | None
    params: int
    seed: int
    runtime_s: float | None = None

    def coords(self) -> dict[str, str]:
        return dict(part.split("=", 1) for part in self.coordinate.split(";") if part)

    def to_record(self) -> list[str]:
        return [self.experiment_id, self.model, self.mechanism, self.coordinate,
                "" if self.top1 is None else repr(float(self.top1)), str(self.params), str(self.seed),
                "" if self.runtime_s is None else repr(float(self.runtime_s))]

    @classmethod
    def from_record(cls, rec: list[str]) -> "ResultRow":
        if len(rec) != len(CSV_HEADER):
            raise ValueError(f"expected {len(CSV_HEADER)} fields, got {len(rec)}")
        eid, model, mech, coord, top1, params, seed, runtime = rec
        return cls(eid, model, mech, coord, float(top1) if top1 else None, int(params), int(seed),
                   float(runtime) if runtime else None)


def coordinate(**parts) -> str:
    """``key=value`` pairs joined by ``;`` (numbers in shortest form, so 30.0 prints as 30)."""
    return ";".join(f"{k}={v:g}" if isinstance(v, float) else f"{k}={v}" for k, v in parts.items())


def rows_to_csv(rows, header: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow(row.to_record())
    return buf.getvalue()


def read_results(path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        head = next(reader, None)
        if head is None:
            return []
        if tuple(head) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {head}")
        return [ResultRow.from_record(rec) for rec in reader if rec]


def check_writable(path) -> None:
    """Fail before any compute if ``path`` (and its manifest) cannot be written."""
    path = Path(path)
    parent = path.parent if str(path.parent) else Path(".")
    if path.is_dir():
        raise ConfigError(f"output path {path} is a directory")
    if not parent.is_dir():
        raise ConfigError(f"output directory {parent} does not exist")
    for target in (path, Path(str(path) + MANIFEST_SUFFIX)):
        if target.exists():
            if not os.access(target, os.W_OK):
                raise ConfigError(f"output file {target} is not writable")
        elif not os.access(parent, os.W_OK):
            raise ConfigError(f"output directory {parent} is not writable")


def emit_results(rows, path, manifest: dict | None = None) -> None:
    """Append ``rows`` to a CSV (writing the header first if the file is new or empty).

    The sidecar ``<path>.manifest.json`` accumulates one entry per call.
    """
    check_writable(path)
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    if not fresh:
        with open(path, newline="") as fh:
            head = next(csv.reader(fh), None)
        if head is not None and tuple(head) != CSV_HEADER:
            raise ConfigError(f"{path} exists with a different header; refusing to append")
    with open(path, "a", newline="") as fh:
        fh.write(rows_to_csv(rows, header=fresh))
    side = Path(str(path) + MANIFEST_SUFFIX)
    doc = {"format": "shuffleconv-manifest", "version": 1, "runs": []}
    if side.exists():
        try:
            doc = json.loads(side.read_text())
        except json.JSONDecodeError:
            log.warning("manifest %s is unreadable; starting a new one", side)
    doc["runs"].append(manifest or {})
    side.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --- training units ------------------------------------------------------------------------------

@dataclass(frozen=True)
class Unit:
    """Everything that determines one trained network."""

    arch: str = "base"  # "base" or "gapfc"
    arch_k: int = 0
    train_scheme: str = "none"
    k_last: int = 0
    layers: tuple[int, ...] | None = None
    seed: int = 0
    augment: bool = True

    def cell(self, test_scheme: str) -> SchemeMatrixCell:
        return SchemeMatrixCell(self.train_scheme, test_scheme, self.k_last, self.layers)

    def canonical(self) -> "Unit":
        # a shuffle over zero layers is the plain baseline
        if self.train_scheme != "none" and self.layers is None and self.k_last == 0:
            return replace(self, train_scheme="none")
        if self.arch == "gapfc" and self.arch_k == 0:
            return replace(self, arch="base")
        return self


@dataclass(frozen=True)
class RowPlan:
    model: str
    mechanism: str
    coordinate: str
    unit: Unit | None
    test_scheme: str = "none"
    params: int = 0
    note: str | None = None  # set for rows that cannot run


@dataclass
class UnitOutcome:
    top1: dict = field(default_factory=dict)
    runtime_s: float = 0.0
    error: str | None = None


@lru_cache(maxsize=4)
def _datasets(dataset_json: str) -> tuple[Dataset, Dataset]:
    ds = json.loads(dataset_json)
    kind = ds["kind"]
    if kind == "synthetic":
        task = SyntheticSpatialTask(**ds.get("task", {}))
        return gen_synthetic(task, int(ds.get("train", 2000)), "train"), gen_synthetic(task, int(ds.get("test", 1000)),
                                                                                    "test")
    if kind == "cifar":
        path = ds.get("path") or os.environ.get(DATA_DIR_ENV)
        if not path:
            raise ConfigError(f"dataset.path not set and ${DATA_DIR_ENV} is empty")
        tr, te = load_cifar(path, ds.get("variant", "cifar100-fine"))
    else:
        tr, te = load_dataset(ds["train_path"]), load_dataset(ds["test_path"])
    # optional subset sizes (first n records)
    if ds.get("train"):
        tr = tr.subset(int(ds["train"]))
    if ds.get("test"):
        te = te.subset(int(ds["test"]))
    return tr, te


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    return _datasets(json.dumps(cfg.dataset, sort_keys=True))


def unit_spec(cfg: ExperimentConfig, unit: Unit) -> ModelSpec:
    spec = cfg.build_spec()
    if unit.arch == "gapfc":
        spec = apply_surgery(spec, SurgeryPlan("gapfc", unit.arch_k))
    return spec


def run_unit(cfg: ExperimentConfig, unit: Unit, tests: tuple[str, ...]) -> UnitOutcome:
    """Train one network and evaluate it under every requested test scheme."""
    started = time.perf_counter()
    try:
        with T.default_dtype(cfg.dtype):
            train_data, test_data = load_data(cfg)
            model = Model(unit_spec(cfg, unit), seed=unit.seed)
            cell = replace(unit.cell("none"), share_skip=cfg.share_skip)
            report = train(model, train_data, cfg.optim_config(), cell, unit.seed, augment=unit.augment)
            if report.status != "ok":
                return UnitOutcome(error=f"{report.status} after epoch {report.last_good_epoch}",
                                   runtime_s=time.perf_counter() - started)
            top1 = {}
            for scheme in tests:
                cell = unit.cell(scheme)
                top1[scheme] = evaluate(model, test_data, scheme, eval_seed_for(unit.seed), cfg.eval_passes,
                                        cell.k_last, cell.layers, share_skip=cfg.share_skip)
    except Exception as exc:  # record and continue
        log.warning("unit %s failed: %s", unit, exc)
        return UnitOutcome(error=f"{type(exc).__name__}: {exc}", runtime_s=time.perf_counter() - started)
    return UnitOutcome(top1, time.perf_counter() - started)


def _run_unit_payload(payload):
    cfg_dict, unit, tests = payload
    return run_unit(ExperimentConfig.from_dict(cfg_dict), unit, tests)


def execute(cfg: ExperimentConfig, plans: list[RowPlan]) -> tuple[list[ResultRow], list[dict]]:
    """Run every distinct unit behind ``plans`` and assemble rows in plan order."""
    tests: dict[Unit, list[str]] = {}
    for plan in plans:
        if plan.unit is not None and plan.note is None:
            tests.setdefault(plan.unit, [])
            if plan.test_scheme not in tests[plan.unit]:
                tests[plan.unit].append(plan.test_scheme)
    units = list(tests)
    log.info("%s: %d rows over %d training runs", cfg.resolved_id, len(plans), len(units))
    outcomes: dict[Unit, UnitOutcome] = {}
    if cfg.jobs > 1 and len(units) > 1:
        payloads = [(cfg.to_dict(), u, tuple(tests[u])) for u in units]
        with ProcessPoolExecutor(max_workers=min(cfg.jobs, len(units))) as pool:
            for unit, outcome in zip(units, pool.map(_run_unit_payload, payloads)):
                outcomes[unit] = outcome
    else:
        for n, unit in enumerate(units, 1):
            outcomes[unit] = run_unit(cfg, unit, tuple(tests[unit]))
            log.info("run %d/%d done: %s", n, len(units), outcomes[unit].error or "ok")

    rows, problems = [], []
    eid = cfg.resolved_id
    for plan in plans:
        if plan.note is not None:
            problems.append({"coordinate": plan.coordinate, "mechanism": plan.mechanism, "skipped": plan.note})
            continue
        if plan.unit is None:  # accounting-only rows
            rows.append(ResultRow(eid, plan.model, plan.mechanism, plan.coordinate, None, plan.params, cfg.seed))
            continue
        outcome = outcomes[plan.unit]
        runtime = round(outcome.runtime_s, 3) if cfg.record_runtime else None
        if outcome.error:
            problems.append({"coordinate": plan.coordinate, "mechanism": plan.mechanism, "failed": outcome.error})
        rows.append(ResultRow(eid, plan.model, plan.mechanism, plan.coordinate,
                              outcome.top1.get(plan.test_scheme), plan.params, plan.unit.seed, runtime))
    return rows, problems


# --- protocols -------------------------------------------------------------------------------------

def _shuffle_unit(name: str, k: int, seed: int, augment: bool) -> Unit:
    if name == "gapfc":
        return Unit("gapfc", k, seed=seed, augment=augment).canonical()
    return Unit(train_scheme=name, k_last=k, seed=seed, augment=augment).canonical()


def plan_scheme_matrix(cfg: ExperimentConfig) -> list[RowPlan]:
    """The seven train/test pairs with shuffling over the last ``cfg.percent`` percent of layers."""
    spec = cfg.build_spec()
    percent = cfg.percent
    k = percent_to_k(spec, percent)
    params = count_params(spec)
    plans = []
    for seed in cfg.seeds():
        for train_s, test_s in SCHEME_PAIRS:
            # k_last scopes both phases, so the three no-shuffle-at-train rows share one network
            unit = Unit(train_scheme=train_s, k_last=k, seed=seed, augment=cfg.augment)
            mech = test_s if train_s == "none" else train_s
            plans.append(RowPlan(spec.name, mech, coordinate(train=train_s, test=test_s, percent=percent, k=k),
                                 unit, test_s, params))
    return plans


def plan_layer_sweep(cfg: ExperimentConfig) -> list[RowPlan]:
    spec = cfg.build_spec()
    plans = []
    for seed in cfg.seeds():
        for mech in cfg.mechanisms:
            name, patch = parse_mechanism(mech)
            for percent in cfg.percents:
                k = percent_to_k(spec, percent)
                train_s = mech if name != "gapfc" else "none"
                unit = _shuffle_unit(train_s if name != "gapfc" else "gapfc", k, seed, cfg.augment)
                arch = apply_surgery(spec, SurgeryPlan("gapfc", k)) if name == "gapfc" else spec
                test_s = "none" if unit.train_scheme == "none" else unit.train_scheme
                plans.append(RowPlan(spec.name, name if patch is None else mech,
                                     coordinate(percent=percent, k=k), unit, test_s, count_params(arch)))
    return plans


def plan_single_vs_multi(cfg: ExperimentConfig) -> list[RowPlan]:
    spec = cfg.build_spec()
    n = spec.countable_count
    params = count_params(spec)
    plans = []
    for seed in cfg.seeds():
        for i in cfg.layer_indices(spec):
            for mode, layers in (("single", (i,)), ("multi", tuple(range(i, n + 1)))):
                unit = Unit(train_scheme=cfg.mechanism, layers=layers, seed=seed, augment=cfg.augment)
                plans.append(RowPlan(spec.name, cfg.mechanism, coordinate(layer=i, mode=mode), unit,
                                     cfg.mechanism, params))
    return plans


def plan_patch_sweep(cfg: ExperimentConfig) -> list[RowPlan]:
    spec = cfg.build_spec()
    extents = input_shapes(spec)
    params = count_params(spec)
    plans = []
    for seed in cfg.seeds():
        for i in cfg.layer_indices(spec):
            _, h, w = extents[spec.countable_indices[i - 1]]
            for p in cfg.patches:
                p = int(p)
                mech = f"patch:{p}"
                coord = coordinate(layer=i, patch=p)
                if p > min(h, w):
                    plans.append(RowPlan(spec.name, mech, coord, None, note=f"patch {p} exceeds {h}x{w} map"))
                    continue
                unit = Unit(train_scheme=mech, layers=(i,), seed=seed, augment=cfg.augment)
                plans.append(RowPlan(spec.name, mech, coord, unit, mech, params))
    return plans


def plan_aug_ablation(cfg: ExperimentConfig) -> list[RowPlan]:
    spec = cfg.build_spec()
    percent = cfg.percent
    k = percent_to_k(spec, percent)
    plans = []
    for seed in cfg.seeds():
        for mech, kk in (("none", 0), ("gapfc", k)):
            arch = apply_surgery(spec, SurgeryPlan("gapfc", kk)) if kk else spec
            for aug in (True, False):
                unit = Unit("gapfc" if kk else "base", kk, seed=seed, augment=aug)
                plans.append(RowPlan(spec.name, mech, coordinate(aug="on" if aug else "off", percent=percent if kk
                                                                 else 0, k=kk), unit, "none", count_params(arch)))
    return plans


def plan_param_table(cfg: ExperimentConfig) -> list[RowPlan]:
    """Parameter counts at CIFAR-100 geometry (3x32x32 input, 100 classes); no training."""
    plans = []
    for name in cfg.models or list(MODEL_NAMES):
        spec = cfg.build_spec(name, (3, 32, 32), 100)
        n = spec.countable_count
        plans.append(RowPlan(name, "none", coordinate(k=0, percent=0), None, params=count_params(spec)))
        for k in range(1, n + 1):
            surg = apply_surgery(spec, SurgeryPlan("gapfc", k))
            plans.append(RowPlan(name, "gapfc", coordinate(k=k, percent=round(100 * k / n, 1)), None,
                                 params=count_params(surg)))
    return plans


PLANNERS = {
    "scheme-matrix": plan_scheme_matrix,
    "layer-sweep": plan_layer_sweep,
    "single-vs-multi": plan_single_vs_multi,
    "patch-sweep": plan_patch_sweep,
    "aug-ablation": plan_aug_ablation,
    "param-table": plan_param_table,
}


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list[ResultRow]
    problems: list[dict]

    @property
    def ok(self) -> bool:
        return not any("failed" in p for p in self.problems)

    def manifest(self) -> dict:
        entry = {"experiment_id": self.config.resolved_id, "config": self.config.to_dict(),
                 "config_digest": self.config.digest, "package_version": __version__,
                 "rows": len(self.rows), "problems": self.problems}
        if self.config.kind == "param-table":
            entry["published_params_m"] = PUBLISHED_PARAMS_M
        return entry


def run_experiment(cfg: ExperimentConfig, emit: bool = True) -> ExperimentResult:
    """Validate, pre-flight the output path, run, and (optionally) append the rows to ``cfg.out``."""
    cfg.validate()
    if emit and cfg.out:
        check_writable(cfg.out)
    rows, problems = execute(cfg, PLANNERS[cfg.kind](cfg))
    result = ExperimentResult(cfg, rows, problems)
    if emit and cfg.out:
        emit_results(rows, cfg.out, result.manifest())
    return result


def run_scheme_matrix(cfg: ExperimentConfig) -> list[ResultRow]:
    return run_experiment(replace(cfg, kind="scheme-matrix"), emit=False).rows


def run_layer_sweep(cfg: ExperimentConfig) -> list[ResultRow]:
    return run_experiment(replace(cfg, kind="layer-sweep"), emit=False).rows


def run_single_vs_multi(cfg: ExperimentConfig) -> list[ResultRow]:
    return run_experiment(replace(cfg, kind="single-vs-multi"), emit=False).rows


def run_patch_sweep(cfg: ExperimentConfig) -> list[ResultRow]:
    return run_experiment(replace(cfg, kind="patch-sweep"), emit=False).rows


def run_aug_ablation(cfg: ExperimentConfig) -> list[ResultRow]:
    return run_experiment(replace(cfg, kind="aug-ablation"), emit=False).rows


def run_param_table(cfg: ExperimentConfig) -> list[ResultRow]:
    return run_experiment(replace(cfg, kind="param-table"), emit=False).rows
