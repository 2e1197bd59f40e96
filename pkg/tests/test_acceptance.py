"""Acceptance criteria 1-9, one test per criterion.

Each test prints ``criterion N: PASS|FAIL (...)`` and the lines are repeated in
the terminal summary.  Criteria 5-8 train the desk-scale configs shipped in
``configs/desk`` and take several minutes each on one CPU.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest

from shuffleconv import tensor as T
from shuffleconv.data import load_cifar, read_records, to_uint8, write_records
from shuffleconv.experiments import ExperimentConfig, load_config, load_data, rows_to_csv, run_experiment
from shuffleconv.model import Model, load_checkpoint, param_table, save_checkpoint
from shuffleconv.shuffle import (
    ShuffleRng, channel_permutation, channel_shuffle, patch_shuffle, permute, spatial_permutation, spatial_shuffle,
)
from shuffleconv.train import OptimConfig, evaluate, train
from shuffleconv.zoo import (
    MODEL_NAMES, LayerDesc, ModelSpec, SurgeryPlan, apply_surgery, build_model, conv, count_params,
)

from conftest import numeric_grad

pytestmark = pytest.mark.slow

DESK = Path(__file__).resolve().parent.parent / "configs" / "desk"
LINES: list[str] = []


def verdict(number: int, checks: dict, detail: str, elapsed: float, budget: float | None):
    """Record one criterion line, then fail the test if any check (or the time budget) failed."""
    if budget is not None:
        checks = {**checks, f"runtime {elapsed:.1f}s <= {budget:.0f}s": elapsed <= budget}
    failed = [name for name, ok in checks.items() if not ok]
    line = f"criterion {number}: {'FAIL' if failed else 'PASS'} ({detail}; {elapsed:.1f}s)"
    if failed:
        line += " failed: " + "; ".join(failed)
    LINES.append(line)
    print(line)
    assert not failed, line


def desk(kind: str, **overrides) -> ExperimentConfig:
    return load_config(DESK / f"{kind}.json").with_overrides(**overrides)


def top1_by(rows, *keys):
    return {tuple(r.coords()[k] for k in keys): r.top1 for r in rows}


# --- 1. gradient correctness -------------------------------------------------------------

def _rel_err(analytic, numeric):
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-7)
    return float(np.abs(analytic - numeric).max() / scale)


def _bn_train(x, g, b):
    return T.batch_norm(x, g, b, T.BatchNormState.fresh(x.shape[1]), training=True)


def _bn_eval(x, g, b):
    state = T.BatchNormState(np.array([0.3, -0.2, 0.1]), np.array([0.5, 1.5, 2.0]))
    return T.batch_norm(x, g, b, state, training=False)


def _frozen(fn, shape, seed):
    spec_holder = {}

    def op(x):
        if "spec" not in spec_holder:
            spec_holder["spec"] = fn(shape, seed)
        return permute(x, spec_holder["spec"])
    return op


OPS = {
    "add": (lambda a, b: T.add(a, b), [(3, 4), (4,)]),
    "mul": (lambda a, b: T.mul(a, b), [(3, 4), (3, 1)]),
    "sum": (lambda a: T.tsum(a), [(2, 3)]),
    "reshape": (lambda a: T.reshape(a, (6, 2)), [(3, 4)]),
    "flatten": (lambda a: T.flatten(a), [(2, 3, 2, 2)]),
    "relu": (lambda a: T.relu(a), [(4, 5)]),
    "conv2d s1 p1": (lambda x, w, b: T.conv2d(x, w, b, 1, 1), [(2, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    "conv2d s2 p0": (lambda x, w, b: T.conv2d(x, w, b, 2, 0), [(2, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    "conv2d 1x1": (lambda x, w: T.conv2d(x, w, None, 1, 0), [(2, 3, 3, 3), (2, 3, 1, 1)]),
    "max_pool2d": (lambda x: T.max_pool2d(x, 2, 2), [(2, 2, 4, 4)]),
    "max_pool2d k3 s1 p1": (lambda x: T.max_pool2d(x, 3, 1, 1), [(1, 2, 4, 4)]),
    "global_avg_pool": (lambda x: T.global_avg_pool(x), [(2, 3, 3, 4)]),
    "linear": (lambda x, w, b: T.linear(x, w, b), [(3, 5), (4, 5), (4,)]),
    "batch_norm train": (_bn_train, [(4, 3, 2, 2), (3,), (3,)]),
    "batch_norm eval": (_bn_eval, [(4, 3, 2, 2), (3,), (3,)]),
    "batch_norm 1d": (_bn_train, [(6, 3), (3,), (3,)]),
}
SHUFFLE_OPS = {
    "spatial shuffle": (lambda shape, s: spatial_permutation(shape, shape[1:], ShuffleRng(s)), (3, 3, 4)),
    "patch shuffle": (lambda shape, s: spatial_permutation(shape, 2, ShuffleRng(s)), (3, 3, 4)),
    "channel shuffle": (lambda shape, s: channel_permutation(shape[0], ShuffleRng(s)), (3, 3, 4)),
}


def _check_op(fn, shapes, seed):
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    weights = rng.standard_normal(out.shape)
    T.backward(T.tsum(T.mul(out, T.Tensor(weights))))

    def f():
        return float(np.sum(fn(*[T.Tensor(a) for a in arrays]).data * weights))

    worst = 0.0
    with T.no_grad():
        for leaf, arr in zip(leaves, arrays):
            worst = max(worst, _rel_err(leaf.grad, numeric_grad(f, arr)))
    return worst


def _cnn3():
    # no bias ahead of BN: its exact gradient is zero, where a relative error is undefined
    layers = (conv(2, 3, bias=False, countable=True), LayerDesc("bn", {"channels": 3}), LayerDesc("relu"),
              LayerDesc("maxpool", {"k": 2, "stride": 2, "pad": 0}),
              conv(3, 4, countable=True), LayerDesc("relu"), LayerDesc("flatten"),
              LayerDesc("linear", {"in": 4 * 2 * 2, "out": 3, "bias": True}))
    return ModelSpec("cnn3", layers, (2, 4, 4), 3)


def _check_cnn(seed):
    model = Model(_cnn3(), seed=seed)
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((4, 2, 4, 4)), rng.integers(0, 3, 4)

    def loss():
        return T.softmax_cross_entropy(model.forward(T.Tensor(x), training=True), y)

    T.backward(loss())
    worst = 0.0
    with T.no_grad():
        for p in model.params.values():
            worst = max(worst, _rel_err(p.grad, numeric_grad(lambda: float(loss().data), p.data)))
    model.zero_grad()
    return worst


def test_criterion_1_gradient_correctness():
    started = time.perf_counter()
    errors = {}
    seeds = range(5)
    for name, (fn, shapes) in OPS.items():
        errors[name] = max(_check_op(fn, shapes, s) for s in seeds)
    for name, (draw, shape) in SHUFFLE_OPS.items():
        errors[name] = max(_check_op(_frozen(draw, shape, s), [(2, *shape)], s) for s in seeds)
    errors["softmax_cross_entropy"] = max(
        _check_op(lambda z: T.softmax_cross_entropy(z, np.array([0, 2, 1, 2])), [(4, 3)], s) for s in seeds)
    errors["3-layer CNN"] = max(_check_cnn(s) for s in seeds)
    worst = max(errors, key=errors.get)
    verdict(1, {f"{n} rel err {e:.1e} <= 1e-4": e <= 1e-4 for n, e in errors.items()},
            f"{len(errors)} checks x 5 seeds, worst {worst} {errors[worst]:.1e}", time.perf_counter() - started, 60)


# --- 2. permutation invariants -----------------------------------------------------------

def _draw(mech, rng, trial):
    n, c = int(rng.integers(1, 4)), int(rng.integers(1, 5))
    h, w = int(rng.integers(1, 8)), int(rng.integers(1, 8))
    x = rng.standard_normal((n, c, h, w))
    key = ShuffleRng(int(rng.integers(0, 2**62)), str(rng.choice(["train", "eval"])), trial, int(rng.integers(0, 20)))
    patch = int(rng.integers(1, max(h, w) + 1)) if mech == "patch" else None
    return x, key, patch


def _invariant_failures(mech, x, key, patch):
    failures = []
    xt = T.Tensor(x.copy(), requires_grad=True)
    if mech == "spatial":
        out, spec = spatial_shuffle(xt, key)
    elif mech == "patch":
        out, spec = patch_shuffle(xt, patch, key)
    else:
        out, spec = channel_shuffle(xt, key)
    y = out.data
    n, c, h, w = x.shape
    if not spec.is_bijection():
        failures.append("bijectivity")
    if mech == "channel":
        same_units = np.array_equal(np.sort(y, axis=1), np.sort(x, axis=1))
    else:
        same_units = np.array_equal(np.sort(y.reshape(n, c, -1), axis=2), np.sort(x.reshape(n, c, -1), axis=2))
        if mech == "patch":
            ph, pw = min(patch, h), min(patch, w)
            ii, jj = np.divmod(np.arange(h * w), w)
            cell = (ii // ph) * w + jj // pw
            same_units &= bool(np.all(cell[spec.index] == cell[None, :]))
    if not same_units:
        failures.append("multiset")
    g = np.random.default_rng(int(x.size)).standard_normal(y.shape)
    T.backward(T.tsum(T.mul(out, T.Tensor(g))))
    if not (np.array_equal(xt.grad, spec.apply_inverse(g)) and np.array_equal(spec.apply(spec.apply_inverse(g)), g)):
        failures.append("inverse backward")
    if not all(np.array_equal(y[b:b + 1], spec.apply(x[b:b + 1])) for b in range(n)):
        failures.append("batch sharing")
    if math.fsum((y * y).ravel()) != math.fsum((x * x).ravel()):
        failures.append("L2 norm")
    return failures


def test_criterion_2_permutation_invariants():
    started = time.perf_counter()
    counts = {}
    for mech in ("spatial", "patch", "channel"):
        rng = np.random.default_rng({"spatial": 1, "patch": 2, "channel": 3}[mech])
        bad = 0
        for trial in range(1000):
            x, key, patch = _draw(mech, rng, trial)
            bad += bool(_invariant_failures(mech, x, key, patch))
            T.current_tape().clear()
        counts[mech] = bad
    verdict(2, {f"{m}: {b} failing trials": b == 0 for m, b in counts.items()},
            "1000 trials per mechanism, failures " + ", ".join(f"{m}={b}" for m, b in counts.items()),
            time.perf_counter() - started, 60)


# --- 3. patch = extent reduces to spatial ------------------------------------------------

def test_criterion_3_patch_full_extent_equals_spatial():
    started = time.perf_counter()
    rng = np.random.default_rng(33)
    mismatches = 0
    for trial in range(100):
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        x = T.Tensor(rng.standard_normal(shape))
        key = ShuffleRng(int(rng.integers(0, 2**62)), "train", trial, int(rng.integers(0, 14)), trial % 2)
        a, sa = spatial_shuffle(x, key)
        b, sb = patch_shuffle(x, shape[2:], key)
        mismatches += not (a.data.tobytes() == b.data.tobytes() and np.array_equal(sa.index, sb.index))
    verdict(3, {f"{mismatches} mismatching trials": mismatches == 0}, "100 trials, exact byte equality",
            time.perf_counter() - started, None)


# --- 4. parameter accounting -------------------------------------------------------------

def _enumerated(spec):
    return sum(math.prod(shape) for _, shape, *_ in param_table(spec))


def _has_large_kernel(layer):
    return layer.kind == "bottleneck" or (layer.kind in ("conv", "shuffle_conv") and layer["k"] > 1)


def test_criterion_4_parameter_accounting():
    started = time.perf_counter()
    checks = {}
    points = 0
    for name in MODEL_NAMES:
        for shape, classes in (((3, 32, 32), 100), ((3, 64, 64), 10)):
            base = build_model(name, shape, classes)
            base_count = count_params(base)
            checks[f"{name} {shape[1]}px baseline"] = _enumerated(base) == base_count
            for k in range(1, base.countable_count + 1):
                for mech in ("spatial", "patch", "channel", "gapfc"):
                    spec = apply_surgery(base, SurgeryPlan(mech, k, 2 if mech == "patch" else None))
                    closed = count_params(spec)
                    points += 1
                    if _enumerated(spec) != closed:
                        checks[f"{name} {mech} k={k} enumeration"] = False
                    if mech == "gapfc":
                        replaced = [base.layers[i] for i in base.countable_indices[-k:]]
                        strict = any(_has_large_kernel(layer) for layer in replaced)
                        ok = closed < base_count if strict else closed <= base_count
                        if not ok:
                            checks[f"{name} gapfc k={k} not below baseline"] = False
                    elif closed != base_count:
                        checks[f"{name} {mech} k={k} changes parameters"] = False
    mlp = count_params(build_model("mlp"))
    checks[f"MLP reference {mlp:,} == 1,624,676"] = mlp == 1_624_676
    checks["MLP reference by enumeration"] = _enumerated(build_model("mlp")) == 1_624_676
    verdict(4, checks, f"{len(MODEL_NAMES)} models x 2 geometries, {points} surgery points, MLP {mlp:,}",
            time.perf_counter() - started, 10)


# --- 5-8. desk-scale experiment trends ---------------------------------------------------

def test_criterion_5_scheme_matrix_trend():
    started = time.process_time()
    rows = run_experiment(desk("scheme-matrix"), emit=False).rows
    acc = top1_by(rows, "train", "test")
    chance = 1 / load_config(DESK / "scheme-matrix.json").input_shape_and_classes()[1]
    base = acc[("none", "none")]
    checks = {
        f"(spatial,spatial) {acc[('spatial', 'spatial')]:.3f} >= baseline {base:.3f} - 0.05":
            acc[("spatial", "spatial")] >= base - 0.05,
        f"(none,spatial) {acc[('none', 'spatial')]:.3f} <= baseline - 0.15": acc[("none", "spatial")] <= base - 0.15,
        f"(none,channel) {acc[('none', 'channel')]:.3f} <= 2 x chance {2 * chance:.3f}":
            acc[("none", "channel")] <= 2 * chance,
    }
    detail = ", ".join(f"{tr}/{te}={v:.3f}" for (tr, te), v in acc.items())
    verdict(5, checks, detail, time.process_time() - started, 600)


def test_criterion_6_layer_sweep_shape():
    started = time.process_time()
    rows = run_experiment(desk("layer-sweep"), emit=False).rows
    curves = {}
    for r in rows:
        curves.setdefault(r.mechanism, {})[float(r.coords()["percent"])] = r.top1
    base = curves["spatial"][0.0]
    checks = {}
    for mech in ("spatial", "gapfc"):
        checks[f"{mech}@30% {curves[mech][30.0]:.3f} within 0.05 of {base:.3f}"] = curves[mech][30.0] >= base - 0.05
    for p in sorted(curves["channel"]):
        if p == 0:
            continue
        ch = curves["channel"][p]
        checks[f"channel@{p:g}% {ch:.3f} < spatial {curves['spatial'][p]:.3f} and gapfc {curves['gapfc'][p]:.3f}"] = (
            ch < curves["spatial"][p] and ch < curves["gapfc"][p])
    detail = "; ".join(f"{m}: " + " ".join(f"{p:g}%={v:.3f}" for p, v in sorted(c.items())) for m, c in curves.items())
    verdict(6, checks, detail, time.process_time() - started, 900)


def test_criterion_7_single_vs_multi_overlap():
    started = time.process_time()
    cfg = desk("single-vs-multi")
    rows = run_experiment(cfg, emit=False).rows
    seeds = cfg.seeds()
    per_seed = {}
    for r in rows:
        c = r.coords()
        per_seed.setdefault(r.seed, {}).setdefault(c["mode"], {})[int(c["layer"])] = r.top1
    checks = {f"{len(per_seed)} seeds == 3": len(per_seed) == 3}
    gaps, ranges = [], []
    for seed in seeds:
        single, multi = per_seed[seed]["single"], per_seed[seed]["multi"]
        gaps.append(np.mean([abs(single[i] - multi[i]) for i in single]))
        values = list(single.values()) + list(multi.values())
        ranges.append(max(values) - min(values))
    gap, spread = float(np.mean(gaps)), float(np.mean(ranges))
    checks[f"mean |single-multi| {gap:.3f} <= range/3 {spread / 3:.3f}"] = gap <= spread / 3
    mean_single = {i: np.mean([per_seed[s]["single"][i] for s in seeds]) for i in per_seed[seeds[0]]["single"]}
    mean_multi = {i: np.mean([per_seed[s]["multi"][i] for s in seeds]) for i in per_seed[seeds[0]]["multi"]}
    detail = (f"gap {gap:.3f} vs range {spread:.3f}; single "
              + " ".join(f"{i}:{v:.3f}" for i, v in mean_single.items())
              + " | multi " + " ".join(f"{i}:{v:.3f}" for i, v in mean_multi.items()))
    verdict(7, checks, detail, time.process_time() - started, 900)


def test_criterion_8_patch_sweep_monotonicity():
    started = time.process_time()
    cfg = desk("patch-sweep")
    result = run_experiment(cfg, emit=False)
    acc = top1_by(result.rows, "layer", "patch")
    n = cfg.build_spec().countable_count
    first = [acc[k] for k in sorted((k for k in acc if k[0] == "1"), key=lambda k: int(k[1]))]
    last = [v for k, v in acc.items() if k[0] == str(n)]
    baseline = run_experiment(desk("layer-sweep", mechanisms=["spatial"], percents=[0]), emit=False).rows[0].top1
    spatial_first = run_experiment(desk("single-vs-multi", layers=[1], replicates=1), emit=False).rows[0].top1
    full = max(int(k[1]) for k in acc if k[0] == "1")
    checks = {
        f"first layer non-increasing within 0.03: {first}": all(b <= a + 0.03 for a, b in zip(first, first[1:])),
        f"last layer max-min {max(last) - min(last):.3f} <= 0.05": max(last) - min(last) <= 0.05,
        f"patch 1 rows equal baseline {baseline:.3f}": acc[("1", "1")] == baseline and acc[(str(n), "1")] == baseline,
        f"patch {full} at layer 1 equals spatial single-layer {spatial_first:.3f}":
            acc[("1", str(full))] == spatial_first,
    }
    detail = "; ".join(f"layer {layer}: " + " ".join(f"p{p}={v:.3f}" for (lay, p), v in acc.items() if lay == layer)
                       for layer in sorted({k[0] for k in acc}, key=int))
    verdict(8, checks, detail, time.process_time() - started, 900)


# --- 9. determinism and round-trips ------------------------------------------------------

TINY_DESK = {"model_options": {"widths": [4, "M", 8, "M", 8]},
             "dataset": {"kind": "synthetic", "task": {"seed": 0, "size": 8, "classes": 4, "glyph": 3,
                                                        "glyph_pixels": 5}, "train": 128, "test": 64},
             "optim": {"lr": 0.05, "epochs": 2, "batch_size": 32}}


def test_criterion_9_determinism_and_round_trips(tmp_path):
    started = time.perf_counter()
    checks = {}
    cfg = ExperimentConfig.from_dict({"kind": "layer-sweep", "experiment_id": "det", "percents": [0, 50],
                                      **TINY_DESK, "out": str(tmp_path / "a.csv")})
    run_experiment(cfg)
    run_experiment(cfg.with_overrides(out=str(tmp_path / "b.csv")))
    a, b = (tmp_path / "a.csv").read_bytes(), (tmp_path / "b.csv").read_bytes()
    checks["identical config and seed give byte-identical CSV"] = a == b and a.count(b"\n") == 7
    fresh = rows_to_csv(run_experiment(cfg, emit=False).rows).encode()
    checks["in-memory rerun matches the file"] = fresh == a

    model = Model(cfg.build_spec(), seed=2)
    tr, te = load_data(cfg)
    train(model, tr, OptimConfig(lr=0.05, epochs=1, batch_size=32), seed=2)
    save_checkpoint(model, tmp_path / "m.npz")
    back = load_checkpoint(tmp_path / "m.npz")
    same = all(evaluate(back, te, s, 11, 2, 2) == evaluate(model, te, s, 11, 2, 2)
               for s in ("none", "spatial", "channel", "patch:2"))
    checks["checkpoint eval bit-identical"] = same

    imgs = np.random.default_rng(9).integers(0, 256, (20, 3, 32, 32), dtype=np.uint8)
    labels = np.arange(20) * 5 % 100
    write_records(tmp_path / "train.bin", imgs, labels, 2, 1, coarse=labels // 5)
    write_records(tmp_path / "test.bin", imgs[:4], labels[:4], 2, 1, coarse=labels[:4] // 5)
    raw, lab = read_records(tmp_path / "train.bin", 2, 1)
    loaded, _ = load_cifar(tmp_path, "cifar100-fine")
    checks["CIFAR records round-trip bit-exact"] = (raw.tobytes() == imgs.tobytes() and lab.tolist() == labels.tolist()
                                                    and to_uint8(loaded.images).tobytes() == imgs.tobytes())
    verdict(9, checks, "CSV, checkpoint and CIFAR loader", time.perf_counter() - started, None)
