"""Static figures for result CSVs (one PNG per experiment, written next to the CSV)."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .experiments import ResultRow, read_results  # noqa: E402


def _kind(row: ResultRow) -> str:
    keys = set(row.coords())
    if {"train", "test"} <= keys:
        return "scheme-matrix"
    if "mode" in keys:
        return "single-vs-multi"
    if "patch" in keys:
        return "patch-sweep"
    if "aug" in keys:
        return "aug-ablation"
    if row.top1 is None and "k" in keys and "percent" in keys:
        return "param-table"
    return "layer-sweep"


def _mean(values):
    values = [v for v in values if v is not None]
    return sum(values) / len(values) if values else float("nan")


def _pct(v):
    return 100 * v if v is not None else float("nan")


def plot_scheme_matrix(ax, rows):
    groups = defaultdict(list)
    for r in rows:
        c = r.coords()
        groups[(c["train"], c["test"])].append(r.top1)
    labels = [f"{tr}\n{te}" for tr, te in groups]
    ax.bar(range(len(groups)), [_pct(_mean(v)) for v in groups.values()], color="tab:blue")
    ax.set_xticks(range(len(groups)), labels, fontsize=8)
    ax.set_xlabel("train scheme / test scheme")
    ax.set_ylabel("top-1 (%)")


def plot_layer_sweep(ax, rows):
    curves = defaultdict(lambda: defaultdict(list))
    for r in rows:
        curves[r.mechanism][float(r.coords()["percent"])].append(r.top1)
    for mech, pts in curves.items():
        xs = sorted(pts)
        ax.plot(xs, [_pct(_mean(pts[x])) for x in xs], marker="o", label=mech)
    ax.set_xlabel("modified layers, counted from the last (%)")
    ax.set_ylabel("top-1 (%)")
    ax.legend()


def plot_single_vs_multi(ax, rows):
    curves = defaultdict(lambda: defaultdict(list))
    for r in rows:
        c = r.coords()
        curves[c["mode"]][int(c["layer"])].append(r.top1)
    for mode, pts in curves.items():
        xs = sorted(pts)
        label = "single (layer i)" if mode == "single" else "multi (layers i..last)"
        ax.plot(xs, [_pct(_mean(pts[x])) for x in xs], marker="o", label=label)
    ax.set_xlabel("layer index i (last = deepest countable layer)")
    ax.set_ylabel("top-1 (%)")
    ax.legend()


def plot_patch_sweep(ax, rows):
    curves = defaultdict(lambda: defaultdict(list))
    for r in rows:
        c = r.coords()
        curves[int(c["layer"])][int(c["patch"])].append(r.top1)
    for layer, pts in sorted(curves.items()):
        xs = sorted(pts)
        ax.plot(xs, [_pct(_mean(pts[x])) for x in xs], marker="o", label=f"layer {layer}")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("patch size")
    ax.set_ylabel("top-1 (%)")
    ax.legend()


def plot_aug_ablation(ax, rows):
    groups = defaultdict(list)
    for r in rows:
        groups[(r.mechanism, r.coords()["aug"])].append(r.top1)
    mechs = sorted({m for m, _ in groups})
    for j, aug in enumerate(("on", "off")):
        vals = [_pct(_mean(groups.get((m, aug), []))) for m in mechs]
        ax.bar([i + 0.4 * j for i in range(len(mechs))], vals, width=0.4, label=f"augmentation {aug}")
    ax.set_xticks([i + 0.2 for i in range(len(mechs))], mechs)
    ax.set_ylabel("top-1 (%)")
    ax.legend()


def plot_param_table(ax, rows):
    curves = defaultdict(dict)
    for r in rows:
        curves[r.model][float(r.coords()["percent"])] = r.params / 1e6
    for model, pts in curves.items():
        xs = sorted(pts)
        ax.plot(xs, [pts[x] for x in xs], marker="o", label=model)
    ax.set_yscale("log")
    ax.set_xlabel("layers replaced by GAP+FC (%)")
    ax.set_ylabel("parameters (M)")
    ax.legend(fontsize=8)


PLOTTERS = {
    "scheme-matrix": plot_scheme_matrix,
    "layer-sweep": plot_layer_sweep,
    "single-vs-multi": plot_single_vs_multi,
    "patch-sweep": plot_patch_sweep,
    "aug-ablation": plot_aug_ablation,
    "param-table": plot_param_table,
}


def render(rows: list[ResultRow], out_path) -> list[Path]:
    """Draw one PNG per (experiment id, kind) found in ``rows``; returns the written paths."""
    groups: dict[tuple[str, str], list[ResultRow]] = defaultdict(list)
    for r in rows:
        groups[(r.experiment_id, _kind(r))].append(r)
    out_path = Path(out_path)
    written = []
    for (eid, kind), group in groups.items():
        fig, ax = plt.subplots(figsize=(6.4, 4.2))
        PLOTTERS[kind](ax, group)
        ax.set_title(f"{kind}: {group[0].model}", fontsize=10)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        if len(groups) == 1:
            target = out_path
        else:
            target = out_path.with_name(f"{out_path.stem}-{eid}-{kind}{out_path.suffix}")
        fig.savefig(target, dpi=120)
        plt.close(fig)
        written.append(target)
    return written


def render_csv(csv_path, out_path=None) -> list[Path]:
    """Figure(s) for a results CSV, saved beside it as ``<name>.png`` unless ``out_path`` is given."""
    csv_path = Path(csv_path)
    rows = read_results(csv_path)
    if not rows:
        return []
    return render(rows, out_path or csv_path.with_suffix(".png"))
