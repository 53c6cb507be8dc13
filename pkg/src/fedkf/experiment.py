"""Experiment commands: partition, run, report and bound checking.

A run directory looks like::

    <output_dir>/
        resolved_config.yaml
        partition.json
        seed_<s>/records.jsonl
        seed_<s>/checkpoints/round_<t>/{manifest.json,weights.bin}
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig, dump_config, load_config
from .data import (
    DatasetSource,
    load_dataset,
    partition_dirichlet,
    read_manifest,
    shards_from_manifest,
    subsample_per_class,
    write_manifest,
)
from .errors import ValidationError
from .metrics import AccuracyProfile, check_afl_bounds
from .server import RoundRecord, read_records, run_training

log = logging.getLogger(__name__)

RESOLVED_CONFIG = "resolved_config.yaml"
MANIFEST = "partition.json"


def build_source(config: ExperimentConfig) -> DatasetSource:
    ds = config.dataset
    if ds.name == "synthetic":
        return load_dataset(
            "synthetic",
            num_classes=ds.num_classes,
            samples_per_class=ds.samples_per_class,
            shape=ds.shape,
            separation=ds.separation,
            seed=ds.synthetic_seed,
        )
    if ds.name == "emnist":
        return load_dataset("emnist", ds.data_dir, split=ds.emnist_split)
    return load_dataset(ds.name, ds.data_dir)


def build_shards(config: ExperimentConfig, manifest_path=None):
    source = build_source(config)
    if manifest_path is not None and Path(manifest_path).exists():
        sub = subsample_per_class(source, config.partition.subsample_fraction, config.partition.seed)
        return shards_from_manifest(sub, read_manifest(manifest_path))
    return partition_dirichlet(source, config.partition)


def cmd_partition(config: ExperimentConfig, out=None) -> Path:
    """Partition the configured dataset and write the manifest."""
    source = build_source(config)
    shards = partition_dirichlet(source, config.partition)
    path = Path(out) if out is not None else Path(config.output_dir) / MANIFEST
    sub = subsample_per_class(source, config.partition.subsample_fraction, config.partition.seed)
    write_manifest(path, sub, config.partition, shards)
    return path


def cmd_run(config: ExperimentConfig, resume: bool = False) -> Path:
    """Run every configured seed; returns the run directory."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = out / RESOLVED_CONFIG
    if resume and resolved.exists():
        previous = load_config(resolved)
        if previous.to_dict() != config.to_dict():
            raise ValidationError(f"cannot resume {out}: configuration differs from {resolved}")
    dump_config(config, resolved)
    manifest = out / MANIFEST
    if not manifest.exists():
        cmd_partition(config, manifest)
    shards = build_shards(config, manifest)
    for seed in config.seeds:
        run_training(config, shards, seed, run_dir=out / f"seed_{seed}", resume=resume)
    return out


# --------------------------------------------------------------------------
# Reporting


@dataclass
class RunSummary:
    label: str
    run_dir: Path
    seeds: list[int]
    final: dict[str, np.ndarray]
    curves: dict[str, np.ndarray]
    rounds: np.ndarray

    def mean_std(self, metric: str) -> tuple[float, float]:
        v = self.final[metric]
        return float(v.mean()), float(v.std())


def load_run(run_dir) -> tuple[ExperimentConfig, dict[int, list[RoundRecord]]]:
    run_dir = Path(run_dir)
    cfg_path = run_dir / RESOLVED_CONFIG
    if not cfg_path.exists():
        raise ValidationError(f"{run_dir} has no {RESOLVED_CONFIG}; is it a run directory?")
    config = load_config(cfg_path)
    runs = {}
    for seed_dir in sorted(run_dir.glob("seed_*")):
        recs = read_records(seed_dir / "records.jsonl")
        if recs:
            runs[int(seed_dir.name[5:])] = recs
    if not runs:
        raise ValidationError(f"{run_dir} contains no completed records")
    return config, runs


def summarize_runs(run_dirs: Sequence) -> list[RunSummary]:
    """Pool seeds of each run directory; refuse directories with different setups."""
    loaded = [(Path(d), *load_run(d)) for d in run_dirs]
    if not loaded:
        raise ValidationError("no run directories given")
    key = loaded[0][1].comparison_key()
    for d, cfg, _ in loaded[1:]:
        if cfg.comparison_key() != key:
            raise ValidationError(f"refusing to pool {d} with {loaded[0][0]}: experiment settings differ")
    summaries = []
    for d, cfg, runs in loaded:
        lengths = {len(r) for r in runs.values()}
        if len(lengths) != 1:
            raise ValidationError(f"{d}: seeds have different numbers of records")
        seeds = sorted(runs)
        final = {m: np.array([getattr(runs[s][-1], m) for s in seeds]) for m in ("amp", "fm", "wlp")}
        curves = {m: np.array([[getattr(r, m) for r in runs[s]] for s in seeds]) for m in ("amp", "fm", "wlp")}
        rounds = np.array([r.round for r in runs[seeds[0]]])
        summaries.append(RunSummary(cfg.algorithm.label, d, seeds, final, curves, rounds))
    return summaries


def fm_scale(summaries: Sequence[RunSummary]) -> int:
    """Exponent used to print FM: -3 when all values are below 1e-2, else -2."""
    worst = max(float(s.final["fm"].mean()) for s in summaries)
    return -3 if worst < 1e-2 else -2


def format_table(summaries: Sequence[RunSummary]) -> tuple[list[str], list[list[str]]]:
    exp = fm_scale(summaries)
    header = ["solution", "AMP (%)", f"FM (x10^{exp})", "WLP (%)", "seeds"]
    rows = []
    for s in summaries:
        a, fa = s.mean_std("amp")
        f, ff = s.mean_std("fm")
        w, fw = s.mean_std("wlp")
        rows.append(
            [
                s.label,
                f"{100 * a:.2f} ± {100 * fa:.2f}",
                f"{f / 10**exp:.3f} ± {ff / 10**exp:.3f}",
                f"{100 * w:.2f} ± {100 * fw:.2f}",
                str(len(s.seeds)),
            ]
        )
    return header, rows


def cmd_report(run_dirs: Sequence, out=None, plots: bool = True) -> str:
    """Write ``summary.csv``/``summary.txt`` (mean ± std over seeds) and plots."""
    summaries = summarize_runs(run_dirs)
    header, rows = format_table(summaries)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in [header] + rows]
    text = "\n".join(lines + ["(± is the standard deviation over seeds, final round)"]) + "\n"
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.txt").write_text(text)
        with open(out / "summary.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["solution", "amp_mean", "amp_std", "fm_mean", "fm_std", "wlp_mean", "wlp_std", "seeds"])
            for s in summaries:
                writer.writerow([s.label, *s.mean_std("amp"), *s.mean_std("fm"), *s.mean_std("wlp"), len(s.seeds)])
        if plots:
            plot_curves(summaries, out / "curves.png")
            manifest = Path(run_dirs[0]) / MANIFEST
            if manifest.exists():
                plot_heterogeneity(read_manifest(manifest), out / "heterogeneity.png")
    return text


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_curves(summaries: Sequence[RunSummary], path) -> Path:
    plt = _pyplot()
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    for ax, metric in zip(axes, ("amp", "fm", "wlp")):
        for s in summaries:
            mean = s.curves[metric].mean(axis=0)
            std = s.curves[metric].std(axis=0)
            ax.plot(s.rounds, mean, label=s.label)
            ax.fill_between(s.rounds, mean - std, mean + std, alpha=0.2)
        ax.set_xlabel("communication round")
        ax.set_title(metric.upper())
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_heterogeneity(manifest: dict, path) -> Path:
    """Scatter of (client, label) with marker area proportional to the sample count."""
    plt = _pyplot()
    counts = np.asarray(manifest["label_counts"], dtype=float)
    k, c = counts.shape
    xs, ys = np.meshgrid(np.arange(k), np.arange(c), indexing="ij")
    fig, ax = plt.subplots(figsize=(max(4, k * 0.35), max(3, c * 0.3)))
    ax.scatter(xs.ravel(), ys.ravel(), s=200 * counts.ravel() / max(counts.max(), 1), color="tab:red", alpha=0.7)
    ax.set_xlabel("client")
    ax.set_ylabel("label")
    ax.set_title(f"alpha = {manifest['spec']['alpha']}")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


# --------------------------------------------------------------------------
# Bound check over a saved profile


def load_profile(path) -> AccuracyProfile:
    """Read a profile from JSON (``per_client_acc`` [+ ``test_sizes``]) or the last record of a JSON-lines file."""
    path = Path(path)
    text = path.read_text().strip()
    if not text:
        raise ValidationError(f"{path} is empty")
    lines = text.splitlines()
    data = json.loads(lines[-1]) if path.suffix == ".jsonl" else json.loads(text)
    acc = data.get("per_client_acc")
    if acc is None:
        raise ValidationError(f"{path} has no per_client_acc")
    sizes = data.get("test_sizes") or [1] * len(acc)
    return AccuracyProfile(np.asarray(acc, dtype=float), np.asarray(sizes))


def cmd_check_bounds(profile_path, num_mixtures: int = 1000, seed: int = 0) -> dict:
    return check_afl_bounds(load_profile(profile_path), num_mixtures, seed).as_dict()
