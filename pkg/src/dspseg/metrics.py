"""Evaluation (per-class IoU / mIoU), ablation and sweep tables, and plots.

Confusion rows are ground truth, columns are predictions, ignore pixels
excluded.  Classes that never appear in either are excluded from the mIoU
mean and listed in the report.  Ablations run one full training per
(mode, seed) and summarize with the median over seeds; sweeps do the same
over beta or k values.  Plots are written as SVG with deterministic ids so
repeated runs produce identical bytes.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model
from .domains import CLASS_NAMES, IGNORE_LABEL, DatasetItem
from .errors import ConfigError, DataError

_SVG_SETTINGS = {"svg.hashsalt": "dspseg", "svg.fonttype": "none"}


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (C,C) int64, rows ground truth, columns prediction

    @classmethod
    def empty(cls, class_count: int) -> "ConfusionMatrix":
        return cls(np.zeros((class_count, class_count), dtype=np.int64))

    def add(self, truth: np.ndarray, prediction: np.ndarray) -> None:
        if truth.shape != prediction.shape:
            raise DataError(f"confusion add: shapes {truth.shape} vs {prediction.shape}")
        c = self.counts.shape[0]
        valid = truth != IGNORE_LABEL
        t = truth[valid].astype(np.int64)
        p = prediction[valid].astype(np.int64)
        if t.size and (t.max() >= c or p.max() >= c):
            raise DataError("confusion add: label or prediction out of class range")
        self.counts += np.bincount(t * c + p, minlength=c * c).reshape(c, c)

    def iou(self) -> tuple[list[float | None], list[int]]:
        """Per-class IoU with None for zero-union classes, plus the excluded ids."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - np.diag(self.counts)
        per_class: list[float | None] = []
        excluded: list[int] = []
        for c in range(self.counts.shape[0]):
            if union[c] == 0:
                per_class.append(None)
                excluded.append(c)
            else:
                per_class.append(float(tp[c] / union[c]))
        return per_class, excluded


@dataclass
class Report:
    per_class_iou: list[float | None]
    miou: float
    excluded: list[int]
    mode: str = ""
    seed: int = 0
    config_hash: str = ""
    series: list[tuple[int, float]] | None = None

    def to_json(self) -> str:
        raw = dataclasses.asdict(self)
        return json.dumps(raw, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Report":
        raw = json.loads(text)
        series = raw.get("series")
        if series is not None:
            series = [(int(i), float(v)) for i, v in series]
        return cls(
            per_class_iou=[None if v is None else float(v) for v in raw["per_class_iou"]],
            miou=float(raw["miou"]),
            excluded=[int(c) for c in raw["excluded"]],
            mode=raw.get("mode", ""),
            seed=int(raw.get("seed", 0)),
            config_hash=raw.get("config_hash", ""),
            series=series,
        )


def evaluate(net: model.SegNet, params: model.ParamSet, items: Sequence[DatasetItem], cfg=None) -> Report:
    """mIoU of argmax predictions on a labeled split."""
    if not items:
        raise DataError("evaluate: empty eval split")
    cm = ConfusionMatrix.empty(net.class_count)
    for item in items:
        if item.label is None:
            raise DataError(f"evaluate: item {item.item_id} has no ground truth")
        _, log_probs = model.predict(net, params, item.image)
        cm.add(item.label, np.argmax(log_probs.data, axis=0))
    per_class, excluded = cm.iou()
    defined = [v for v in per_class if v is not None]
    if not defined:
        raise DataError("evaluate: every class has zero union")
    report = Report(per_class_iou=per_class, miou=float(np.mean(defined)), excluded=excluded)
    if cfg is not None:
        from .trainer import config_hash

        report.mode = cfg.mode
        report.seed = cfg.seed
        report.config_hash = config_hash(cfg)
    return report


def format_report(report: Report, names: Sequence[str] = CLASS_NAMES) -> str:
    lines = [f"mode {report.mode or '-'}  seed {report.seed}  config {report.config_hash or '-'}"]
    lines.append(f"{'class':>5}  {'name':<12} {'iou':>8}")
    for c, v in enumerate(report.per_class_iou):
        name = names[c] if c < len(names) else f"class{c}"
        lines.append(f"{c:>5}  {name:<12} {'--' if v is None else format(v, '8.4f')}")
    excluded = ", ".join(str(c) for c in report.excluded) if report.excluded else "none"
    lines.append(f"excluded (zero union): {excluded}")
    lines.append(f"miou {report.miou:.4f}")
    return "\n".join(lines) + "\n"


def write_report(report: Report, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out_dir / "report.txt").write_text(format_report(report), encoding="utf-8")
    return out_dir / "report.json"


def tail_mean_iou(report: Report, tail_classes: Sequence[int]) -> float:
    vals = [report.per_class_iou[c] for c in tail_classes]
    return float(np.mean([0.0 if v is None else v for v in vals]))


# ---------------------------------------------------------------------------
# ablation / sweep orchestration
# ---------------------------------------------------------------------------


@dataclass
class RunSummary:
    mode: str
    seed: int
    value: float  # swept value; for ablations this is the effective beta
    report: Report
    run_dir: Path


def _beta_tag(beta: float) -> str:
    return format(beta, "g")


def run_dir_name(cfg) -> str:
    from .trainer import effective_beta, effective_k

    return f"run_{cfg.mode}_beta{_beta_tag(effective_beta(cfg))}_k{effective_k(cfg)}_seed{cfg.seed}"


def _run_or_reuse(cfg, source, target_train, target_eval, out_root, reuse: bool):
    from .trainer import config_hash, train

    run_dir = Path(out_root) / run_dir_name(cfg)
    report_path = run_dir / "report.json"
    if reuse and report_path.is_file():
        report = Report.from_json(report_path.read_text(encoding="utf-8"))
        if report.config_hash == config_hash(cfg):
            return report, run_dir
    result = train(cfg, source, target_train, target_eval, run_dir)
    return result.report, run_dir


def ablate(
    cfg,
    modes: Sequence[str],
    seeds: Sequence[int],
    source,
    target_train,
    target_eval,
    out_root,
    reuse: bool = True,
) -> list[RunSummary]:
    """One full run per (mode, seed); writes ablation.csv and ablation.svg."""
    from .trainer import MODES, effective_beta

    if not modes or not seeds:
        raise ConfigError("ablate: need at least one mode and one seed")
    for mode in modes:
        if mode not in MODES:
            raise ConfigError(f"ablate: unknown mode {mode!r}, expected one of {MODES}")
    out_root = Path(out_root)
    summaries = []
    for mode in modes:
        for seed in seeds:
            rc = replace(cfg, mode=mode, seed=seed)
            report, run_dir = _run_or_reuse(rc, source, target_train, target_eval, out_root, reuse)
            summaries.append(RunSummary(mode, seed, effective_beta(rc), report, run_dir))
    _write_summary_csv(out_root / "ablation.csv", "mode", summaries, key=lambda s: s.mode, order=modes)
    _plot_ablation(out_root / "ablation.svg", modes, summaries)
    return summaries


def sweep(
    cfg,
    parameter: str,
    values: Sequence[float],
    seeds: Sequence[int],
    source,
    target_train,
    target_eval,
    out_root,
    reuse: bool = True,
) -> list[RunSummary]:
    """One run per (value, seed) of beta or k; writes CSV plus a line plot."""
    if parameter not in ("beta", "k"):
        raise ConfigError(f"sweep: parameter must be beta or k, got {parameter!r}")
    if not values or not seeds:
        raise ConfigError("sweep: need at least one value and one seed")
    out_root = Path(out_root)
    summaries = []
    for value in values:
        for seed in seeds:
            if parameter == "beta":
                rc = replace(cfg, beta=float(value), seed=seed)
            else:
                rc = replace(cfg, k=int(value), seed=seed)
            rc.validate()
            report, run_dir = _run_or_reuse(rc, source, target_train, target_eval, out_root, reuse)
            summaries.append(RunSummary(rc.mode, seed, float(value), report, run_dir))
    _write_summary_csv(
        out_root / f"sweep_{parameter}.csv", parameter, summaries, key=lambda s: s.value, order=values
    )
    _plot_sweep(out_root / f"sweep_{parameter}.svg", parameter, values, summaries)
    return summaries


def median_miou(summaries: Sequence[RunSummary], **match) -> float:
    vals = [s.report.miou for s in summaries if all(getattr(s, k) == v for k, v in match.items())]
    if not vals:
        raise ConfigError(f"median_miou: no runs match {match}")
    return float(np.median(vals))


def _write_summary_csv(path: Path, group_name: str, summaries, key, order) -> None:
    class_count = len(summaries[0].report.per_class_iou)
    columns = [group_name, "seed", "miou"] + [f"iou_{c}" for c in range(class_count)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for s in summaries:
            row = [key(s), s.seed, repr(s.report.miou)]
            row += ["nan" if v is None else repr(v) for v in s.report.per_class_iou]
            writer.writerow(row)
        for group in order:
            vals = [s.report.miou for s in summaries if key(s) == group]
            writer.writerow([group, "median", repr(float(np.median(vals)))] + [""] * class_count)


def _figure(width=6.0, height=4.0):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for k, v in _SVG_SETTINGS.items():
        plt.rcParams[k] = v
    return plt.figure(figsize=(width, height))


def save_figure(fig, path) -> Path:
    fig.savefig(path, format="svg", metadata={"Date": None})
    import matplotlib.pyplot as plt

    plt.close(fig)
    return Path(path)


def _plot_ablation(path: Path, modes, summaries) -> Path:
    fig = _figure()
    ax = fig.add_subplot(111)
    medians = [float(np.median([s.report.miou for s in summaries if s.mode == m])) for m in modes]
    ax.bar(range(len(modes)), medians, color="#4878d0")
    ax.set_xticks(range(len(modes)))
    ax.set_xticklabels(modes, rotation=20, ha="right")
    ax.set_ylabel("median mIoU")
    ax.set_title("ablation (median over seeds)")
    fig.tight_layout()
    return save_figure(fig, path)


def _plot_sweep(path: Path, parameter, values, summaries) -> Path:
    fig = _figure()
    ax = fig.add_subplot(111)
    xs = list(values)
    med = [float(np.median([s.report.miou for s in summaries if s.value == v])) for v in xs]
    ax.plot(xs, med, marker="o", color="#4878d0")
    for s in summaries:
        ax.plot([s.value], [s.report.miou], marker=".", color="#b0b0b0", linestyle="none")
    ax.set_xlabel(parameter)
    ax.set_ylabel("mIoU")
    ax.set_title(f"{parameter} sweep (median and per-seed points)")
    fig.tight_layout()
    return save_figure(fig, path)


# ---------------------------------------------------------------------------
# run-directory rendering (report subcommand)
# ---------------------------------------------------------------------------


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def render_run(run_dir) -> list[Path]:
    """Render loss and mIoU curves for a completed run directory."""
    run_dir = Path(run_dir)
    written = []
    loss_csv = run_dir / "loss.csv"
    if loss_csv.is_file():
        header, rows = _read_csv(loss_csv)
        steps = [int(r[0]) for r in rows]
        fig = _figure(7.0, 4.5)
        ax = fig.add_subplot(111)
        for col in ("seg", "seg_soft", "cons", "paste_mmd", "global_mmd", "total"):
            idx = header.index(col)
            series = [float(r[idx]) for r in rows]
            if any(v != 0.0 for v in series):
                ax.plot(steps, series, label=col, linewidth=0.9)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.set_title("training losses")
        ax.legend(fontsize=8)
        fig.tight_layout()
        written.append(save_figure(fig, run_dir / "loss_curves.svg"))
    miou_csv = run_dir / "miou.csv"
    if miou_csv.is_file():
        header, rows = _read_csv(miou_csv)
        if rows:
            steps = [int(r[0]) for r in rows]
            fig = _figure()
            ax = fig.add_subplot(111)
            ax.plot(steps, [float(r[1]) for r in rows], marker="o", color="#4878d0", label="mIoU")
            for c, name in enumerate(CLASS_NAMES):
                col = f"iou_{c}"
                if col in header:
                    idx = header.index(col)
                    ax.plot(
                        steps,
                        [float(r[idx]) for r in rows],
                        linewidth=0.7,
                        alpha=0.6,
                        label=name,
                    )
            ax.set_xlabel("iteration")
            ax.set_ylabel("IoU")
            ax.set_title("held-out target evaluation")
            ax.legend(fontsize=7, ncol=2)
            fig.tight_layout()
            written.append(save_figure(fig, run_dir / "miou_curve.svg"))
    if not written:
        raise DataError(f"render_run: no loss.csv or miou.csv under {run_dir}")
    return written
