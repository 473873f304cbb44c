"""Mean-teacher training loop with dual soft-paste batch assembly.

Each iteration assembles one paste draw per batch item, feeds the source
image and the two mixed images through the student and the clean target
image through the teacher, applies the mode's subset of losses, takes a
Nesterov SGD step under a polynomial learning-rate decay, then updates the
teacher as an exponential moving average of the student.

All randomness is counter-based: every draw is keyed by (run seed, stream,
iteration, batch item), so resuming from a checkpoint at step t reproduces
the uninterrupted trajectory bit for bit without serializing generator
state.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics, model
from .domains import AugmentConfig, DatasetItem, augment
from .errors import ConfigError, DataError, NumericalError
from .losses import (
    LOSS_CSV_COLUMNS,
    LossBreakdown,
    MmdConfig,
    consistency_loss,
    feature_alignment,
    seg_loss,
    seg_soft_loss,
)
from .paste import build_mask, mix
from .sampling import IterationSample, build_index, compute_stats, draw_iteration
from .tensor import Tensor, add, backward, mul_scalar, no_grad, select_item

log = logging.getLogger(__name__)

MODES = ("source_only", "mt", "single_paste", "dual_hard", "dual_soft", "dsp_full")

# counter-based rng stream ids
STREAM_INIT = 0
STREAM_SAMPLE = 1
STREAM_AUG = 2

# sub-draws inside the sampling stream
_DRAW_SOURCE = 0
_DRAW_TARGET = 1
_DRAW_PASTE = 2


def stream_rng(seed: int, stream: int, *counters: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, stream, *counters)))


@dataclass
class RunConfig:
    seed: int = 0
    iterations: int = 3000
    batch_size: int = 2
    beta: float = 0.8
    alpha: float = 0.99
    lambda_feature: float = 0.005
    k: int = 2
    K: int = 3
    lr_encoder: float = 2.5e-3
    lr_head: float = 2.5e-4
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment_color: bool = True
    augment_blur: bool = True
    jitter_strength: float = 0.25
    blur_sigma_max: float = 1.0
    mode: str = "dsp_full"
    eval_every: int = 500
    checkpoint_every: int = 1000

    def validate(self) -> None:
        checks = (
            (self.seed >= 0, "seed", ">= 0"),
            (self.iterations >= 1, "iterations", ">= 1"),
            (self.batch_size >= 1, "batch_size", ">= 1"),
            (0.0 <= self.beta <= 1.0, "beta", "in [0, 1]"),
            (0.0 <= self.alpha < 1.0, "alpha", "in [0, 1)"),
            (self.lambda_feature >= 0.0, "lambda_feature", ">= 0"),
            (0 <= self.k <= self.K, "k", "in [0, K]"),
            (self.K >= 1, "K", ">= 1"),
            (self.lr_encoder > 0.0, "lr_encoder", "> 0"),
            (self.lr_head > 0.0, "lr_head", "> 0"),
            (self.poly_power > 0.0, "poly_power", "> 0"),
            (0.0 <= self.momentum < 1.0, "momentum", "in [0, 1)"),
            (self.weight_decay >= 0.0, "weight_decay", ">= 0"),
            (self.jitter_strength >= 0.0, "jitter_strength", ">= 0"),
            (self.blur_sigma_max >= 0.0, "blur_sigma_max", ">= 0"),
            (self.mode in MODES, "mode", f"one of {MODES}"),
            (self.eval_every >= 0, "eval_every", ">= 0"),
            (self.checkpoint_every >= 0, "checkpoint_every", ">= 0"),
        )
        for ok, field, requirement in checks:
            if not ok:
                raise ConfigError(f"config field {field} must be {requirement}, got {getattr(self, field)}")

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            jitter=self.jitter_strength if self.augment_color else 0.0,
            blur_sigma_max=self.blur_sigma_max if self.augment_blur else 0.0,
        )


def config_to_json(cfg: RunConfig) -> str:
    return json.dumps(dataclasses.asdict(cfg), indent=1, sort_keys=True)


def config_from_json(text: str) -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object of named fields")
    known = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
    cfg = RunConfig(**raw)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return config_from_json(path.read_text(encoding="utf-8"))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(config_to_json(cfg).encode("utf-8")).hexdigest()[:12]


def lr_schedule(t: int, total: int, base_lr: float, power: float) -> float:
    if not 0 <= t <= total:
        raise ConfigError(f"lr_schedule: t={t} outside [0, {total}]")
    return base_lr * (1.0 - t / total) ** power


@dataclass
class TrainState:
    net: model.SegNet
    cfg: RunConfig
    step: int
    student: model.ParamSet
    teacher: model.ParamSet
    momentum: dict[str, np.ndarray]


def init_state(cfg: RunConfig, net: model.SegNet | None = None) -> TrainState:
    cfg.validate()
    net = net or model.SegNet()
    student = model.init_params(net, stream_rng(cfg.seed, STREAM_INIT))
    teacher = model.clone_params(student, requires_grad=False)
    momentum = {name: np.zeros_like(p.data) for name, p in student.items()}
    return TrainState(net=net, cfg=cfg, step=0, student=student, teacher=teacher, momentum=momentum)


def save_state(state: TrainState, path) -> None:
    entries: dict[str, np.ndarray] = {}
    for name in sorted(state.student):
        entries[f"student/{name}"] = state.student[name].data
    for name in sorted(state.teacher):
        entries[f"teacher/{name}"] = state.teacher[name].data
    for name in sorted(state.momentum):
        entries[f"momentum/{name}"] = state.momentum[name]
    entries["trainer/step"] = np.asarray(float(state.step))
    model.save_checkpoint(path, state.net.class_count, state.net.feature_width, entries)


def load_state(path, cfg: RunConfig) -> TrainState:
    class_count, feature_width, entries = model.load_checkpoint(path)
    net = model.SegNet(class_count=class_count, feature_width=feature_width)
    student: model.ParamSet = {}
    teacher: model.ParamSet = {}
    momentum: dict[str, np.ndarray] = {}
    for key, arr in entries.items():
        group, _, name = key.partition("/")
        if group == "student":
            student[name] = Tensor(arr, requires_grad=True)
        elif group == "teacher":
            teacher[name] = Tensor(arr, requires_grad=False)
        elif group == "momentum":
            momentum[name] = arr
    if "trainer/step" not in entries:
        raise DataError(f"checkpoint {path}: missing trainer/step entry")
    if student.keys() != teacher.keys() or student.keys() != momentum.keys():
        raise DataError(f"checkpoint {path}: student/teacher/momentum name sets differ")
    step = int(entries["trainer/step"][()])
    return TrainState(net=net, cfg=cfg, step=step, student=student, teacher=teacher, momentum=momentum)


@dataclass
class BatchItem:
    x_s: np.ndarray
    y_s: np.ndarray
    x_t: np.ndarray | None
    sample: IterationSample | None
    aug_seeds: tuple  # one SeedSequence per student stream: x_s, x_ps, x_pt


def _mode_needs(mode: str) -> tuple[bool, bool]:
    """(needs target stream, needs paste draw)"""
    return mode != "source_only", mode in ("single_paste", "dual_hard", "dual_soft", "dsp_full")


def effective_beta(cfg: RunConfig) -> float:
    # single_paste is the hard DACS-style baseline; dual_hard pins the endpoint
    return 1.0 if cfg.mode in ("single_paste", "dual_hard") else cfg.beta


def effective_k(cfg: RunConfig) -> int:
    return 0 if cfg.mode == "single_paste" else cfg.k


def assemble_batch(
    cfg: RunConfig,
    index,
    source: Sequence[DatasetItem],
    target: Sequence[DatasetItem],
    step: int,
) -> list[BatchItem]:
    needs_target, needs_paste = _mode_needs(cfg.mode)
    if needs_target and not target:
        raise DataError("assemble_batch: target split is empty")
    if not source:
        raise DataError("assemble_batch: source split is empty")
    items = []
    for i in range(cfg.batch_size):
        rng_s = stream_rng(cfg.seed, STREAM_SAMPLE, step, i, _DRAW_SOURCE)
        src = source[int(rng_s.integers(len(source)))]
        if src.label is None:
            raise DataError(f"assemble_batch: source item {src.item_id} has no label")
        x_t = None
        if needs_target:
            rng_t = stream_rng(cfg.seed, STREAM_SAMPLE, step, i, _DRAW_TARGET)
            x_t = target[int(rng_t.integers(len(target)))].image
        sample = None
        if needs_paste:
            rng_p = stream_rng(cfg.seed, STREAM_SAMPLE, step, i, _DRAW_PASTE)
            sample = draw_iteration(index, source, effective_k(cfg), rng_p)
        aug_seeds = tuple(np.random.SeedSequence((cfg.seed, STREAM_AUG, step, i, j)) for j in range(3))
        items.append(BatchItem(x_s=src.image, y_s=src.label, x_t=x_t, sample=sample, aug_seeds=aug_seeds))
    return items


def pseudo_label(net: model.SegNet, teacher: model.ParamSet, x_t: np.ndarray) -> np.ndarray:
    """Per-pixel argmax of the teacher's class scores; ties take the smaller id."""
    _, log_probs = model.predict(net, teacher, x_t)
    return np.argmax(log_probs.data, axis=0).astype(np.uint8)


def _as_input(image: np.ndarray) -> Tensor:
    return Tensor(np.asarray(image, dtype=np.float64).transpose(2, 0, 1)[None])


def _student_forward(state: TrainState, image: np.ndarray) -> tuple[Tensor, Tensor]:
    return model.forward_batch(state.net, state.student, _as_input(image))


def train_step(state: TrainState, batch: list[BatchItem]) -> LossBreakdown:
    """One optimizer step over the batch; mutates state and returns the losses."""
    cfg = state.cfg
    aug_cfg = cfg.augment_config()
    beta = effective_beta(cfg)
    mmd_cfg = MmdConfig()
    use_paste_losses = cfg.mode in ("dual_hard", "dual_soft", "dsp_full")
    use_mmd = cfg.mode == "dsp_full" and cfg.lambda_feature > 0.0

    def maybe_augment(image: np.ndarray, seed) -> np.ndarray:
        if aug_cfg.jitter == 0.0 and aug_cfg.blur_sigma_max == 0.0:
            return np.asarray(image, dtype=np.float64)
        return augment(image, seed, aug_cfg)

    terms = {name: Tensor(0.0) for name in ("seg", "seg_soft", "cons", "paste_mmd", "global_mmd")}

    def accumulate(name: str, value: Tensor) -> None:
        terms[name] = add(terms[name], mul_scalar(value, 1.0 / cfg.batch_size))

    for item in batch:
        x_s_aug = maybe_augment(item.x_s, item.aug_seeds[0])
        _, lp_s = _student_forward(state, x_s_aug)
        accumulate("seg", seg_loss(lp_s, item.y_s[None]))

        if cfg.mode == "source_only":
            continue
        pseudo = pseudo_label(state.net, state.teacher, item.x_t)

        if cfg.mode == "mt":
            x_t_aug = maybe_augment(item.x_t, item.aug_seeds[2])
            _, lp_pt = _student_forward(state, x_t_aug)
            # empty paste mask: the consistency term is a plain CE against
            # the pseudo-label
            accumulate("cons", seg_loss(lp_pt, pseudo[None]))
            continue

        mask, comp = build_mask(item.sample, beta)
        mixed = mix(item.x_s, item.x_t, mask, comp, item.y_s, pseudo)

        x_pt_aug = maybe_augment(mixed.x_pt, item.aug_seeds[2])
        f_pt, lp_pt = _student_forward(state, x_pt_aug)
        accumulate("cons", consistency_loss(lp_pt, comp.label[None], pseudo[None], mask))

        if use_paste_losses:
            x_ps_aug = maybe_augment(mixed.x_ps, item.aug_seeds[1])
            f_ps, lp_ps = _student_forward(state, x_ps_aug)
            accumulate("seg_soft", seg_soft_loss(lp_ps, comp.label[None], item.y_s[None], mask))
            if use_mmd:
                paste_term, global_term = feature_alignment(
                    select_item(f_ps, 0), select_item(f_pt, 0), mask, mmd_cfg
                )
                accumulate("paste_mmd", paste_term)
                accumulate("global_mmd", global_term)

    total = add(
        add(add(terms["seg"], terms["seg_soft"]), terms["cons"]),
        mul_scalar(add(terms["paste_mmd"], terms["global_mmd"]), cfg.lambda_feature),
    )
    for name, tensor in list(terms.items()) + [("total", total)]:
        if not np.isfinite(tensor.data):
            raise NumericalError(f"non-finite {name} loss at iteration {state.step}")

    param_names = sorted(state.student)
    backward(total, params=[state.student[n] for n in param_names])

    decay = (1.0 - state.step / cfg.iterations) ** cfg.poly_power
    for name in param_names:
        p = state.student[name]
        lr = (cfg.lr_head if name.startswith("head.") else cfg.lr_encoder) * decay
        g = p.grad + cfg.weight_decay * p.data
        v = state.momentum[name]
        v *= cfg.momentum
        v += g
        p.data -= lr * (g + cfg.momentum * v)

    model.ema_update(state.teacher, state.student, cfg.alpha)
    state.step += 1

    breakdown = LossBreakdown(
        seg=float(terms["seg"].data),
        seg_soft=float(terms["seg_soft"].data),
        cons=float(terms["cons"].data),
        paste_mmd=float(terms["paste_mmd"].data),
        global_mmd=float(terms["global_mmd"].data),
        total=float(total.data),
        lambda_feature=cfg.lambda_feature,
    )
    return breakdown


MIOU_CSV_COLUMNS = ("iteration", "miou")


@dataclass
class TrainResult:
    state: TrainState
    report: "metrics.Report"
    out_dir: Path
    loss_csv: Path
    checkpoint: Path


def train(
    cfg: RunConfig,
    source: Sequence[DatasetItem],
    target_train: Sequence[DatasetItem],
    target_eval: Sequence[DatasetItem],
    out_dir,
    resume=None,
    stop_after: int | None = None,
) -> TrainResult | TrainState:
    """Full training run; writes loss.csv, miou.csv, checkpoints and report files.

    stop_after simulates an interruption: the loop ends after that step
    without the final evaluation or report, returning the mid-run state.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    labels = [it.label for it in source if it.label is not None]
    if len(labels) != len(source):
        raise DataError("train: every source item needs a label")
    stats = compute_stats(labels, class_count=model.SegNet().class_count)
    index = build_index(stats, cfg.K)

    if resume is not None:
        state = load_state(resume, cfg)
        if state.step > cfg.iterations:
            raise ConfigError(
                f"resume checkpoint is at step {state.step}, beyond iterations={cfg.iterations}"
            )
    else:
        state = init_state(cfg)

    loss_csv = out_dir / "loss.csv"
    miou_csv = out_dir / "miou.csv"
    fresh = resume is None or not loss_csv.exists()
    class_count = state.net.class_count
    miou_columns = MIOU_CSV_COLUMNS + tuple(f"iou_{c}" for c in range(class_count))

    def eval_row(iteration: int) -> list[str]:
        report = metrics.evaluate(state.net, state.teacher, target_eval, cfg)
        row = [str(iteration), repr(report.miou)]
        row += [repr(v) if v is not None else "nan" for v in report.per_class_iou]
        return row

    with open(loss_csv, "w" if fresh else "a", encoding="utf-8", newline="") as loss_fh, open(
        miou_csv, "w" if fresh else "a", encoding="utf-8", newline=""
    ) as miou_fh:
        loss_writer = csv.writer(loss_fh, lineterminator="\n")
        miou_writer = csv.writer(miou_fh, lineterminator="\n")
        if fresh:
            loss_writer.writerow(LOSS_CSV_COLUMNS)
            miou_writer.writerow(miou_columns)

        for step in range(state.step, cfg.iterations):
            batch = assemble_batch(cfg, index, source, target_train, step)
            lr = lr_schedule(step, cfg.iterations, cfg.lr_encoder, cfg.poly_power)
            breakdown = train_step(state, batch)
            loss_writer.writerow(breakdown.row(step, lr))
            done = step + 1
            if cfg.eval_every and done % cfg.eval_every == 0 and done != cfg.iterations:
                miou_writer.writerow(eval_row(done))
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done != cfg.iterations:
                save_state(state, out_dir / f"checkpoint_{done:06d}.ckpt")
            if stop_after is not None and done >= stop_after:
                return state

        if cfg.eval_every:
            miou_writer.writerow(eval_row(cfg.iterations))

    checkpoint = out_dir / "checkpoint.ckpt"
    save_state(state, checkpoint)
    report = metrics.evaluate(state.net, state.teacher, target_eval, cfg)
    if miou_csv.exists():
        with open(miou_csv, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        report.series = [(int(r[0]), float(r[1])) for r in rows]
    metrics.write_report(report, out_dir)
    return TrainResult(state=state, report=report, out_dir=out_dir, loss_csv=loss_csv, checkpoint=checkpoint)
