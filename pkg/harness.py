'''
Experiment driver: configs, learning-rate schedule, the training loop with
checkpoints and metrics, and comparison of finished runs.
'''

import csv
import dataclasses
import json
import logging
import math
import os
import pickle
import struct
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from tqdm import tqdm

import config
from compensation import compensate, suggested_window
from datasets import DatasetSpec, augment_batch, load_dataset
from errors import ArgumentError, ConfigError, FormatError
from network import backward, build_preset, forward, sgd_step, softmax_cross_entropy
from normalizers import NORMALIZER_KINDS, BnConfig
from oracles import GradRatioReport, grad_ratio_diagnostic, make_replay_bundle, replay_exact_stats
from tensor_core import Rng

logger = logging.getLogger(__name__)

LR_SCHEDULES = ("cosine", "step")
BASE_COLUMNS = ("epoch", "iteration", "split", "loss", "accuracy", "window")
RATIO_COLUMNS = ("diag_ratio_mu_l1", "diag_ratio_nu_l1", "diag_ratio_mu_l2", "diag_ratio_nu_l2")
REPLAY_COLUMNS = ("diag_comp_err_mu", "diag_stale_err_mu", "diag_comp_err_nu", "diag_stale_err_nu")
EVAL_BATCH = 256
# settings that may change between a run and its resumption
RESUME_FREE_KEYS = ("out_dir", "progress")


@dataclass
class NormalizerSpec:
    kind: str = "bn"
    # None picks suggested_window(batch_size)
    window: Optional[int] = None
    burn_in_epochs: float = config.BURN_IN_EPOCHS
    eps: float = config.EPS
    momentum: float = config.RUNNING_DECAY
    taylor_backprop: bool = config.TAYLOR_BACKPROP


@dataclass
class AugmentSpec:
    flip: bool = False
    crop: bool = False


@dataclass
class DiagnosticsSpec:
    grad_ratio: bool = False
    probe_replay: bool = False
    # eval examples fed to the gradient-ratio diagnostic
    grad_ratio_batch: int = 8


@dataclass
class TrainConfig:
    """
    One experiment. Loaded from JSON with load_config; unknown keys are errors.
    """

    name: str = "run"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: str = "tiny-cnn"
    normalizer: NormalizerSpec = field(default_factory=NormalizerSpec)
    batch_size: int = 32
    epochs: int = 1
    lr: float = config.BASE_LR
    lr_schedule: str = config.LR_SCHEDULE
    # epochs at which the step schedule decays
    milestones: tuple = ()
    momentum: float = config.MOMENTUM
    weight_decay: float = config.WEIGHT_DECAY
    seed: int = 0
    out_dir: str = "runs/run"
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    diagnostics: DiagnosticsSpec = field(default_factory=DiagnosticsSpec)
    progress: bool = True
    log_wall_time: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ArgumentError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ArgumentError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ArgumentError(f"lr must be positive, got {self.lr}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ArgumentError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.normalizer.kind not in NORMALIZER_KINDS:
            raise ArgumentError(f"unknown normalizer kind {self.normalizer.kind!r}")
        self.milestones = tuple(self.milestones)

    @property
    def window(self):
        if self.normalizer.kind == "bn":
            return 1
        return self.normalizer.window or suggested_window(self.batch_size)

    def to_dict(self):
        return dataclasses.asdict(self)


def _from_dict(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        nested = NESTED_SECTIONS.get(key) if cls is TrainConfig else None
        kwargs[key] = _from_dict(nested, value, f"{where}.{key}") if nested else value
    return cls(**kwargs)


NESTED_SECTIONS = {
    "dataset": DatasetSpec,
    "normalizer": NormalizerSpec,
    "augment": AugmentSpec,
    "diagnostics": DiagnosticsSpec,
}


def config_from_dict(data):
    return _from_dict(TrainConfig, data, "config")


def load_config(path):
    '''Read a JSON experiment config.'''
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON ({e})") from e
    return config_from_dict(data)


@dataclass
class MetricsRow:
    epoch: int
    iteration: int
    split: str
    loss: float
    accuracy: float
    window: int
    wall_time: float = 0.0
    diag: dict = field(default_factory=dict)


def lr_at(schedule, base_lr, batch_size, step, total_steps, milestones=()):
    """
    Learning rate at a given optimizer step.

    The base rate is scaled linearly by batch_size / 32. Cosine decays it to
    zero at total_steps; step multiplies by 0.1 at every milestone passed
    (milestones in steps).
    """
    if total_steps < 1:
        raise ArgumentError(f"total_steps must be >= 1, got {total_steps}")
    scaled = base_lr * batch_size / config.LR_REFERENCE_BATCH
    if schedule == "cosine":
        return scaled * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
    if schedule == "step":
        return scaled * config.STEP_DECAY_FACTOR ** sum(step >= m for m in milestones)
    raise ArgumentError(f"unknown lr schedule {schedule!r}")


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.{config.FLOAT_DIGITS}g}"
    if value is None:
        return ""
    return str(value)


def metrics_columns(cfg):
    columns = list(BASE_COLUMNS)
    if cfg.log_wall_time:
        columns.append("wall_time")
    if cfg.diagnostics.grad_ratio:
        columns.extend(RATIO_COLUMNS)
    if cfg.diagnostics.probe_replay:
        columns.extend(REPLAY_COLUMNS)
    return columns


def write_metrics(path, rows, columns):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            values = dataclasses.asdict(row)
            values.update(row.diag)
            writer.writerow([_fmt(values.get(c)) for c in columns])


def read_metrics(path):
    with open(path, "r", newline="") as f:
        return list(csv.DictReader(f))


def save_checkpoint(path, payload):
    '''Magic header, little-endian version, then a pickle payload; written atomically.'''
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(config.CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", config.CHECKPOINT_VERSION))
        pickle.dump(payload, f, protocol=pickle.HIGHEST_PROTOCOL)
    os.replace(tmp, path)
    logger.debug("checkpoint written to %s", path)


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(len(config.CHECKPOINT_MAGIC))
        if magic != config.CHECKPOINT_MAGIC:
            raise FormatError(path, 0, "not a checkpoint (bad magic)")
        raw = f.read(4)
        if len(raw) < 4:
            raise FormatError(path, len(magic), "truncated checkpoint header")
        (version,) = struct.unpack("<I", raw)
        if version != config.CHECKPOINT_VERSION:
            raise FormatError(path, len(magic), f"unsupported checkpoint version {version}")
        return pickle.load(f)


def evaluate(graph, dataset, batch_size=EVAL_BATCH):
    '''Mean loss and top-1 accuracy in eval mode; nothing is mutated.'''
    total_loss, correct = 0.0, 0
    for start in range(0, len(dataset), batch_size):
        images = dataset.images[start : start + batch_size]
        labels = dataset.labels[start : start + batch_size]
        logits, _ = forward(graph, images, "eval")
        loss, _ = softmax_cross_entropy(logits, labels)
        total_loss += loss * len(labels)
        correct += int((logits.argmax(axis=1) == labels).sum())
    return total_loss / len(dataset), correct / len(dataset)


class ReplayProbe:
    """
    Keeps replay bundles of the first normalizer's bound layer and measures
    how far compensated and stale statistics are from the exact ones.
    """

    def __init__(self, graph, window):
        self.layer = graph.normalizer_layers()[0]
        self.bound = self.layer - 1
        self.bundles = deque(maxlen=max(window - 1, 0))
        self.reset()

    def reset(self):
        self.errors = {c: [] for c in REPLAY_COLUMNS}

    def observe(self, graph, trace):
        state = graph.norm_states[self.layer]
        theta = graph.params[self.bound]["weight"]
        records = {r.iteration: r for r in state.records}
        for bundle in self.bundles:
            exact_mu, exact_nu = replay_exact_stats(bundle, theta)
            record = records.get(bundle.iteration)
            if record is None:
                continue
            self.errors["diag_stale_err_mu"].append(np.abs(record.mu - exact_mu).mean())
            self.errors["diag_stale_err_nu"].append(np.abs(record.nu - exact_nu).mean())
            if record.compensable:
                comp_mu, comp_nu = compensate(record, theta)
                self.errors["diag_comp_err_mu"].append(np.abs(comp_mu - exact_mu).mean())
                self.errors["diag_comp_err_nu"].append(np.abs(comp_nu - exact_nu).mean())
        self.bundles.appendleft(
            make_replay_bundle(trace.inputs[self.bound], graph.geometry(self.bound), theta, state.t)
        )

    def columns(self):
        return {c: float(np.mean(v)) if v else math.nan for c, v in self.errors.items()}


@dataclass
class StepBoundary:
    """
    Training state between two optimizer steps.

    Holds everything a step mutates: the data stream, parameters, velocity,
    normalizer state, the replay probe and the loop counters. restore() undoes
    a step that was cut short so a checkpoint always lands between steps.
    """

    counters: dict
    rng_state: dict
    params: dict
    velocity: dict
    norms: dict
    probe: Optional[tuple] = None

    @classmethod
    def capture(cls, graph, data_rng, probe, **counters):
        return cls(
            counters=counters,
            rng_state=data_rng.state,
            params={key: value.copy() for key, value in graph.parameters().items()},
            velocity=dict(graph.velocity),
            # running statistics are replaced, never written in place
            norms={l: (s.t, list(s.records), s.running_mean, s.running_var, s.running_updates)
                   for l, s in graph.norm_states.items()},
            probe=None if probe is None else (
                list(probe.bundles), probe.errors, {c: len(v) for c, v in probe.errors.items()}
            ),
        )

    def restore(self, graph, data_rng, probe):
        '''Put graph, stream and probe back; returns the loop counters.'''
        data_rng.state = self.rng_state
        for key, value in graph.parameters().items():
            value[...] = self.params[key]
        graph.velocity = dict(self.velocity)
        for l, (t, records, mean, var, updates) in self.norms.items():
            state = graph.norm_states[l]
            state.t, state.running_mean, state.running_var, state.running_updates = t, mean, var, updates
            state.records.clear()
            state.records.extend(records)
        if probe is not None:
            bundles, errors, lengths = self.probe
            probe.bundles.clear()
            probe.bundles.extend(bundles)
            probe.errors = errors
            for column, n in lengths.items():
                del errors[column][n:]
        return dict(self.counters)


def _check_resume_config(saved, cfg, path):
    current = cfg.to_dict()
    saved = saved or {}
    changed = sorted(k for k in set(current) | set(saved)
                     if k not in RESUME_FREE_KEYS and current.get(k) != saved.get(k))
    if changed:
        raise ConfigError(f"{path}: checkpoint was written under a different config (changed: {changed})")


@dataclass
class TrainResult:
    rows: list
    metrics_path: Path
    checkpoint_path: Path
    graph: object
    ratio_report: GradRatioReport
    completed: bool


def _grad_ratio_rows(graph, cfg, eval_set, epoch):
    batch = eval_set.images[: cfg.diagnostics.grad_ratio_batch]
    rows = []
    for l in graph.normalizer_layers():
        if any(r < l - 1 for r in graph.param_layers()):
            rows.append(grad_ratio_diagnostic(graph, batch, l, epoch=epoch, rng=Rng(cfg.seed + epoch)))
    return rows


def train(cfg, resume=None, max_steps=None):
    """
    Train a preset network and write metrics.csv, config.json and a checkpoint
    into cfg.out_dir.

    Each epoch draws a seeded permutation of the training set and drops the
    last partial batch. Normalizer iteration counters advance once per
    optimizer step. A train row and an eval row are emitted per epoch.

    Args:
        cfg: TrainConfig.
        resume: Checkpoint path to continue from.
        max_steps: Stop (with a checkpoint) after this many optimizer steps.

    Returns:
        TrainResult
    """
    resumed = None
    if resume is not None:
        resumed = load_checkpoint(resume)
        _check_resume_config(resumed.get("config"), cfg, resume)
    out_dir = Path(cfg.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"could not create output directory {out_dir}: {e}") from e
    metrics_path = out_dir / config.METRICS_FILENAME
    checkpoint_path = out_dir / config.CHECKPOINT_FILENAME
    with open(out_dir / config.CONFIG_FILENAME, "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)

    train_set, eval_set = load_dataset(cfg.dataset)
    bs = cfg.batch_size
    steps_per_epoch = len(train_set) // bs
    if steps_per_epoch < 1:
        raise ArgumentError(f"{len(train_set)} training examples do not fill one batch of {bs}")
    total_steps = cfg.epochs * steps_per_epoch
    milestones = [m * steps_per_epoch for m in cfg.milestones]
    window = cfg.window
    norm = BnConfig(
        kind=cfg.normalizer.kind,
        eps=cfg.normalizer.eps,
        momentum=cfg.normalizer.momentum,
        window=window,
        burn_in=int(round(cfg.normalizer.burn_in_epochs * steps_per_epoch)),
        taylor_backprop=cfg.normalizer.taylor_backprop,
    )
    columns = metrics_columns(cfg)

    root = Rng(cfg.seed)
    data_rng = root.spawn(2)
    ckpt = {
        "graph": build_preset(cfg.model, train_set.image_shape, cfg.dataset.num_classes, norm, root.spawn(1)),
        "epoch": 0, "position": 0, "step": 0, "perm": None,
        "accum": [0.0, 0, 0], "rows": [], "ratio_rows": [], "elapsed": 0.0,
        "probe": None, "last_window": 1,
    }
    if resumed is not None:
        ckpt.update(resumed)
        data_rng.state = ckpt["rng_state"]
        logger.info("resumed from %s at step %d", resume, ckpt["step"])
    graph = ckpt["graph"]
    probe = ckpt["probe"]
    if probe is None and cfg.diagnostics.probe_replay and norm.kind != "bn":
        probe = ReplayProbe(graph, window)
    report = GradRatioReport(list(ckpt["ratio_rows"]))
    rows = list(ckpt["rows"])
    step, perm, position = ckpt["step"], ckpt["perm"], ckpt["position"]
    accum = list(ckpt["accum"])
    last_window = ckpt["last_window"]
    started = time.perf_counter() - ckpt["elapsed"]
    first_norm = graph.normalizer_layers()[0] if graph.norm_states else None

    def snapshot(epoch):
        save_checkpoint(checkpoint_path, {
            "config": cfg.to_dict(), "graph": graph, "rng_state": data_rng.state,
            "epoch": epoch, "position": position, "step": step, "perm": perm,
            "accum": accum, "rows": rows, "ratio_rows": report.rows,
            "elapsed": time.perf_counter() - started, "probe": probe, "last_window": last_window,
        })

    def boundary():
        return StepBoundary.capture(graph, data_rng, probe, epoch=epoch, step=step, position=position, perm=perm,
                                    accum=list(accum), last_window=last_window, rows=len(rows),
                                    ratio_rows=len(report.rows))

    epoch = ckpt["epoch"]
    at = boundary()
    try:
        while epoch < cfg.epochs:
            if perm is None:
                perm = data_rng.permutation(len(train_set))
                position = 0
            batches = tqdm(range(position, steps_per_epoch), desc=f"epoch {epoch + 1}/{cfg.epochs}",
                           disable=not cfg.progress, leave=False)
            for b in batches:
                at = boundary()
                idx = perm[b * bs : (b + 1) * bs]
                images = augment_batch(train_set.images[idx], data_rng, cfg.augment.flip, cfg.augment.crop)
                labels = train_set.labels[idx]
                lr = lr_at(cfg.lr_schedule, cfg.lr, bs, step, total_steps, milestones)
                logits, trace = forward(graph, images, "train")
                loss, grad_logits = softmax_cross_entropy(logits, labels)
                grads = backward(graph, trace, grad_logits)
                if probe is not None:
                    probe.observe(graph, trace)
                sgd_step(graph, grads, lr, cfg.momentum, cfg.weight_decay)
                if first_norm is not None:
                    last_window = trace.caches[first_norm].window
                accum[0] += loss * len(labels)
                accum[1] += int((logits.argmax(axis=1) == labels).sum())
                accum[2] += len(labels)
                step += 1
                position = b + 1
                if max_steps is not None and step >= max_steps and position < steps_per_epoch:
                    snapshot(epoch)
                    return TrainResult(rows, metrics_path, checkpoint_path, graph, report, False)

            elapsed = time.perf_counter() - started
            rows.append(MetricsRow(epoch + 1, step, "train", accum[0] / accum[2], accum[1] / accum[2],
                                   last_window, elapsed))
            eval_loss, eval_acc = evaluate(graph, eval_set)
            diag = {}
            if cfg.diagnostics.grad_ratio:
                epoch_rows = _grad_ratio_rows(graph, cfg, eval_set, epoch + 1)
                report.rows.extend(epoch_rows)
                diag.update(GradRatioReport(epoch_rows).columns())
            if probe is not None:
                diag.update(probe.columns())
                probe.reset()
            rows.append(MetricsRow(epoch + 1, step, "eval", eval_loss, eval_acc, last_window, elapsed, diag))
            logger.info("epoch %d: train loss %.4f acc %.4f | eval loss %.4f acc %.4f | window %d",
                        epoch + 1, rows[-2].loss, rows[-2].accuracy, eval_loss, eval_acc, last_window)
            write_metrics(metrics_path, rows, columns)
            epoch += 1
            perm, position, accum = None, 0, [0.0, 0, 0]
            snapshot(epoch)
            at = boundary()
            if max_steps is not None and step >= max_steps and epoch < cfg.epochs:
                return TrainResult(rows, metrics_path, checkpoint_path, graph, report, False)
    except KeyboardInterrupt:
        # roll back a half-finished step
        counters = at.restore(graph, data_rng, probe)
        epoch, step, position, perm = counters["epoch"], counters["step"], counters["position"], counters["perm"]
        accum, last_window = counters["accum"], counters["last_window"]
        del rows[counters["rows"] :]
        del report.rows[counters["ratio_rows"] :]
        logger.warning("interrupted, saving checkpoint at step %d to %s", step, checkpoint_path)
        snapshot(epoch)
        raise
    return TrainResult(rows, metrics_path, checkpoint_path, graph, report, True)


@dataclass
class SummaryRow:
    method: str
    epoch: int
    runs: int
    accuracy_mean: float
    accuracy_std: float
    loss_mean: float
    loss_std: float


def _mean_std(values):
    values = np.asarray(values, dtype=np.float64)
    std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return float(values.mean()), std


def compare(run_dirs, out_path=None):
    """
    Align the eval rows of finished runs by epoch and summarize each method
    (the run's config name) as mean and sample std over its runs.

    Args:
        run_dirs: At least two run directories.
        out_path: Optional CSV destination for the summary.

    Returns:
        List of SummaryRow ordered by method, then epoch
    """
    if len(run_dirs) < 2:
        raise ArgumentError("compare needs at least two runs")
    grouped = {}
    grid = None
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        with open(run_dir / config.CONFIG_FILENAME, "r") as f:
            name = json.load(f).get("name", run_dir.name)
        evals = [r for r in read_metrics(run_dir / config.METRICS_FILENAME) if r["split"] == "eval"]
        epochs = [int(r["epoch"]) for r in evals]
        if grid is None:
            grid = epochs
        elif epochs != grid:
            raise ArgumentError(f"{run_dir} has epochs {epochs}, expected {grid}")
        grouped.setdefault(name, []).append(evals)

    summary = []
    for method in sorted(grouped):
        runs = grouped[method]
        for i, epoch in enumerate(grid):
            acc_mean, acc_std = _mean_std([float(run[i]["accuracy"]) for run in runs])
            loss_mean, loss_std = _mean_std([float(run[i]["loss"]) for run in runs])
            summary.append(SummaryRow(method, epoch, len(runs), acc_mean, acc_std, loss_mean, loss_std))

    if out_path is not None:
        with open(out_path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow([fl.name for fl in dataclasses.fields(SummaryRow)])
            for row in summary:
                writer.writerow([_fmt(v) for v in dataclasses.astuple(row)])
    return summary
