"""Training schedule, training loop, evaluation and repeated experiments."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, LabelError, ShapeError
from .model import AcousticModel, ConditioningConfig, ModelConfig, build_model
from .nn.layers import log_softmax, softmax_cross_entropy
from .nn.optim import SGD

CONTINUE, DECAY, STOP = "continue", "decay", "stop"
RESULT_COLUMNS = ["sir_0", "sir_5", "sir_10", "sir_15", "sir_20", "sir_25", "clean_dev", "clean_eval"]
LOG_COLUMNS = ["epoch", "train_loss", "cv_loss", "lr", "decay_count", "action"]


@dataclass
class Schedule:
    initial_lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 1024
    max_epochs: int = 100
    decay_factor: float = 0.5
    min_improvement: float = 0.01
    patience: int = 3
    max_decays: int = 6


@dataclass
class TrainState:
    epoch: int = 0
    lr: float = 0.01
    decay_count: int = 0
    plateau_count: int = 0
    best_cv_loss: float = math.inf


def lr_schedule_step(state: TrainState, cv_loss: float, sched: Schedule = Schedule()) -> tuple[TrainState, str]:
    """Advance the plateau schedule by one epoch's cross-validation loss.

    Improvement is measured against the best loss seen so far (tracked even
    when the gain is below the threshold); the plateau counter restarts
    after every decay.
    """
    if not math.isfinite(cv_loss):
        raise ValueError(f"cv loss must be finite, got {cv_loss}")
    s = replace(state, epoch=state.epoch + 1)
    action = CONTINUE
    if s.best_cv_loss - cv_loss < sched.min_improvement:
        s.plateau_count += 1
    else:
        s.plateau_count = 0
    s.best_cv_loss = min(s.best_cv_loss, cv_loss)
    if s.plateau_count >= sched.patience:
        if s.decay_count >= sched.max_decays:
            action = STOP
        else:
            s.decay_count += 1
            s.lr = sched.initial_lr * sched.decay_factor**s.decay_count
            s.plateau_count = 0
            action = DECAY
    if s.epoch >= sched.max_epochs:
        action = STOP
    return s, action


def replay_schedule(cv_losses, sched: Schedule = Schedule(), initial_best: float = math.inf):
    """Feed a cv-loss sequence through the schedule; returns ``(lr, action)`` per epoch."""
    state = TrainState(lr=sched.initial_lr, best_cv_loss=initial_best)
    out = []
    for loss in cv_losses:
        state, action = lr_schedule_step(state, loss, sched)
        out.append((state.lr, action))
        if action == STOP:
            break
    return out


# --------------------------------------------------------------------------
# data


@dataclass
class LabeledFrameSet:
    """Context windows with target-speaker labels.

    ``speakers`` indexes rows of the embedding table passed alongside;
    ``sir_db`` is NaN for clean frames.
    """

    windows: np.ndarray
    labels: np.ndarray
    speakers: np.ndarray
    sir_db: np.ndarray | None = None
    utt_index: np.ndarray | None = None

    def __post_init__(self):
        n = self.windows.shape[0]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.speakers = np.asarray(self.speakers, dtype=np.int64)
        if self.sir_db is None:
            self.sir_db = np.full(n, np.nan)
        self.sir_db = np.asarray(self.sir_db, dtype=np.float64)
        if self.utt_index is None:
            self.utt_index = np.zeros(n, dtype=np.int64)
        for name in ("labels", "speakers", "sir_db", "utt_index"):
            if getattr(self, name).shape != (n,):
                raise ShapeError(f"{name} must have one entry per window ({n})")

    def __len__(self):
        return self.windows.shape[0]

    def subset(self, mask) -> "LabeledFrameSet":
        return LabeledFrameSet(
            self.windows[mask], self.labels[mask], self.speakers[mask], self.sir_db[mask], self.utt_index[mask]
        )

    @staticmethod
    def concat(sets) -> "LabeledFrameSet":
        sets = list(sets)
        return LabeledFrameSet(
            np.concatenate([s.windows for s in sets]),
            np.concatenate([s.labels for s in sets]),
            np.concatenate([s.speakers for s in sets]),
            np.concatenate([s.sir_db for s in sets]),
            np.concatenate([s.utt_index for s in sets]),
        )


def condition_name(sir_db: float) -> str:
    return "clean" if np.isnan(sir_db) else f"sir_{sir_db:g}"


def split_by_utterance(frames: LabeledFrameSet, cv_fraction: float = 0.1, seed: int = 0):
    """Hold out whole utterances for cross-validation."""
    utts = np.unique(frames.utt_index)
    if len(utts) < 2:
        raise DataError("need at least 2 utterances to split train/cv")
    rng = np.random.default_rng(seed)
    n_cv = min(max(1, int(round(cv_fraction * len(utts)))), len(utts) - 1)
    cv_utts = rng.permutation(utts)[:n_cv]
    is_cv = np.isin(frames.utt_index, cv_utts)
    return frames.subset(~is_cv), frames.subset(is_cv)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    log: list[dict]
    initial_cv_loss: float
    best_cv_loss: float
    final_state: TrainState
    best_weights: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.log:
            w.writerow([r["epoch"], repr(r["train_loss"]), repr(r["cv_loss"]), repr(r["lr"]), r["decay_count"], r["action"]])
        return buf.getvalue()


def _batch_embeddings(model: AcousticModel, embeddings, speakers):
    if not model.conditioned:
        return None
    return embeddings[speakers]


def dataset_loss(model: AcousticModel, frames: LabeledFrameSet, embeddings, batch_size: int = 4096) -> float:
    total = 0.0
    for i in range(0, len(frames), batch_size):
        sl = slice(i, i + batch_size)
        z = _batch_embeddings(model, embeddings, frames.speakers[sl])
        logits = model.forward(frames.windows[sl], z, train=False)
        total += softmax_cross_entropy(logits, frames.labels[sl])[0] * logits.shape[0]
    model._cache = None
    return total / len(frames)


def _warm_batchnorm(model, frames, embeddings, batch_size, rng):
    """One train-mode forward so eval-mode statistics exist before epoch 0."""
    idx = np.sort(rng.permutation(len(frames))[:batch_size])
    z = _batch_embeddings(model, embeddings, frames.speakers[idx])
    model.forward(frames.windows[idx], z, train=True)
    model._cache = None


def train(
    model: AcousticModel,
    train_set: LabeledFrameSet,
    cv_set: LabeledFrameSet,
    embeddings: np.ndarray | None,
    schedule: Schedule = Schedule(),
    seed: int = 0,
    log_fn=None,
) -> TrainResult:
    """Minibatch SGD with the plateau schedule; restores the best-cv weights at the end."""
    if len(train_set) == 0 or len(cv_set) == 0:
        raise DataError("train and cv sets must be non-empty")
    k = model.mc.num_classes
    for name, fs in (("train", train_set), ("cv", cv_set)):
        if fs.labels.min() < 0 or fs.labels.max() >= k:
            raise LabelError(f"{name} labels outside [0, {k})")
    if model.conditioned and embeddings is None:
        raise DataError("conditioned model needs an embedding table")
    if embeddings is not None:
        embeddings = np.asarray(embeddings, dtype=model.dtype)

    rng = np.random.default_rng(seed)
    _warm_batchnorm(model, train_set, embeddings, schedule.batch_size, rng)
    initial = dataset_loss(model, cv_set, embeddings)
    state = TrainState(lr=schedule.initial_lr, best_cv_loss=initial)
    opt = SGD(model, schedule.initial_lr, schedule.momentum)
    best_loss, best_weights = initial, {k: v.copy() for k, v in model.state_dict().items()}
    log = []
    n = len(train_set)
    while True:
        order = rng.permutation(n)
        tot = 0.0
        for i in range(0, n, schedule.batch_size):
            idx = order[i : i + schedule.batch_size]
            if idx.size < 2:
                continue
            z = _batch_embeddings(model, embeddings, train_set.speakers[idx])
            logits = model.forward(train_set.windows[idx], z, train=True)
            loss, dlogits = softmax_cross_entropy(logits, train_set.labels[idx])
            model.backward(dlogits)
            opt.lr = state.lr
            opt.step()
            tot += loss * idx.size
        train_loss = tot / n
        cv_loss = dataset_loss(model, cv_set, embeddings)
        if cv_loss < best_loss:
            best_loss = cv_loss
            best_weights = {k: v.copy() for k, v in model.state_dict().items()}
        state, action = lr_schedule_step(state, cv_loss, schedule)
        rec = dict(
            epoch=state.epoch, train_loss=float(train_loss), cv_loss=float(cv_loss),
            lr=state.lr, decay_count=state.decay_count, action=action,
        )
        log.append(rec)
        if log_fn is not None:
            log_fn(rec)
        if action == STOP:
            break
    model.load_state_dict(best_weights)
    return TrainResult(log, initial, best_loss, state, best_weights)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class Metrics:
    cross_entropy: float
    accuracy: float
    frames: int

    @property
    def error(self) -> float:
        return 1.0 - self.accuracy


def evaluate(model: AcousticModel, frames: LabeledFrameSet, embeddings, batch_size: int = 4096) -> dict[str, Metrics]:
    """Cross-entropy and frame accuracy per condition (``clean`` or ``sir_<dB>``)."""
    k = model.mc.num_classes
    if len(frames) and (frames.labels.min() < 0 or frames.labels.max() >= k):
        raise LabelError(f"labels outside [0, {k})")
    if embeddings is not None:
        embeddings = np.asarray(embeddings, dtype=model.dtype)
    nll = np.empty(len(frames))
    hit = np.empty(len(frames), dtype=bool)
    for i in range(0, len(frames), batch_size):
        sl = slice(i, i + batch_size)
        z = _batch_embeddings(model, embeddings, frames.speakers[sl])
        logp = log_softmax(model.forward(frames.windows[sl], z, train=False))
        lab = frames.labels[sl]
        nll[sl] = -logp[np.arange(lab.size), lab]
        hit[sl] = logp.argmax(axis=1) == lab
    model._cache = None
    names = np.array([condition_name(s) for s in frames.sir_db], dtype=object)
    out = {}
    for name in sorted(set(names), key=_condition_order):
        m = names == name
        out[str(name)] = Metrics(float(nll[m].mean()), float(hit[m].mean()), int(m.sum()))
    return out


def _condition_order(name):
    return (1, 0.0) if name == "clean" else (0, float(name[4:]))


# --------------------------------------------------------------------------
# repeated experiments


VARIANTS: dict[str, ConditioningConfig] = {
    "baseline": ConditioningConfig(fusion="none"),
    "at": ConditioningConfig(fusion="affine"),
    "at_bias0": ConditioningConfig(fusion="affine", bias_mode="frozen_zero"),
    "at_scale1": ConditioningConfig(fusion="affine", scale_mode="frozen_one"),
    "at_sigmoid": ConditioningConfig(fusion="affine", scale_mode="sigmoid"),
    "at_tanh": ConditioningConfig(fusion="affine", scale_mode="tanh"),
    "at_block1": ConditioningConfig(fusion="affine", at_blocks=(1,)),
    "at_block1-2": ConditioningConfig(fusion="affine", at_blocks=(1, 2)),
    "at_block1-3": ConditioningConfig(fusion="affine", at_blocks=(1, 2, 3)),
    "at_block4": ConditioningConfig(fusion="affine", at_blocks=(4,)),
    "input_bias": ConditioningConfig(fusion="input_bias"),
    "middle_fusion": ConditioningConfig(fusion="middle_fusion"),
}


@dataclass
class ExperimentData:
    train: LabeledFrameSet
    cv: LabeledFrameSet
    tests: dict[str, LabeledFrameSet]
    embeddings: np.ndarray


@dataclass
class ResultsTable:
    """Rows keyed ``<variant>/run<i>`` and ``<variant>/mean``; values are frame accuracy in percent."""

    rows: dict[str, dict[str, float]] = field(default_factory=dict)
    logs: dict[str, TrainResult] = field(default_factory=dict, repr=False)

    def mean(self, variant: str) -> dict[str, float]:
        return self.rows[f"{variant}/mean"]

    def to_csv(self, provenance: str | None = None) -> str:
        buf = io.StringIO()
        if provenance:
            for line in provenance.splitlines():
                buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant"] + RESULT_COLUMNS)
        for name, row in self.rows.items():
            w.writerow([name] + [_fmt(row.get(c)) for c in RESULT_COLUMNS])
        return buf.getvalue()


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


def metrics_row(metrics_by_test: dict[str, dict[str, Metrics]]) -> dict[str, float]:
    """Flatten per-test-set metrics to the result columns (accuracy, %)."""
    row = {}
    for test_name, groups in metrics_by_test.items():
        for cond, m in groups.items():
            col = test_name if cond == "clean" else cond
            row[col] = 100.0 * m.accuracy
    return row


def mean_rows(rows: list[dict[str, float]]) -> dict[str, float]:
    cols = sorted({c for r in rows for c in r}, key=lambda c: RESULT_COLUMNS.index(c) if c in RESULT_COLUMNS else 99)
    return {c: float(np.mean([r[c] for r in rows if c in r])) for c in cols}


def run_experiment(
    data: ExperimentData,
    mc: ModelConfig,
    variants: dict[str, ConditioningConfig],
    schedule: Schedule = Schedule(),
    n_repeats: int = 3,
    base_seed: int = 0,
    log_fn=None,
) -> ResultsTable:
    """Train every variant ``n_repeats`` times (seeds ``base_seed + i``) and tabulate accuracy."""
    if n_repeats < 1:
        raise ValueError("n_repeats must be >= 1")
    table = ResultsTable()
    for name, cc in variants.items():
        runs = []
        for i in range(n_repeats):
            seed = base_seed + i
            model = build_model(mc, cc, seed=seed)
            result = train(model, data.train, data.cv, data.embeddings, schedule, seed=seed)
            metrics = {t: evaluate(model, fs, data.embeddings) for t, fs in data.tests.items()}
            row = metrics_row(metrics)
            table.rows[f"{name}/run{i}"] = row
            table.logs[f"{name}/run{i}"] = result
            runs.append(row)
            if log_fn is not None:
                log_fn(name, i, result, row)
        table.rows[f"{name}/mean"] = mean_rows(runs)
    return table


def read_results_csv(path) -> dict[str, dict[str, float]]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    reader = csv.DictReader(lines)
    out = {}
    for r in reader:
        out[r["variant"]] = {c: float(r[c]) for c in RESULT_COLUMNS if r.get(c) not in (None, "")}
    return out


def merge_results(tables: list[dict[str, dict[str, float]]]) -> ResultsTable:
    """Pool ``<variant>/run*`` rows (or bare variant rows) across files; recompute means."""
    pooled: dict[str, list[dict[str, float]]] = {}
    for t in tables:
        for name, row in t.items():
            base, _, tag = name.partition("/")
            if tag == "mean":
                continue
            pooled.setdefault(base, []).append(row)
    out = ResultsTable()
    for base, rows in pooled.items():
        for i, r in enumerate(rows):
            out.rows[f"{base}/run{i}"] = r
        out.rows[f"{base}/mean"] = mean_rows(rows)
    return out


def relative_error_reduction(baseline_acc: float, system_acc: float) -> float:
    """Relative frame-error reduction of ``system`` over ``baseline`` (accuracies in %)."""
    eb, es = 100.0 - baseline_acc, 100.0 - system_acc
    return (eb - es) / eb if eb > 0 else 0.0
