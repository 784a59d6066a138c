"""The training loop: draw a candidate batch, score it, train on the top
sub-batch, fold the sub-batch's last-layer statistics into the online
curvature, and record everything needed for post-hoc analysis.

Determinism contract: four independent seeds (model init, data order, noise,
selection). Per-step randomness (Monte-Carlo logits, uniform scores,
importance draws) comes from a generator derived from (selection_seed, step),
so resuming from a checkpoint needs no RNG serialization beyond the step
counter and the batch stream's (epoch, position).

The forward pass over the candidate batch at the pre-update parameters is
reused everywhere: correctness snapshots, scoring, the training backprop on
the selected rows, and the curvature update all read the same cache.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .data import BatchStream, LabeledDataset, inject_symmetric_noise, load_binary, make_imbalanced
from .errors import ConfigError, CorruptCheckpoint, DimensionMismatch, MissingExample
from .model import (
    Network,
    OptimizerState,
    backward,
    forward,
    init_network,
    init_optimizer,
    optimizer_step,
)
from .numerics import log_softmax
from .posterior import LaplaceState, init_laplace, snapshot, update_curvature
from .reference import ReferenceTable, load_reference
from .selection import (
    ScoreVector,
    SelectorConfig,
    sample_grad_norm_is,
    score_bayesian_batch,
    top_k,
)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Seeds:
    model: int = 0
    data: int = 1
    noise: int = 2
    selection: int = 3


@dataclass(frozen=True)
class DataConfig:
    train_path: str | None = None
    test_path: str | None = None
    noise_rate: float = 0.0
    imbalance_ratio: float = 1.0
    subset_fraction: float = 1.0


@dataclass(frozen=True)
class ModelConfig:
    hidden_widths: tuple = (64, 64)
    feature_dim: int = 32


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class LaplaceConfig:
    prior_precision: float = 1.0
    effective_count: float = 500.0
    ema_decay: float = 0.99


@dataclass(frozen=True)
class ReferenceConfig:
    path: str | None = None
    holdout_path: str | None = None
    temperature: float | None = None  # None keeps the file's temperature


@dataclass(frozen=True)
class RunConfig:
    epochs: int = 50
    steps: int | None = None  # overrides epochs when set
    n_candidates: int = 320  # scored batch size
    n_selected: int = 32  # trained sub-batch size
    eval_every: int = 1  # epochs between test evaluations
    out_dir: str | None = None


@dataclass(frozen=True)
class TrainerConfig:
    run: RunConfig = field(default_factory=RunConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    laplace: LaplaceConfig = field(default_factory=LaplaceConfig)
    selection: SelectorConfig = field(default_factory=SelectorConfig)
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)
    seeds: Seeds = field(default_factory=Seeds)

    def validate(self):
        if self.run.n_selected > self.run.n_candidates:
            raise ConfigError(
                f"n_selected ({self.run.n_selected}) exceeds n_candidates "
                f"({self.run.n_candidates})"
            )
        if self.run.n_selected < 1:
            raise ConfigError(f"n_selected must be positive, got {self.run.n_selected}")
        if self.run.steps is None and self.run.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.run.epochs}")
        if self.run.steps is not None and self.run.steps < 1:
            raise ConfigError(f"steps must be positive, got {self.run.steps}")
        if self.run.eval_every < 1:
            raise ConfigError(f"eval_every must be positive, got {self.run.eval_every}")
        if not 0 < self.data.subset_fraction <= 1:
            raise ConfigError(
                f"subset_fraction must lie in (0, 1], got {self.data.subset_fraction}"
            )
        return self


_SECTIONS = {
    "run": RunConfig,
    "data": DataConfig,
    "model": ModelConfig,
    "optimizer": OptimizerConfig,
    "laplace": LaplaceConfig,
    "selection": SelectorConfig,
    "reference": ReferenceConfig,
    "seeds": Seeds,
}


def config_to_dict(config: TrainerConfig) -> dict:
    out = dataclasses.asdict(config)
    out["model"]["hidden_widths"] = list(out["model"]["hidden_widths"])
    return out


def config_from_dict(raw: dict) -> TrainerConfig:
    """Build a config from nested dicts, rejecting unknown sections/keys."""
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        valid = {f.name: f for f in dataclasses.fields(cls)}
        bad = set(section) - set(valid)
        if bad:
            raise ConfigError(f"unknown key(s) in section {name!r}: {sorted(bad)}")
        coerced = {}
        for key, value in section.items():
            coerced[key] = _coerce(name, key, value)
        try:
            kwargs[name] = cls(**coerced)
        except TypeError as exc:
            raise ConfigError(f"bad values in section {name!r}: {exc}") from exc
    return TrainerConfig(**kwargs).validate()


def _coerce(section, key, value):
    if key == "hidden_widths":
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{section}.{key} must be a list of ints")
        return tuple(int(v) for v in value)
    int_keys = {
        "epochs", "steps", "n_candidates", "n_selected", "eval_every",
        "feature_dim", "mc_samples", "model", "data", "noise", "selection",
    }
    if key in int_keys and value is not None:
        if isinstance(value, bool) or (isinstance(value, float) and value != int(value)):
            raise ConfigError(f"{section}.{key} must be an integer, got {value!r}")
        return int(value)
    float_keys = {
        "noise_rate", "imbalance_ratio", "subset_fraction", "lr", "weight_decay",
        "beta1", "beta2", "eps", "prior_precision", "effective_count", "ema_decay",
        "alpha", "temperature",
    }
    if key in float_keys and value is not None:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be a number, got {value!r}")
        return float(value)
    return value


def config_digest(config: TrainerConfig) -> str:
    body = json.dumps(config_to_dict(config), sort_keys=True)
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


@dataclass
class StepRecord:
    step: int
    candidate_ids: np.ndarray
    scores: np.ndarray
    selected_ids: np.ndarray
    correct_before: np.ndarray  # per candidate, at the pre-update parameters
    noisy: np.ndarray  # per candidate
    train_loss: float
    expected_log: np.ndarray | None = None  # per-candidate MC mean log-prob
    log_expected: np.ndarray | None = None  # per-candidate log of MC mean prob

    @property
    def selected_mask(self) -> np.ndarray:
        return np.isin(self.candidate_ids, self.selected_ids)


@dataclass
class SelectionTrace:
    steps_per_epoch: int
    records: list = field(default_factory=list)

    def epoch_of(self, step: int) -> int:
        return (step - 1) // self.steps_per_epoch + 1


def write_trace_csv(trace: SelectionTrace, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,candidate_id,score,selected,correct_before,noisy\n")
        for rec in trace.records:
            sel = rec.selected_mask
            for i in range(rec.candidate_ids.size):
                fh.write(
                    f"{rec.step},{int(rec.candidate_ids[i])},{float(rec.scores[i])!r},"
                    f"{int(sel[i])},{int(rec.correct_before[i])},{int(rec.noisy[i])}\n"
                )


def read_trace_csv(path, steps_per_epoch: int) -> SelectionTrace:
    trace = SelectionTrace(steps_per_epoch=steps_per_epoch)
    rows_by_step = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("step,candidate_id"):
            raise CorruptCheckpoint(f"{path}: not a trace file")
        for line in fh:
            step_s, cand, score, sel, correct, noisy = line.rstrip("\n").split(",")
            rows_by_step.setdefault(int(step_s), []).append(
                (int(cand), float(score), int(sel), int(correct), int(noisy))
            )
    for step in sorted(rows_by_step):
        rows = rows_by_step[step]
        cand = np.array([r[0] for r in rows])
        scores = np.array([r[1] for r in rows])
        sel_mask = np.array([bool(r[2]) for r in rows])
        trace.records.append(
            StepRecord(
                step=step,
                candidate_ids=cand,
                scores=scores,
                selected_ids=cand[sel_mask],
                correct_before=np.array([bool(r[3]) for r in rows]),
                noisy=np.array([bool(r[4]) for r in rows]),
                train_loss=float("nan"),
            )
        )
    return trace


def snapshot_correctness(net: Network, x, labels) -> np.ndarray:
    """argmax(logits) == label per example, evaluated before any update.

    np.argmax takes the first maximum, so ties resolve toward the lower
    class index.
    """
    lg = forward(net, np.atleast_2d(np.asarray(x, dtype=float))).logits
    return np.argmax(lg, axis=1) == np.asarray(labels, dtype=int)


@dataclass
class RunResult:
    network: Network
    optimizer: OptimizerState
    laplace: LaplaceState
    trace: SelectionTrace
    history: list  # one dict per evaluation
    config: TrainerConfig


def _prepare_train_dataset(config: TrainerConfig, train_ds: LabeledDataset) -> LabeledDataset:
    ds = train_ds
    if config.data.subset_fraction < 1.0:
        keep = int(np.floor(config.data.subset_fraction * ds.n))
        ds = ds.take(np.arange(keep))
    if config.data.imbalance_ratio > 1.0:
        ds = make_imbalanced(ds, config.data.imbalance_ratio)
    if config.data.noise_rate > 0.0:
        ds = inject_symmetric_noise(ds, config.data.noise_rate, config.seeds.noise)
    return ds


def _check_reference(table: ReferenceTable, ds: LabeledDataset, role: str):
    if table.n != ds.n:
        raise MissingExample(
            min(table.n, ds.n),
            f"{role} table covers {table.n} examples but the dataset has {ds.n}",
        )
    if table.num_classes != ds.num_classes:
        raise DimensionMismatch(
            f"{role} table has {table.num_classes} classes, dataset has {ds.num_classes}"
        )


def _reference_log_probs(table: ReferenceTable, ds: LabeledDataset) -> np.ndarray:
    """log p(y_i | reference logits_i / tau) for every training example."""
    lsm = log_softmax(table.logits / table.temperature, axis=-1)
    return lsm[np.arange(ds.n), ds.labels]


def _score_candidates(config, laplace, cache, y_batch, ids, ref_lp, holdout_lp, rng):
    """ScoreVector for one candidate batch plus optional MC diagnostics."""
    method = config.selection.method
    n = y_batch.size
    diagnostics = (None, None)
    weights = None
    if method == "bayesian":
        snap = snapshot(laplace)
        scales = snap.scale_batch(cache.feats)
        mc = snap.sample_logits_batch(
            cache.logits, scales, config.selection.mc_samples, rng
        )
        scores, expected_log, log_expected = score_bayesian_batch(
            y_batch, mc, ref_lp[ids], config.selection.alpha
        )
        diagnostics = (expected_log, log_expected)
    elif method == "uniform":
        scores = rng.uniform(size=n)
    elif method == "train_loss":
        lsm = log_softmax(cache.logits, axis=-1)
        scores = -lsm[np.arange(n), y_batch]
    elif method in ("grad_norm", "grad_norm_is"):
        p = np.exp(log_softmax(cache.logits, axis=-1))
        p[np.arange(n), y_batch] -= 1.0
        scores = np.linalg.norm(p, axis=1) * np.linalg.norm(cache.feats, axis=1)
    elif method == "irreducible":
        lsm = log_softmax(cache.logits, axis=-1)
        scores = -lsm[np.arange(n), y_batch] + holdout_lp[ids]
    else:  # pragma: no cover - SelectorConfig already validates
        raise ConfigError(f"unknown selection method {method!r}")
    return ScoreVector(scores=scores, method=method, weights=weights), diagnostics


def run(
    config: TrainerConfig,
    train_ds: LabeledDataset | None = None,
    test_ds: LabeledDataset | None = None,
    reference: ReferenceTable | None = None,
    holdout: ReferenceTable | None = None,
    resume_from=None,
    collect_diagnostics: bool = False,
) -> RunResult:
    """Execute the full selection-and-training loop.

    Datasets and tables may be passed in memory; otherwise they are loaded
    from the configured paths. The train dataset passed in memory is assumed
    already transformed when the data section holds the no-op defaults.

    The whole loop runs under a single BLAS thread: every matrix here is
    small, and multi-threaded BLAS loses big to synchronization overhead on
    them.
    """
    with threadpool_limits(limits=1):
        return _run_inner(
            config, train_ds, test_ds, reference, holdout, resume_from, collect_diagnostics
        )


def _run_inner(config, train_ds, test_ds, reference, holdout, resume_from, collect_diagnostics):
    config.validate()

    if train_ds is None:
        if not config.data.train_path:
            raise ConfigError("no train dataset: set data.train_path or pass one in memory")
        train_ds = load_binary(config.data.train_path)
    train_ds = _prepare_train_dataset(config, train_ds)
    if test_ds is None and config.data.test_path:
        test_ds = load_binary(config.data.test_path)

    method = config.selection.method
    if method == "bayesian":
        if reference is None:
            if not config.reference.path:
                raise ConfigError("bayesian selection needs a reference table")
            reference = load_reference(config.reference.path)
        if config.reference.temperature is not None:
            reference = reference.with_temperature(config.reference.temperature)
        _check_reference(reference, train_ds, "reference")
        ref_lp = _reference_log_probs(reference, train_ds)
    else:
        ref_lp = None
    if method == "irreducible":
        if holdout is None:
            if not config.reference.holdout_path:
                raise ConfigError("irreducible selection needs a holdout table")
            holdout = load_reference(config.reference.holdout_path)
        if config.reference.temperature is not None:
            holdout = holdout.with_temperature(config.reference.temperature)
        _check_reference(holdout, train_ds, "holdout")
        holdout_lp = _reference_log_probs(holdout, train_ds)
    else:
        holdout_lp = None

    if resume_from is not None:
        net, opt, laplace, stream, start_step, epoch_acc = restore_checkpoint(resume_from)
    else:
        net = init_network(
            train_ds.input_dim,
            config.model.hidden_widths,
            config.model.feature_dim,
            train_ds.num_classes,
            config.seeds.model,
        )
        opt = init_optimizer(
            net,
            lr=config.optimizer.lr,
            weight_decay=config.optimizer.weight_decay,
            beta1=config.optimizer.beta1,
            beta2=config.optimizer.beta2,
            eps=config.optimizer.eps,
        )
        laplace = init_laplace(
            config.laplace.prior_precision,
            config.laplace.effective_count,
            config.model.feature_dim if config.model.hidden_widths else train_ds.input_dim,
            train_ds.num_classes,
            config.laplace.ema_decay,
        )
        stream = BatchStream(train_ds.n, config.run.n_candidates, config.seeds.data)
        start_step = 0
        epoch_acc = {"loss_sum": 0.0, "steps": 0, "noisy_sel": 0, "correct_sel": 0, "selected": 0}

    steps_per_epoch = stream.steps_per_epoch
    total_steps = config.run.steps if config.run.steps else config.run.epochs * steps_per_epoch
    trace = SelectionTrace(steps_per_epoch=steps_per_epoch)
    history = []
    noise_flags = train_ds.noise_flags
    features_all = train_ds.features
    labels_all = train_ds.labels

    for step in range(start_step + 1, total_steps + 1):
        ids, epoch_end = stream.next_batch()
        y_batch = labels_all[ids]
        cache = forward(net, features_all[ids])
        correct_before = np.argmax(cache.logits, axis=1) == y_batch
        rng = np.random.default_rng((config.seeds.selection, step))

        score_vec, (expected_log, log_expected) = _score_candidates(
            config, laplace, cache, y_batch, ids, ref_lp, holdout_lp, rng
        )
        if method == "grad_norm_is":
            positions, is_weights = sample_grad_norm_is(
                score_vec.scores, config.run.n_selected, rng
            )
            order = np.argsort(positions)
            positions, sample_weights = positions[order], is_weights[order]
            score_vec.weights = sample_weights
        else:
            positions = np.sort(top_k(score_vec.scores, config.run.n_selected))
            sample_weights = None

        sub = cache.subset(positions)
        y_sel = y_batch[positions]
        loss, grads = backward(net, sub, y_sel, sample_weights)
        optimizer_step(net, opt, grads)

        ce_grads = np.exp(log_softmax(sub.logits, axis=-1))
        ce_grads[np.arange(y_sel.size), y_sel] -= 1.0
        update_curvature(laplace, sub.feats, ce_grads)

        sel_ids = ids[positions]
        trace.records.append(
            StepRecord(
                step=step,
                candidate_ids=ids,
                scores=score_vec.scores,
                selected_ids=sel_ids,
                correct_before=correct_before,
                noisy=noise_flags[ids],
                train_loss=loss,
                expected_log=expected_log if collect_diagnostics else None,
                log_expected=log_expected if collect_diagnostics else None,
            )
        )
        epoch_acc["loss_sum"] += loss
        epoch_acc["steps"] += 1
        epoch_acc["noisy_sel"] += int(noise_flags[sel_ids].sum())
        epoch_acc["correct_sel"] += int(correct_before[positions].sum())
        epoch_acc["selected"] += sel_ids.size

        if epoch_end:
            epoch = stream.epoch  # epochs completed so far
            if epoch % config.run.eval_every == 0:
                history.append(
                    {
                        "step": step,
                        "epoch": epoch,
                        "test_acc": evaluate_accuracy(net, test_ds) if test_ds else None,
                        "train_loss": epoch_acc["loss_sum"] / max(epoch_acc["steps"], 1),
                        "noisy_frac_selected": epoch_acc["noisy_sel"] / max(epoch_acc["selected"], 1),
                        "redundant_frac_selected": epoch_acc["correct_sel"]
                        / max(epoch_acc["selected"], 1),
                    }
                )
            epoch_acc = {"loss_sum": 0.0, "steps": 0, "noisy_sel": 0, "correct_sel": 0, "selected": 0}

    result = RunResult(net, opt, laplace, trace, history, config)
    if config.run.out_dir:
        write_run_outputs(result, stream, epoch_acc, total_steps)
    return result


def evaluate_accuracy(net: Network, ds: LabeledDataset) -> float:
    lg = forward(net, ds.features).logits
    return float(np.mean(np.argmax(lg, axis=1) == ds.labels))


def write_run_outputs(result: RunResult, stream, epoch_acc, final_step) -> None:
    out_dir = result.config.run.out_dir
    os.makedirs(out_dir, exist_ok=True)
    resolved = config_to_dict(result.config)
    resolved["digest"] = config_digest(result.config)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8") as fh:
        for entry in result.history:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    write_trace_csv(result.trace, os.path.join(out_dir, "trace.csv"))
    save_checkpoint(
        os.path.join(out_dir, "checkpoint.json"),
        result.network,
        result.optimizer,
        result.laplace,
        stream,
        final_step,
        epoch_acc,
        config_digest(result.config),
    )


def save_checkpoint(path, net, opt, laplace, stream, step, epoch_acc, digest="") -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "step": int(step),
        "network": net.to_state(),
        "optimizer": opt.to_state(),
        "laplace": laplace.to_state(),
        "stream": stream.state(),
        "epoch_acc": epoch_acc,
        "config_digest": digest,
    }
    body = json.dumps(payload, sort_keys=True)
    checksum = hashlib.sha256(body.encode("utf-8")).hexdigest()
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"checksum": checksum, "payload": payload}, fh, sort_keys=True)
        fh.write("\n")


def restore_checkpoint(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            blob = json.load(fh)
        payload = blob["payload"]
        stored = blob["checksum"]
    except (OSError, ValueError, KeyError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable checkpoint") from exc
    body = json.dumps(payload, sort_keys=True)
    if hashlib.sha256(body.encode("utf-8")).hexdigest() != stored:
        raise CorruptCheckpoint(f"{path}: checksum mismatch")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(
            f"{path}: checkpoint version {payload.get('version')} != {CHECKPOINT_VERSION}"
        )
    net = Network.from_state(payload["network"])
    opt = OptimizerState.from_state(payload["optimizer"])
    laplace = LaplaceState.from_state(payload["laplace"])
    stream = BatchStream.from_state(payload["stream"])
    return net, opt, laplace, stream, int(payload["step"]), dict(payload["epoch_acc"])
