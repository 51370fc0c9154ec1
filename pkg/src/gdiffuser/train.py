"""Training loop, evaluation and multi-seed aggregation."""
from __future__ import annotations

import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import functional as F
from .autograd.optim import OptimizerState, adam_step, lr_at
from .autograd.tensor import no_grad
from .graph import Graph
from .model import DiffuserConfig, DiffuserModel, vanilla_transformer_baseline

log = logging.getLogger(__name__)

BASELINE_MODES = ("diffuser", "vanilla_transformer")


class TrainingDiverged(RuntimeError):
    """Loss became NaN or infinite."""


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    base_lr: float = 4e-4
    warmup_epochs: int = 5
    weight_decay: float = 1e-5
    seed: int = 0
    eval_every: int = 1
    early_stop_patience: int = 50   # 0 disables early stopping
    baseline_mode: str = "diffuser"
    match_budget: bool = True
    model: DiffuserConfig = field(default_factory=DiffuserConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = DiffuserConfig(**self.model)
        self.validate()

    def validate(self):
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("epochs and warmup_epochs must be >= 0")
        if self.epochs < self.warmup_epochs:
            raise ValueError(f"epochs ({self.epochs}) < warmup_epochs ({self.warmup_epochs})")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1")
        if self.baseline_mode not in BASELINE_MODES:
            raise ValueError(f"baseline_mode must be one of {BASELINE_MODES}")
        self.model.validate()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunReport:
    train_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    test_acc: float | None = None
    best_epoch: int | None = None
    best_val_acc: float | None = None
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)
    seed: int = 0
    stopped_early: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,train_loss,val_acc,lr\n")
        for e, (loss, acc, lr) in enumerate(zip(self.train_loss, self.val_acc, self.lr)):
            acc_s = "" if acc is None else repr(float(acc))
            buf.write(f"{e},{float(loss)!r},{acc_s},{float(lr)!r}\n")
        return buf.getvalue()


def _graphs(samples) -> list:
    return [s if isinstance(s, Graph) else s.graph for s in samples]


def build_model(config: TrainConfig) -> DiffuserModel:
    if config.baseline_mode == "vanilla_transformer":
        return vanilla_transformer_baseline(config.model, seed=config.seed, match_budget=config.match_budget)
    return DiffuserModel(config.model.replace(mode="diffuser"), seed=config.seed)


def evaluate(model, samples, batch_size: int = 64):
    """Node accuracy and mean per-node cross-entropy in eval mode."""
    graphs = _graphs(samples)
    correct = total = 0
    loss_sum = 0.0
    with no_grad():
        for s in range(0, len(graphs), batch_size):
            chunk = graphs[s:s + batch_size]
            labels = np.concatenate([g.labels for g in chunk])
            logits = model.forward(chunk, training=False)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
            total += labels.size
            loss_sum += float(F.cross_entropy(logits, labels).data) * labels.size
    if total == 0:
        return float("nan"), float("nan")
    return correct / total, loss_sum / total


def _grad_norms(params):
    return {k: float(np.linalg.norm(t.grad)) for k, t in params.items() if t.grad is not None}


def train(config: TrainConfig, dataset, model: DiffuserModel | None = None, progress=None):
    """Train on ``dataset.train``, select by ``dataset.val``, report ``dataset.test``.

    Returns ``(report, model)``; the model holds the best-validation
    parameters, or ``(report, None)`` when no epoch ran.
    """
    config.validate()
    train_g, val_g, test_g = _graphs(dataset.train), _graphs(dataset.val), _graphs(dataset.test)
    if not train_g or not val_g or not test_g:
        raise ValueError("train, val and test splits must be nonempty")
    start = time.perf_counter()
    report = RunReport(config=config.to_dict(), seed=config.seed)
    if config.epochs == 0:
        report.wall_time = time.perf_counter() - start
        return report, None

    model = model or build_model(config)
    shuffle_seq, dropout_seq = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    model.reseed_dropout(dropout_seq)
    opt = OptimizerState(learning_rate=config.base_lr, weight_decay=config.weight_decay)

    bs = config.batch_size
    steps_per_epoch = math.ceil(len(train_g) / bs)
    total = config.epochs * steps_per_epoch
    warmup = config.warmup_epochs * steps_per_epoch
    step = 0
    best_acc, best_state, since_best = -1.0, None, 0
    val_acc = None
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(train_g))
        loss_sum, nodes = 0.0, 0
        lr = 0.0
        for s in range(0, len(order), bs):
            chunk = [train_g[i] for i in order[s:s + bs]]
            labels = np.concatenate([g.labels for g in chunk])
            lr = lr_at(step + 1, total, warmup, config.base_lr)
            loss = F.cross_entropy(model.forward(chunk, training=True), labels)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"loss={value} at epoch {epoch} step {step}, lr={lr}, grad norms={_grad_norms(model.params)}"
                )
            model.params.zero_grad()
            loss.backward()
            adam_step(opt, model.params, lr=lr)
            step += 1
            loss_sum += value * labels.size
            nodes += labels.size
        report.train_loss.append(loss_sum / nodes)
        report.lr.append(lr)
        last = epoch == config.epochs - 1
        if (epoch + 1) % config.eval_every == 0 or last:
            val_acc, _ = evaluate(model, val_g)
            if val_acc > best_acc:
                best_acc, best_state, since_best = val_acc, model.params.state_dict(), 0
                report.best_epoch = epoch
            else:
                since_best += config.eval_every
            report.val_acc.append(val_acc)
        else:
            report.val_acc.append(None)
        if progress is not None:
            progress(epoch, report)
        log.debug("epoch %d loss %.5f val_acc %s lr %.3g", epoch, report.train_loss[-1], val_acc, lr)
        if config.early_stop_patience and since_best >= config.early_stop_patience and not last:
            report.stopped_early = True
            break

    model.params.load_state_dict(best_state)
    report.best_val_acc = best_acc
    report.test_acc, _ = evaluate(model, test_g)
    report.wall_time = time.perf_counter() - start
    return report, model


def run_seeds(config: TrainConfig, dataset, seeds):
    """Train once per seed; returns ``(mean, std, reports)`` of test accuracy.

    ``std`` uses the n-1 denominator and is 0 for a single seed.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    reports = []
    for s in seeds:
        cfg = TrainConfig(**{**config.to_dict(), "seed": s})
        rep, _ = train(cfg, dataset)
        reports.append(rep)
    accs = np.array([r.test_acc for r in reports], dtype=np.float64)
    std = float(accs.std(ddof=1)) if accs.size > 1 else 0.0
    return float(accs.mean()), std, reports
