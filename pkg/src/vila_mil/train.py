"""Adam, the early-stopping training loop and the multi-run few-shot protocol."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import (Bag, ConfigError, DatasetManifest, derive_seed,
                   few_shot_sample, rng_for, split_dataset)
from .metrics import accuracy, auc_macro, f1_macro, paired_t_test
from .model import ModelConfig, ViLaMIL, predict
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)

METRICS = ("auc", "f1", "acc")


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    min_epochs: int = 80
    patience: int = 20
    max_epochs: int = 200
    batch_size: int = 1
    seed: int = 0
    shots: int = 16
    runs: int = 5
    average: str = "macro"

    def validate(self) -> None:
        if self.batch_size != 1:
            raise ConfigError("batch_size", "only batch size 1 is supported")
        if self.patience < 1:
            raise ConfigError("patience", "must be >= 1")
        if self.min_epochs < 1:
            raise ConfigError("min_epochs", "must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs", "must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate", "must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be >= 0")
        if self.shots < 1:
            raise ConfigError("shots", "must be >= 1")
        if self.runs < 1:
            raise ConfigError("runs", "must be >= 1")
        if self.average not in ("macro", "micro"):
            raise ConfigError("average", "must be 'macro' or 'micro'")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown train config field")
        cfg = cls(**doc)
        cfg.validate()
        return cfg


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update in place; L2 decay is added to the gradient."""
    for name, p in params.items():
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in parameter group {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float


@dataclass
class TrainResult:
    curve: list[EpochRecord]
    best_epoch: int
    best_val_acc: float

    def curve_csv(self) -> str:
        lines = ["epoch,loss,train_acc,val_acc"]
        lines += [f"{r.epoch},{r.loss!r},{r.train_acc!r},{r.val_acc!r}" for r in self.curve]
        return "\n".join(lines) + "\n"


def evaluate(model: ViLaMIL, bags: list[Bag], average: str = "macro") -> dict:
    scores = np.stack([model.predict_proba(b) for b in bags])
    labels = np.array([b.label for b in bags])
    preds = np.array([predict(s) for s in scores])
    out = {"acc": accuracy(preds, labels),
           "f1": f1_macro(preds, labels, model.n_classes, average)}
    try:
        out["auc"] = auc_macro(scores, labels, average)
    except ValueError:
        out["auc"] = float("nan")
    out.update(scores=scores, labels=labels, predictions=preds)
    return out


def train(model: ViLaMIL, train_bags: list[Bag], val_bags: list[Bag], config: TrainConfig) -> TrainResult:
    """Batch-1 Adam training with validation-accuracy early stopping.

    Stops once ``epoch >= min_epochs`` and validation accuracy has not
    improved for ``patience`` epochs, or at ``max_epochs``. The parameters
    of the best-validation epoch (earliest on ties) are restored.
    """
    config.validate()
    if not train_bags:
        raise ValueError("empty training set")
    if not val_bags:
        raise ValueError("empty validation set")
    params = model.parameters()
    state = AdamState()
    curve = []
    best_acc, best_epoch, best_state, stale = -1.0, 0, None, 0
    val_labels = np.array([b.label for b in val_bags])
    for epoch in range(1, config.max_epochs + 1):
        order = rng_for(config.seed, "epoch-order", epoch).permutation(len(train_bags))
        losses, hits = [], 0
        for i in order:
            bag = train_bags[i]
            model.zero_grad()
            with Tape():
                diag = model.forward(bag)
                loss = model.loss(diag.P, bag.label)
            if not np.isfinite(loss.item()):
                raise NumericalError(f"non-finite loss on bag {bag.id} at epoch {epoch}")
            backward(loss)
            adam_step(params, state, config.learning_rate, config.weight_decay)
            losses.append(loss.item())
            hits += predict(diag.P) == bag.label
        val_preds = np.array([predict(model.forward(b).P) for b in val_bags])
        val_acc = float(np.mean(val_preds == val_labels))
        curve.append(EpochRecord(epoch, float(np.mean(losses)), hits / len(train_bags), val_acc))
        if val_acc > best_acc:
            best_acc, best_epoch, best_state, stale = val_acc, epoch, model.state(), 0
        else:
            stale += 1
        if epoch >= config.min_epochs and stale >= config.patience:
            break
    model.load_state(best_state)
    return TrainResult(curve, best_epoch, best_acc)


# ------------------------------------------------------------ experiment

def run_seed(master: int, run: int) -> int:
    return int(derive_seed(master, "run", run).generate_state(1)[0])


def split_checksum(assignment: dict[str, str]) -> str:
    text = "\n".join(f"{k}\t{v}" for k, v in sorted(assignment.items()))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class RunResult:
    run: int
    seed: int
    auc: float
    f1: float
    acc: float
    best_epoch: int
    epochs: int
    n_train: int
    n_val: int
    n_test: int
    split_checksum: str
    train_counts: list[int] = field(default_factory=list)
    split_counts: dict[str, list[int]] = field(default_factory=dict)


def _std(x) -> float:
    return float(np.std(x)) if len(x) else 0.0


@dataclass
class ExperimentReport:
    name: str
    runs: list[RunResult]
    curves: list[TrainResult] = field(default_factory=list, repr=False)

    def values(self, metric: str) -> np.ndarray:
        return np.array([getattr(r, metric) for r in self.runs])

    def summary(self) -> dict[str, dict[str, float]]:
        return {m: {"mean": float(np.mean(self.values(m))), "std": _std(self.values(m))} for m in METRICS}

    def compare(self, other: "ExperimentReport") -> dict[str, float]:
        """Paired t-test p-value per metric against ``other`` (matched runs)."""
        if len(self.runs) < 2:
            return {m: float("nan") for m in METRICS}
        return {m: paired_t_test(self.values(m), other.values(m)).pvalue for m in METRICS}

    def to_json(self, comparison: dict | None = None) -> dict:
        doc = {"name": self.name, "runs": [dataclasses.asdict(r) for r in self.runs], "summary": self.summary()}
        if comparison is not None:
            doc["paired_t_pvalues"] = comparison
        return doc


def format_mean_std(mean: float, std: float) -> str:
    """Percent with one decimal, e.g. ``84.3 ± 4.6``."""
    return f"{100 * mean:.1f} ± {100 * std:.1f}"


def format_table(reports: list[ExperimentReport], pvalues: dict[str, dict] | None = None) -> str:
    header = ["Method", "AUC", "F1", "ACC"] + (["p(AUC)", "p(F1)", "p(ACC)"] if pvalues else [])
    rows = []
    for rep in reports:
        s = rep.summary()
        row = [rep.name] + [format_mean_std(s[m]["mean"], s[m]["std"]) for m in METRICS]
        if pvalues:
            p = pvalues.get(rep.name, {})
            row += [f"{p[m]:.3g}" if m in p else "-" for m in METRICS]
        rows.append(row)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    sep = "  ".join("-" * w for w in widths)
    return "\n".join([fmt(header), sep] + [fmt(r) for r in rows]) + "\n"


def prepare_run(manifest: DatasetManifest, train_config: TrainConfig, run: int):
    """Split and few-shot sample for one run; returns (seed, assignment, train, val, test entries)."""
    seed = run_seed(train_config.seed, run)
    assignment = split_dataset(manifest.bags, manifest.n_classes, seed=seed)
    by_split = {s: [e for e in manifest.bags if assignment[e.id] == s] for s in ("train", "val", "test")}
    shots = few_shot_sample(by_split["train"], manifest.n_classes, train_config.shots, seed, manifest.class_names)
    return seed, assignment, shots, by_split["val"], by_split["test"]


def _one_run(manifest, bags, model_config, train_config, run, return_model=False):
    seed, assignment, tr, va, te = prepare_run(manifest, train_config, run)
    model = ViLaMIL(dataclasses.replace(model_config, seed=seed), manifest.class_names)
    result = train(model, [bags[e.id] for e in tr], [bags[e.id] for e in va],
                   dataclasses.replace(train_config, seed=seed))
    metrics = evaluate(model, [bags[e.id] for e in te], train_config.average)
    C = manifest.n_classes
    counts = {s: [sum(1 for e in manifest.bags if assignment[e.id] == s and e.label == c) for c in range(C)]
              for s in ("train", "val", "test")}
    rr = RunResult(run, seed, metrics["auc"], metrics["f1"], metrics["acc"], result.best_epoch,
                   len(result.curve), len(tr), len(va), len(te), split_checksum(assignment),
                   [sum(1 for e in tr if e.label == c) for c in range(C)], counts)
    log.info("run %d: auc=%.3f f1=%.3f acc=%.3f (best epoch %d/%d)", run, rr.auc, rr.f1, rr.acc,
             rr.best_epoch, rr.epochs)
    return (rr, result, model) if return_model else (rr, result)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("VILA_THREADS", "1")))
    except ValueError:
        return 1


def run_experiment(manifest: DatasetManifest, model_config: ModelConfig, train_config: TrainConfig,
                   name: str = "ViLa-MIL", bags: dict[str, Bag] | None = None) -> ExperimentReport:
    """Repeat split -> K-shot sample -> train -> test for ``train_config.runs`` seeds."""
    train_config.validate()
    model_config.validate()
    if bags is None:
        bags = manifest.load_all()
    runs = range(train_config.runs)
    workers = min(worker_count(), train_config.runs)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(lambda r: _one_run(manifest, bags, model_config, train_config, r), runs))
    else:
        out = [_one_run(manifest, bags, model_config, train_config, r) for r in runs]
    return ExperimentReport(name, [o[0] for o in out], [o[1] for o in out])
