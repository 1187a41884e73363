"""Run configuration, training loop, metrics and the results table."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .models import DISPLAY_NAMES, MODEL_IDS, TEMPLATE_MODELS, TemplateMismatch, build_model
from .nn import Adam, count_parameters

ASSUMED = "paper-unspecified default"


@dataclass
class RunConfig:
    model: str = "spiralnet"
    widths: list = field(default_factory=lambda: [16, 16, 16, 32])
    head: list = field(default_factory=list)
    pool_factors: list = field(default_factory=lambda: [0.25, 0.25, 0.25])
    edge_pool_ratios: list = field(default_factory=lambda: [0.8, 0.8, 0.8])
    cheb_k: int = 6
    spiral_length: int = 9
    kc_sigma: float = 0.2
    kc_kernels: int = 16
    kc_points: int = 4
    spatial_width: int = 64
    fuse_width: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    dataset: str | None = None
    data: dict = field(default_factory=dict)

    PROVENANCE = {
        "widths": ASSUMED, "head": ASSUMED, "pool_factors": ASSUMED,
        "edge_pool_ratios": ASSUMED, "cheb_k": ASSUMED + " (K=6)",
        "spiral_length": ASSUMED, "kc_sigma": ASSUMED, "kc_kernels": ASSUMED,
        "kc_points": ASSUMED, "spatial_width": ASSUMED, "fuse_width": ASSUMED,
        "lr": ASSUMED, "beta1": ASSUMED, "beta2": ASSUMED, "eps": ASSUMED,
        "epochs": ASSUMED, "batch_size": ASSUMED, "seed": ASSUMED,
    }

    def __post_init__(self):
        if self.model not in MODEL_IDS:
            raise ValueError(f"unknown model {self.model!r}; expected one of {MODEL_IDS}")

    @classmethod
    def for_model(cls, model, **overrides):
        """Per-model defaults, then ``overrides``."""
        base = dict(MODEL_DEFAULTS[model])
        base.update(overrides)
        return cls.from_dict({"model": model, **base})

    @classmethod
    def from_dict(cls, d):
        d = {k: v for k, v in d.items() if k != "provenance"}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["provenance"] = dict(self.PROVENANCE)
        return d


MODEL_DEFAULTS = {
    "come": dict(widths=[16, 16, 16, 32], head=[], lr=3e-3, epochs=30),
    "spiralnet": dict(widths=[16, 16, 16, 32], head=[], lr=3e-3, epochs=30),
    "meshcnn": dict(widths=[32, 32, 64], head=[64], edge_pool_ratios=[0.8, 0.8, 0.8], lr=2e-3, epochs=6),
    "pointnet": dict(widths=[64, 128], head=[256], lr=1e-3, epochs=30),
    "meshnet": dict(widths=[32, 32], head=[512], spatial_width=32, fuse_width=64,
                    kc_kernels=16, kc_points=4, kc_sigma=0.2, lr=1e-3, epochs=15),
}


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    n_params: int = 0
    epoch_time: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def to_dict(self):
        return asdict(self)


def confusion_metrics(y_true, y_pred, n_params=0, epoch_time=0.0):
    """Accuracy, precision and recall with class 1 as the positive class.

    Precision (recall) is 0 when there are no predicted (actual) positives.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if len(y_true) == 0:
        raise ValueError("cannot evaluate an empty split")
    tp = int(((y_pred == 1) & (y_true == 1)).sum())
    fp = int(((y_pred == 1) & (y_true == 0)).sum())
    fn = int(((y_pred == 0) & (y_true == 1)).sum())
    tn = int(((y_pred == 0) & (y_true == 0)).sum())
    total = tp + fp + fn + tn
    return Metrics(
        accuracy=(tp + tn) / total,
        precision=tp / (tp + fp) if tp + fp else 0.0,
        recall=tp / (tp + fn) if tp + fn else 0.0,
        n_params=n_params,
        epoch_time=epoch_time,
        tp=tp, fp=fp, fn=fn, tn=tn,
    )


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch):
        self.epoch = epoch
        super().__init__(f"loss became non-finite in epoch {epoch}")


def _batches(n, size, order=None):
    order = np.arange(n) if order is None else order
    for i in range(0, n, size):
        yield order[i : i + size]


def predict(model, encoded, batch_size=32):
    """Class predictions and logits for already-encoded samples."""
    logits = []
    with ad.no_grad():
        for idx in _batches(len(encoded), batch_size):
            logits.append(model.forward(model.collate([encoded[i] for i in idx])).data)
    logits = np.concatenate(logits) if logits else np.zeros((0, 2))
    return logits.argmax(axis=1), logits


def evaluate(model, split, batch_size=32, encoded=None):
    """Metrics of ``model`` on a list of samples.

    Raises
    ------
    ValueError
        For an empty split.
    """
    if len(split) == 0:
        raise ValueError("cannot evaluate an empty split")
    if encoded is None:
        encoded = [model.encode(s) for s in split]
    pred, _ = predict(model, encoded, batch_size)
    return confusion_metrics([s.label for s in split], pred, count_parameters(model))


def check_compatible(model_id, dataset):
    if model_id in TEMPLATE_MODELS:
        if dataset.spec.vary_topology or not all(s.shares_template for s in dataset.train + dataset.test):
            raise TemplateMismatch(
                f"{model_id} is template-based and cannot train on a vary_topology dataset"
            )


def train(model, dataset, config, log=None):
    """Seeded mini-batch Adam on ``dataset.train``.

    Each history entry holds the running training metrics gathered during
    the epoch's forward passes, a full test-split evaluation and the wall
    time of the training pass. With ``epochs == 0`` the single entry is a
    full evaluation of the untrained model on both splits.

    Returns
    -------
    model, history : list of dict

    Raises
    ------
    TrainingDivergence
        When the loss stops being finite.
    """
    check_compatible(config.model, dataset)
    if not dataset.train:
        raise ValueError("training split is empty")
    rng = np.random.default_rng(config.seed + 1)
    enc_train = [model.encode(s) for s in dataset.train]
    enc_test = [model.encode(s) for s in dataset.test]
    y_train = np.array([s.label for s in dataset.train])
    model.prepare(enc_train)
    n_params = count_parameters(model)
    opt = Adam(model.parameters(), config.lr, config.beta1, config.beta2, config.eps)
    history = []
    if config.epochs == 0:
        history.append({
            "epoch": 0,
            "train": evaluate(model, dataset.train, encoded=enc_train).to_dict(),
            "test": evaluate(model, dataset.test, encoded=enc_test).to_dict(),
            "loss": None,
        })
        return model, history
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(enc_train))
        preds = np.zeros(len(enc_train), dtype=np.int64)
        losses = []
        t0 = time.perf_counter()
        for idx in _batches(len(order), config.batch_size, order):
            logits = model.forward(model.collate([enc_train[i] for i in idx]))
            loss = ad.cross_entropy(logits, y_train[idx])
            value = float(loss.data[0])
            if not math.isfinite(value):
                raise TrainingDivergence(epoch)
            losses.append(value * len(idx))
            preds[idx] = logits.data.argmax(axis=1)
            opt.zero_grad()
            loss.backward()
            opt.step()
        elapsed = time.perf_counter() - t0
        train_m = confusion_metrics(y_train, preds, n_params, elapsed)
        test_m = evaluate(model, dataset.test, encoded=enc_test)
        test_m.epoch_time = elapsed
        entry = {
            "epoch": epoch,
            "loss": sum(losses) / len(enc_train),
            "train": train_m.to_dict(),
            "test": test_m.to_dict(),
        }
        history.append(entry)
        if log is not None:
            log(f"{config.model} epoch {epoch:3d} loss {entry['loss']:.4f} "
                f"train acc {train_m.accuracy:.3f} test acc {test_m.accuracy:.3f} "
                f"({elapsed:.2f}s)")
    return model, history


def run_benchmark(model_id, dataset, config=None, log=None):
    config = config or RunConfig.for_model(model_id)
    template = dataset.template if model_id in TEMPLATE_MODELS else None
    model = build_model(config, template)
    model, history = train(model, dataset, config, log=log)
    return model, history


def mean_epoch_time(history):
    times = [h["train"]["epoch_time"] for h in history if h["epoch"] > 0]
    return float(np.mean(times)) if times else 0.0


# ---------------------------------------------------------------------------
# reporting


def results_row(model_id, metrics):
    return {
        "Method": DISPLAY_NAMES.get(model_id, model_id),
        "Template": "yes" if model_id in TEMPLATE_MODELS else "no",
        "Acc": round(100.0 * metrics["accuracy"], 1),
        "Prec": round(metrics["precision"], 2),
        "Rec": round(metrics["recall"], 2),
        "#Params": int(metrics["n_params"]),
    }


TABLE_COLUMNS = ("Method", "Template", "Acc", "Prec", "Rec", "#Params")


def format_table(rows):
    header = f"{'Method':<12} {'Template':<8} {'Acc(%)':>7} {'Prec':>5} {'Rec':>5} {'#Params':>9}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['Method']:<12} {r['Template']:<8} {r['Acc']:>7.1f} {r['Prec']:>5.2f} "
            f"{r['Rec']:>5.2f} {r['#Params']:>9d}"
        )
    return "\n".join(lines)


def collect_runs(runs_dir):
    rows = []
    for path in sorted(Path(runs_dir).glob("*/metrics.json")):
        data = json.loads(path.read_text())
        rows.append(results_row(data["model"], data["final"]["test"]))
    order = {m: i for i, m in enumerate(("pointnet", "meshcnn", "meshnet", "come", "spiralnet"))}
    inv = {v: k for k, v in DISPLAY_NAMES.items()}
    rows.sort(key=lambda r: order.get(inv.get(r["Method"]), 99))
    return rows
