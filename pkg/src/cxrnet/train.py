"""Training harness: losses, Adam, mini-batch loop with validation and early
stopping, best-checkpoint retention, evaluation, single-image prediction, and
multi-model comparison runs.

All randomness derives from one seed (model init, shuffling, dropout, and
augmentation use independent child streams), so runs are bit-reproducible on the
single-threaded reference path.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .capsule import margin_loss
from .checkpoint import load_model, read_checkpoint, restore_model, save_checkpoint
from .data import (
    ImageStore,
    apply_augment,
    batch_arrays,
    draw_augment_params,
    encode_metadata,
    parse_metadata_csv,
    preprocess_image,
    split,
    write_manifest,
)
from .metrics import MetricRow, TABLE_COLUMNS, compute_metrics
from .tensor import Tensor, no_grad
from .zoo import Model, get_model_spec, param_count

EPS = 1e-7
BORDERLINE_MARGIN = 0.05


# ---- configuration ----------------------------------------------------------------


@dataclass
class TrainConfig:
    model: str
    metadata_csv: str | None = None
    image_dir: str | None = None
    batch_size: int = 32
    learning_rate: float = 1e-3
    max_epochs: int = 10
    early_stop_patience: int = 5
    seed: int = 0
    threshold: float = 0.5
    beta: float = 0.5
    val_fraction: float = 0.2
    augment: bool = True
    plot: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.early_stop_patience < 1:
            raise ValueError(f"early_stop_patience must be >= 1, got {self.early_stop_patience}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")

    @staticmethod
    def from_json(path) -> "TrainConfig":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        known = TrainConfig.__dataclass_fields__
        unknown = sorted(set(doc) - set(known))
        if unknown:
            raise ValueError(f"unknown config field(s): {', '.join(unknown)}")
        if "model" not in doc:
            raise ValueError("config must name a model")
        return TrainConfig(**doc)


@dataclass
class RunReport:
    model: str
    loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    acc: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    train_seconds: float = 0.0
    param_count: int = 0
    final: MetricRow | None = None

    @property
    def epochs_run(self) -> int:
        return len(self.loss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("epoch", "loss", "val_loss", "acc", "val_acc"))
        for i in range(self.epochs_run):
            w.writerow((i + 1, f"{self.loss[i]:.6f}", f"{self.val_loss[i]:.6f}",
                        f"{self.acc[i]:.6f}", f"{self.val_acc[i]:.6f}"))
        return buf.getvalue()


# ---- losses --------------------------------------------------------------------------


def bce_loss(pred: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on sigmoid outputs, clamped to [eps, 1-eps]."""
    p = pred.reshape((pred.shape[0],)).clip(EPS, 1.0 - EPS)
    y = Tensor(np.asarray(labels, dtype=pred.dtype.type))
    one = Tensor(np.ones((), dtype=pred.dtype.type))
    return -(y * p.log() + (one - y) * (one - p).log()).mean()


def ce_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the true class on softmax outputs."""
    n, k = probs.shape
    onehot = np.zeros((n, k), dtype=probs.dtype.type)
    onehot[np.arange(n), np.asarray(labels, dtype=np.int64)] = 1.0
    picked = (probs * Tensor(onehot)).sum(axis=1).clip(EPS, 1.0)
    return -picked.log().mean()


def batch_loss(out: Tensor, labels: np.ndarray, output_kind: str) -> Tensor:
    if output_kind == "sigmoid-binary":
        return bce_loss(out, labels)
    if output_kind == "softmax-2":
        return ce_loss(out, labels)
    if output_kind == "capsule-length-2":
        n = out.shape[0]
        onehot = np.zeros((n, 2), dtype=np.int64)
        onehot[np.arange(n), np.asarray(labels, dtype=np.int64)] = 1
        return margin_loss(out, onehot)
    raise ValueError(f"unknown output kind {output_kind!r}")


def scores_from_output(out: np.ndarray, output_kind: str) -> np.ndarray:
    """Disease confidence in [0,1] per sample, regardless of head type."""
    if output_kind == "sigmoid-binary":
        return out[:, 0]
    if output_kind in ("softmax-2", "capsule-length-2"):
        return out[:, 1]
    raise ValueError(f"unknown output kind {output_kind!r}")


# ---- optimizer --------------------------------------------------------------------------


class Adam:
    """Adam with bias correction; state kept float32 to match parameter dtype."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        scale = self.lr * np.sqrt(1.0 - self.beta2 ** t) / (1.0 - self.beta1 ** t)
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            p.data = p.data - scale * self.m[k] / (np.sqrt(self.v[k]) + self.eps)

    def state_arrays(self) -> dict:
        out = {f"{k}.m": v for k, v in self.m.items()}
        out.update({f"{k}.v": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays: dict, step_count: int) -> None:
        for k in self.m:
            self.m[k] = arrays[f"{k}.m"].astype(self.m[k].dtype, copy=False)
            self.v[k] = arrays[f"{k}.v"].astype(self.v[k].dtype, copy=False)
        self.step_count = step_count


# ---- batch sources ------------------------------------------------------------------------


class ArraySource:
    """In-memory dataset, mainly for synthetic fixtures and tests."""

    def __init__(self, x: np.ndarray, meta: np.ndarray | None, y: np.ndarray):
        self.x = np.asarray(x, dtype=np.float32)
        self.meta = None if meta is None else np.asarray(meta, dtype=np.float32)
        self.y = np.asarray(y, dtype=np.float32)
        self.n = len(self.x)

    def take(self, idx: np.ndarray, augment_rng=None):
        x = self.x[idx]
        if augment_rng is not None:
            x = np.stack([apply_augment(im, draw_augment_params(augment_rng)) for im in x])
        meta = None if self.meta is None else self.meta[idx]
        return x.astype(np.float32), meta, self.y[idx]


class RecordSource:
    """Streams batches lazily from parsed records and an image store."""

    def __init__(self, records: list, store: ImageStore):
        self.records = records
        self.store = store
        self.n = len(records)

    def take(self, idx: np.ndarray, augment_rng=None):
        recs = [self.records[i] for i in idx]
        return batch_arrays(recs, self.store, augment_rng)


def _iter_batches(source, batch_size: int, order: np.ndarray, augment_rng=None):
    for start in range(0, len(order), batch_size):
        yield source.take(order[start:start + batch_size], augment_rng)


# ---- core loop -----------------------------------------------------------------------------


def _child_rngs(seed: int) -> list:
    """Four independent streams from one seed: init, shuffle, dropout, augment."""
    return [np.random.default_rng(c) for c in np.random.SeedSequence(seed).spawn(4)]


def _forward_batch(model: Model, x, meta, mode: str, rng=None) -> Tensor:
    xt = Tensor(x)
    mt = Tensor(meta) if (model.spec.metadata_width and meta is not None) else None
    return model.forward(xt, mt, mode=mode, rng=rng)


def _eval_pass(model: Model, source, batch_size: int):
    """Inference-mode scores/labels/mean-loss over a source (no shuffling)."""
    kind = model.spec.output_kind
    scores, labels, loss_sum = [], [], 0.0
    with no_grad():
        for x, meta, y in _iter_batches(source, batch_size, np.arange(source.n)):
            out = _forward_batch(model, x, meta, "infer")
            loss_sum += float(batch_loss(out, y, kind).data) * len(y)
            scores.append(scores_from_output(out.data, kind))
            labels.append(y)
    return np.concatenate(scores), np.concatenate(labels), loss_sum / source.n


def fit(model: Model, config: TrainConfig, train_source, val_source) -> tuple:
    """Mini-batch Adam with per-epoch validation and early stopping.

    Returns (RunReport, best) where `best` snapshots the parameters, buffers, and
    optimizer state from the epoch with the lowest validation loss.
    """
    if train_source.n == 0:
        raise ValueError("empty training split")
    if val_source.n == 0:
        raise ValueError("empty validation split")
    kind = model.spec.output_kind
    _, shuffle_rng, dropout_rng, augment_rng = _child_rngs(config.seed)
    opt = Adam(model.parameters(), lr=config.learning_rate)
    report = RunReport(model=model.spec.name, param_count=model.num_params())
    best = None
    start = time.perf_counter()
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(train_source.n)
        loss_sum, scores, labels = 0.0, [], []
        for i, (x, meta, y) in enumerate(_iter_batches(
                train_source, config.batch_size, order,
                augment_rng if config.augment else None)):
            out = _forward_batch(model, x, meta, "train", dropout_rng)
            loss = batch_loss(out, y, kind)
            value = float(loss.data)
            if not np.isfinite(value):
                raise RuntimeError(f"non-finite training loss {value} at epoch {epoch}, "
                                   f"batch {i}; aborting")
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += value * len(y)
            scores.append(scores_from_output(out.data, kind))
            labels.append(y)
        train_row = compute_metrics(np.concatenate(scores), np.concatenate(labels),
                                    config.threshold, config.beta)
        val_scores, val_labels, val_loss = _eval_pass(model, val_source, config.batch_size)
        val_row = compute_metrics(val_scores, val_labels, config.threshold, config.beta)
        report.loss.append(loss_sum / train_source.n)
        report.val_loss.append(val_loss)
        report.acc.append(train_row.accuracy)
        report.val_acc.append(val_row.accuracy)
        if val_loss < report.best_val_loss:
            report.best_val_loss = val_loss
            report.best_epoch = epoch
            best = {
                "params": {k: t.data.copy() for k, t in model.parameters().items()},
                "buffers": {k: v.copy() for k, v in model.buffers().items()},
                "opt_state": {k: v.copy() for k, v in opt.state_arrays().items()},
                "opt_step": opt.step_count,
                "epoch": epoch,
                "val_loss": val_loss,
            }
        elif epoch - report.best_epoch >= config.early_stop_patience:
            break
    report.train_seconds = time.perf_counter() - start
    return report, best


def restore_best(model: Model, best: dict) -> None:
    params = model.parameters()
    for k, arr in best["params"].items():
        params[k].data = arr.copy()
        params[k].grad = None
    for k, arr in best["buffers"].items():
        model.set_buffer(k, arr.copy())


# ---- orchestration ---------------------------------------------------------------------------


def _build_sources(config: TrainConfig, spec):
    if not config.metadata_csv or not config.image_dir:
        raise ValueError("config must set metadata_csv and image_dir")
    result = parse_metadata_csv(config.metadata_csv)
    if not result.records:
        raise ValueError(f"no usable records in {config.metadata_csv}")
    train_recs, val_recs = split(result.records, config.val_fraction, config.seed)
    color = "gray" if spec.input_shape[0] == 1 else "rgb"
    store = ImageStore(config.image_dir, color)
    return RecordSource(train_recs, store), RecordSource(val_recs, store)


def train(config: TrainConfig, out_dir) -> tuple:
    """Full training run: build, fit, restore the best epoch, evaluate it on the
    validation split, and write checkpoint + report CSV (+ optional SVG plot).

    Returns (RunReport, checkpoint path).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = get_model_spec(config.model)
    model = Model(spec, _child_rngs(config.seed)[0])
    train_source, val_source = _build_sources(config, spec)
    report, best = fit(model, config, train_source, val_source)
    restore_best(model, best)
    scores, labels, _ = _eval_pass(model, val_source, config.batch_size)
    report.final = compute_metrics(scores, labels, config.threshold, config.beta)
    ckpt_path = out / f"{config.model}.ckpt"
    save_checkpoint(ckpt_path, model, epoch=best["epoch"], best_val_loss=best["val_loss"],
                    train_config=asdict(config), opt_state=best["opt_state"],
                    opt_step=best["opt_step"])
    (out / f"{config.model}_report.csv").write_text(report.to_csv(), encoding="utf-8")
    if isinstance(train_source, RecordSource):
        write_manifest(train_source.records, out / "train_manifest.txt")
        write_manifest(val_source.records, out / "val_manifest.txt")
    if config.plot:
        save_loss_plot(report, out / f"{config.model}_loss.svg")
    return report, ckpt_path


def save_loss_plot(report: RunReport, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = np.arange(1, report.epochs_run + 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, report.loss, label="loss")
    ax.plot(epochs, report.val_loss, label="val_loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(report.model)
    ax.legend()
    fig.savefig(path, format="svg")
    plt.close(fig)


def evaluate_checkpoint(ckpt_path, split_name: str, threshold: float | None = None,
                        beta: float | None = None) -> tuple:
    """Rebuild the model and its deterministic split, then score one side.

    Returns (MetricRow, header dict, sample count).
    """
    if split_name not in ("train", "val"):
        raise ValueError(f"split must be 'train' or 'val', got {split_name!r}")
    model, ckpt = load_model(ckpt_path)
    tc = ckpt.header.get("train_config")
    if not tc:
        raise ValueError("checkpoint carries no train_config; cannot rebuild its dataset")
    config = TrainConfig(**tc)
    train_source, val_source = _build_sources(config, model.spec)
    source = train_source if split_name == "train" else val_source
    scores, labels, _ = _eval_pass(model, source, config.batch_size)
    row = compute_metrics(scores, labels,
                          config.threshold if threshold is None else threshold,
                          config.beta if beta is None else beta)
    return row, ckpt.header, source.n


@dataclass(frozen=True)
class PredictResult:
    score: float
    threshold: float
    verdict: str  # 'positive' | 'negative'
    borderline: bool

    @property
    def formatted(self) -> str:
        return f"{self.score * 100:.4f}%"

    @classmethod
    def from_score(cls, score: float, threshold: float) -> "PredictResult":
        return cls(
            score=score,
            threshold=threshold,
            verdict="positive" if score >= threshold else "negative",
            borderline=abs(score - threshold) < BORDERLINE_MARGIN,
        )


def predict_image(model: Model, image_path, age: float, gender: str, view: str,
                  threshold: float = 0.5) -> PredictResult:
    """Disease confidence for one image + patient metadata at a decision threshold."""
    color = "gray" if model.spec.input_shape[0] == 1 else "rgb"
    x = preprocess_image(Path(image_path), color, Path(image_path).name)[None]
    meta = encode_metadata(gender, age, view)[None] if model.spec.metadata_width else None
    with no_grad():
        out = _forward_batch(model, x.astype(np.float32), meta, "infer")
    score = float(scores_from_output(out.data, model.spec.output_kind)[0])
    return PredictResult.from_score(score, threshold)


# ---- comparison runs ------------------------------------------------------------------


@dataclass
class CompareResult:
    model: str
    row: MetricRow | None
    param_count: int | None
    train_seconds: float | None
    error: str | None = None


def compare(configs: list, out_dir) -> list:
    """Train+evaluate each config; failures are recorded per row and do not stop
    the remaining runs."""
    if not configs:
        raise ValueError("compare needs at least one config")
    results = []
    for i, config in enumerate(configs):
        try:
            report, _ = train(config, Path(out_dir) / f"run_{i:02d}_{config.model}")
            results.append(CompareResult(config.model, report.final,
                                         report.param_count, report.train_seconds))
        except Exception as exc:  # noqa: BLE001 - per-row failure is the contract
            results.append(CompareResult(config.model, None, None, None, error=str(exc)))
    return results


def compare_csv(results: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("model", *TABLE_COLUMNS))
    for r in results:
        if r.row is None:
            w.writerow((r.model, "", "", "", "", "", ""))
        else:
            w.writerow((r.model, f"{r.row.recall:.4f}", f"{r.row.precision:.4f}",
                        f"{r.row.f_beta:.4f}", f"{r.row.accuracy:.4f}",
                        r.param_count, f"{r.train_seconds:.2f}"))
    return buf.getvalue()
