"""Training loop with best-validation checkpointing, plus the evaluator.

Every stochastic draw derives from (seed, purpose, index) seed
sequences, so runs are bitwise reproducible and an interrupted run
resumed from a state file replays the exact same trajectory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses, metrics
from .data import Dataset
from .model import Model, save_checkpoint
from .optim import Adam, AdamConfig
from .tensor import Tensor, no_grad, zero_grad

__all__ = ["TrainConfig", "TrainResult", "TrainingDivergedError", "train", "evaluate",
           "write_report"]

ROC_MAX_POINTS = 2048


class TrainingDivergedError(RuntimeError):
    """The loss became non-finite; training state is not usable."""


@dataclass
class TrainConfig:
    """Protocol defaults: batch 8, at most 50 epochs, no early stopping,
    Adam 1e-3 with a single x0.1 step at epoch 30, best-val checkpointing.
    ``desk()`` shrinks the batch for laptop-scale runs."""

    batch_size: int = 8
    max_epochs: int = 50
    adam: AdamConfig = field(default_factory=AdamConfig)
    lr_step_epoch: int = 30
    lr_step_factor: float = 0.1
    seed: int = 0
    deep_supervision: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        kw = {"batch_size": 4, "max_epochs": 10}
        kw.update(overrides)
        return cls(**kw)

    def lr_at(self, epoch: int) -> float:
        lr = self.adam.lr
        if epoch >= self.lr_step_epoch:
            lr *= self.lr_step_factor
        return lr


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_val_loss: float
    checkpoint_path: Path
    history_path: Path


def _rng(seed: int, purpose: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(purpose, index)))


def _epoch_batches(indices, batch_size: int, shuffle_rng) -> list:
    order = list(shuffle_rng.permutation(len(indices)))
    shuffled = [indices[i] for i in order]
    return [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]


def _step_loss(model: Model, images, masks, loss_cfg, train_cfg, step_rng) -> Tensor:
    x = Tensor(images)
    target = Tensor(masks)
    if train_cfg.deep_supervision and model.config.decoder_mode == "multiscale":
        pred, heads = model(x, rng=step_rng, return_heads=True)
        loss = losses.segmentation_loss(target, pred, loss_cfg)
        aux = None
        for h in heads:
            term = losses.segmentation_loss(target, h, loss_cfg)
            aux = term if aux is None else aux + term
        return loss + aux * (1.0 / len(heads))
    pred = model(x, rng=step_rng)
    return losses.segmentation_loss(target, pred, loss_cfg)


def _forward_batches(model: Model, images: np.ndarray, batch_size: int) -> np.ndarray:
    preds = []
    with no_grad():
        for i in range(0, images.shape[0], batch_size):
            preds.append(model(Tensor(images[i:i + batch_size])).data)
    return np.concatenate(preds, axis=0)


def _val_record(model: Model, dataset: Dataset, indices, loss_cfg, batch_size: int):
    images, masks = dataset.subset(indices)
    was_training = model.training
    model.eval()
    preds = _forward_batches(model, images, batch_size)
    with no_grad():
        loss = float(losses.segmentation_loss(Tensor(masks), Tensor(preds), loss_cfg).data)
    model.train(was_training)
    counts = metrics.confusion(masks, preds)
    return loss, metrics.dice_from_counts(counts), metrics.tversky_from_counts(counts, 1.0, 1.0)


def _save_state(path: Path, model: Model, opt: Adam, epoch: int, best_epoch: int,
                best_val: float) -> None:
    arrays = {f"p/{k}": v for k, v in model.state_arrays().items()}
    arrays.update(opt.state_arrays())
    meta = np.array([epoch, opt.t, best_epoch], dtype=np.int64)
    np.savez(path, __meta__=meta, __best_val__=np.float64(best_val), **arrays)


def _load_state(path: Path, model: Model, opt: Adam):
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    epoch, t, best_epoch = (int(v) for v in arrays.pop("__meta__"))
    best_val = float(arrays.pop("__best_val__"))
    model.load_state_arrays({k[2:]: v for k, v in arrays.items() if k.startswith("p/")})
    opt.load_state({k: v for k, v in arrays.items() if k[0] in "mv"}, t)
    return epoch, best_epoch, best_val


def train(model: Model, dataset: Dataset, train_cfg: TrainConfig,
          loss_cfg: losses.LossConfig, out_dir, log=None,
          save_state_every: int = 0, resume_from=None) -> TrainResult:
    """Run the protocol: seeded shuffles, forward, loss, backward, Adam,
    per-epoch validation records, best-val checkpoint. Appends one JSON
    line per epoch to history.jsonl. On any failure, files created by
    this call are removed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    history_path = out / "history.jsonl"
    ckpt_path = out / "best.fnt1"
    created = [p for p in (history_path, ckpt_path, ckpt_path.with_suffix(".json"),
                           out / "state.npz") if not p.exists()]

    train_idx = list(dataset.train_indices)
    val_idx = list(dataset.val_indices) or train_idx  # fall back to train split
    if not train_idx:
        raise ValueError("dataset has no training indices")

    opt = Adam(dict(model.named_parameters()), train_cfg.adam)
    start_epoch = 0
    best_epoch = 0
    best_val = np.inf
    history = []
    if resume_from is not None:
        start_epoch, best_epoch, best_val = _load_state(Path(resume_from), model, opt)

    try:
        model.train()
        step = opt.t
        for epoch in range(start_epoch + 1, train_cfg.max_epochs + 1):
            lr = train_cfg.lr_at(epoch)
            batches = _epoch_batches(train_idx, train_cfg.batch_size,
                                     _rng(train_cfg.seed, 1, epoch))
            epoch_loss = 0.0
            for batch in batches:
                step += 1
                loss = _step_loss(model, dataset.images[batch], dataset.masks[batch],
                                  loss_cfg, train_cfg, _rng(train_cfg.seed, 2, step))
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, step {step}")
                loss.backward()
                opt.step(lr)
                zero_grad(model.parameters())
                epoch_loss += value
            val_loss, val_dice, val_jaccard = _val_record(
                model, dataset, val_idx, loss_cfg, train_cfg.batch_size)
            record = {"epoch": epoch, "lr": lr,
                      "train_loss": epoch_loss / len(batches),
                      "val_loss": val_loss, "val_dice": val_dice,
                      "val_jaccard": val_jaccard}
            history.append(record)
            with history_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            if val_loss < best_val:
                best_val = val_loss
                best_epoch = epoch
                save_checkpoint(model, ckpt_path)
            if save_state_every and epoch % save_state_every == 0:
                _save_state(out / "state.npz", model, opt, epoch, best_epoch, best_val)
            if log is not None:
                log(f"epoch {epoch}: train={record['train_loss']:.4f} "
                    f"val={val_loss:.4f} dice={val_dice:.4f} ji={val_jaccard:.4f}")
        return TrainResult(history, best_epoch, best_val, ckpt_path, history_path)
    except BaseException:
        for p in created:
            p.unlink(missing_ok=True)
        raise


def evaluate(model: Model, dataset: Dataset, threshold: float = 0.5,
             report_path=None, batch_size: int = 8, indices=None) -> dict:
    """Eval-mode sweep: global and per-image metrics, AUC, ROC polyline.

    When ``report_path`` is given, writes the JSON report there and the
    ROC polyline as a two-column CSV next to it (suffix .roc.csv).
    """
    if indices is None:
        indices = list(range(dataset.count))
    if not indices:
        raise ValueError("cannot evaluate an empty dataset")
    images, masks = dataset.subset(indices)
    was_training = model.training
    model.eval()
    preds = _forward_batches(model, images, batch_size)
    model.train(was_training)

    total = metrics.ConfusionCounts()
    per_image = []
    mean_acc = {name: 0.0 for name in metrics.METRIC_NAMES}
    for i in range(len(indices)):
        counts = metrics.confusion(masks[i], preds[i], threshold)
        total = total + counts
        m = metrics.compute_metrics(counts)
        per_image.append(m)
        for name in metrics.METRIC_NAMES:
            mean_acc[name] += m[name] / len(indices)
    fpr, tpr, auc = metrics.roc_curve(preds.reshape(-1), masks.reshape(-1))
    report = {
        "threshold": threshold,
        "count": len(indices),
        "confusion": total.as_dict(),
        "global": metrics.compute_metrics(total),
        "per_image_mean": mean_acc,
        "per_image": per_image,
        "auc": auc,
        "config": model.config.to_dict(),
    }
    if report_path is not None:
        write_report(report, report_path, fpr, tpr)
    return report


def _thin(a: np.ndarray, limit: int) -> np.ndarray:
    if a.size <= limit:
        return a
    idx = np.unique(np.round(np.linspace(0, a.size - 1, limit)).astype(int))
    return a[idx]


def write_report(report: dict, report_path, fpr=None, tpr=None) -> None:
    path = Path(report_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", "utf-8")
    if fpr is not None:
        roc_path = path.with_suffix(".roc.csv")
        f, t = _thin(np.asarray(fpr), ROC_MAX_POINTS), _thin(np.asarray(tpr), ROC_MAX_POINTS)
        lines = ["fpr,tpr"] + [f"{float(a)!r},{float(b)!r}" for a, b in zip(f, t)]
        roc_path.write_text("\n".join(lines) + "\n", "utf-8")
