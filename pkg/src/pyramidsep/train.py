"""Epoch loop, evaluation, metrics CSV and resumable training checkpoints."""

from __future__ import annotations

import csv
import logging
import time
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import checkpoint as ckpt
from .data import LabeledImageSet, PreprocessSpec, augment_batch, normalize_array
from .model import Network, NetworkSpec, build
from .multi_model import ReplicaGroup, replica_rng_streams, split_batch
from .optim import TrainConfig, lr_at_epoch
from .tensor import precision

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "lr", "train_loss", "train_err", "test_err", "seconds")
_DATA_STREAM = 0xDA7A


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch: int, batch: int, lr: float, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}, lr {lr:g}")
        self.epoch, self.batch, self.lr, self.loss = epoch, batch, lr, loss


def data_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(epoch, _DATA_STREAM)))


def _prepare(images: np.ndarray, preprocess: Optional[PreprocessSpec], rng, augment: bool) -> np.ndarray:
    if augment:
        crop = preprocess is None or preprocess.random_crop
        flip = preprocess is None or preprocess.horizontal_flip
        images = augment_batch(images, rng, crop=crop, flip=flip)
    if preprocess is not None:
        images = normalize_array(images, preprocess)
    return images


def train_epoch(
    group: Union[ReplicaGroup, Network],
    data: LabeledImageSet,
    cfg: TrainConfig,
    epoch: int,
    preprocess: Optional[PreprocessSpec] = None,
    test_data: Optional[LabeledImageSet] = None,
) -> dict:
    """Run one epoch; returns the metrics record for it.

    Shuffling/augmentation and gate draws come from generators derived from
    ``(cfg.seed, epoch)``, so an epoch is reproducible on its own (which is
    what makes checkpoint resumption bit-exact).  The trailing partial batch
    is dropped.
    """
    if isinstance(group, Network):
        group = ReplicaGroup(group)
    start = time.perf_counter()
    lr = lr_at_epoch(cfg, epoch)
    n_batches = len(data) // cfg.batch_size
    if n_batches == 0:
        raise ValueError(f"dataset of {len(data)} samples is smaller than one batch of {cfg.batch_size}")
    rng = data_rng(cfg.seed, epoch)
    gate_rngs = replica_rng_streams(cfg.seed, group.model_count, epoch)
    order = rng.permutation(len(data))
    group.train()
    loss_sum, errors, seen = 0.0, 0, 0
    for b in range(n_batches):
        idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
        images = _prepare(data.images[idx], preprocess, rng, cfg.augment)
        subs = split_batch(images, data.labels[idx], group.model_count)
        out = group.synchronized_step(subs, lr, cfg, rngs=gate_rngs)
        if not np.isfinite(out["loss"]):
            raise NonFiniteLossError(epoch, b, lr, out["loss"])
        loss_sum += out["loss"]
        errors += out["errors"]
        seen += out["samples"]
    record = {
        "epoch": epoch,
        "lr": lr,
        "train_loss": loss_sum / n_batches,
        "train_err": errors / seen,
        "test_err": None,
    }
    if test_data is not None:
        record["test_err"] = evaluate(group, test_data, preprocess)
    record["seconds"] = time.perf_counter() - start
    if group.model_count > 1:
        record["models"] = group.model_count
    logger.info("epoch %d lr %.4g loss %.4f train_err %.4f test_err %s", epoch, lr, record["train_loss"], record["train_err"], record["test_err"])
    return record


def predict(net: Network, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Inference-mode logits; restores the network's previous mode."""
    was_training = net.training
    net.eval()
    try:
        chunks = [net.forward(images[i : i + batch_size]).data for i in range(0, len(images), batch_size)]
    finally:
        if was_training:
            net.train()
    return np.concatenate(chunks, axis=0)


def evaluate(
    net: Union[ReplicaGroup, Network],
    data: LabeledImageSet,
    preprocess: Optional[PreprocessSpec] = None,
    batch_size: int = 256,
) -> float:
    """Top-1 error; ties resolve to the lowest class index."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if isinstance(net, ReplicaGroup):
        net = net.consolidated()
    images = data.images if preprocess is None else normalize_array(data.images, preprocess)
    logits = predict(net, images, batch_size)
    return float(np.mean(np.argmax(logits, axis=1) != data.labels))


# -- metrics CSV ---------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.6g}"


def metrics_fields(model_count: int = 1):
    return METRIC_FIELDS + (("models",) if model_count > 1 else ())


def format_metrics_row(record: dict, fields: Sequence[str]) -> list:
    return [_fmt(record.get(f)) for f in fields]


class MetricsLog:
    """Append-only CSV with a fixed header; one row per epoch."""

    def __init__(self, path, model_count: int = 1):
        self.path = Path(path)
        self.fields = metrics_fields(model_count)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(self.fields)

    def append(self, record: dict) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(format_metrics_row(record, self.fields))

    def truncate_after(self, epoch: int) -> None:
        """Drop rows for epochs > ``epoch`` (used when resuming into a run dir)."""
        rows = read_metrics(self.path)
        with open(self.path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.fields)
            for row in rows:
                if int(row["epoch"]) <= epoch:
                    w.writerow([row.get(f, "") for f in self.fields])


def read_metrics(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- training checkpoints ---------------------------------------------------------

def save_training_checkpoint(path, group: ReplicaGroup, cfg: TrainConfig, epoch: int, preprocess: Optional[PreprocessSpec] = None) -> None:
    """Everything needed to continue after ``epoch`` bit-exactly.

    Plain parameter/buffer names hold the consolidated (replica-averaged)
    model, so the file also loads as an ordinary network checkpoint.
    """
    arrays = dict(group.consolidated().state_dict())
    for i, r in enumerate(group.replicas):
        for name, arr in r.buffers().items():
            arrays[f"replica{i}/{name}"] = arr
    for i, opt in enumerate(group.optimizers):
        for name, v in opt.velocity.items():
            arrays[f"velocity{i}/{name}"] = v
    meta = {
        "epoch": epoch,
        "steps": group.steps,
        "train_config": cfg.to_dict(),
        "preprocess": None if preprocess is None else preprocess.to_manifest(),
    }
    ckpt.save(path, group.primary.spec.to_dict(), arrays, meta)


def load_training_checkpoint(path):
    """Returns ``(group, cfg, last_epoch, preprocess)``."""
    spec_dict, arrays, meta = ckpt.load(path)
    cfg = TrainConfig(**meta["train_config"])
    spec = NetworkSpec.from_dict(spec_dict)
    with precision(np.float32):
        net = build(spec, 0)
    net.load_state_dict(arrays)
    group = ReplicaGroup.from_config(net, cfg)
    for i, r in enumerate(group.replicas):
        for name, arr in r.buffers().items():
            arr[...] = arrays[f"replica{i}/{name}"]
    for i, opt in enumerate(group.optimizers):
        for name in opt.velocity:
            opt.velocity[name][...] = arrays[f"velocity{i}/{name}"]
    group.steps = meta.get("steps", 0)
    pre = meta.get("preprocess")
    return group, cfg, meta["epoch"], (None if pre is None else PreprocessSpec.from_manifest(pre))


def fit(
    spec: NetworkSpec,
    cfg: TrainConfig,
    train_data: LabeledImageSet,
    test_data: Optional[LabeledImageSet] = None,
    preprocess: Optional[PreprocessSpec] = None,
    out_dir=None,
    checkpoint_every: int = 25,
    resume_from=None,
    epochs: Optional[int] = None,
):
    """Train for ``cfg.total_epochs`` (or ``epochs`` more) and return ``(group, records)``.

    With ``out_dir`` set, metrics go to ``metrics.csv`` and checkpoints to
    ``checkpoint_epochNNNN.bin`` every ``checkpoint_every`` epochs plus
    ``final.bin``.
    """
    if resume_from is not None:
        group, saved_cfg, last, saved_pre = load_training_checkpoint(resume_from)
        if saved_cfg != cfg:
            logger.warning("resuming with a config that differs from the checkpoint's")
        preprocess = preprocess or saved_pre
        first = last + 1
    else:
        group = ReplicaGroup.from_config(build(spec, cfg.seed), cfg)
        first = 0
    stop = cfg.total_epochs if epochs is None else min(cfg.total_epochs, first + epochs)
    log = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log = MetricsLog(out_dir / "metrics.csv", group.model_count)
        log.truncate_after(first - 1)
    records = []
    for epoch in range(first, stop):
        rec = train_epoch(group, train_data, cfg, epoch, preprocess, test_data)
        records.append(rec)
        if log is not None:
            log.append(rec)
            if checkpoint_every and (epoch + 1) % checkpoint_every == 0:
                save_training_checkpoint(out_dir / f"checkpoint_epoch{epoch + 1:04d}.bin", group, cfg, epoch, preprocess)
    if out_dir is not None and stop > first:
        save_training_checkpoint(out_dir / "final.bin", group, cfg, stop - 1, preprocess)
    return group, records
