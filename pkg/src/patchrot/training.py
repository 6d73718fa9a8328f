"""Training protocols: self-supervised pretraining, linear evaluation,
finetuning, plus evaluation and embedding export.

Default hyperparameters (all overridable):
  ssl          200 epochs, batch 64, lr 0.1, step decay x0.2 at 60%/80%
  linear-eval  100 epochs, batch 32, lr 0.01 constant, encoder frozen
  finetune      20 epochs, batch 32, lr 0.001 constant, everything trains
SGD momentum 0.9, weight decay 5e-4 throughout.

The SSL objective is the mean cross-entropy over all generated pretext
samples: every source image contributes one sample per pretext class per
epoch, so the reported epoch loss discretizes the normalized double sum
over images and transformation labels.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import checkpoint, models, pretext, seeding
from .errors import (
    EmptyDatasetError,
    NonFiniteLossError,
    NonFiniteValueError,
)

PHASES = ("ssl", "linear-eval", "finetune")

VARIANT_HEADS = {
    pretext.ROTNET: models.ROTNET4,
    pretext.PATCH_ROTNET: models.PATCHROT8,
    pretext.PATCH_RELNET: models.RELNET4,
}

EVAL_BATCH = 128


@dataclass
class TrainConfig:
    phase: str
    epochs: int
    batch_size: int
    lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: str = "constant"  # "constant" | "step"
    milestones: tuple = (0.6, 0.8)
    decay_factor: float = 0.2
    seed: int = 0
    stop_at_accuracy: float | None = None
    timing: bool = True  # write wall seconds into metrics CSVs

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs/batch_size/lr must be positive")

    @classmethod
    def ssl(cls, **overrides):
        base = dict(phase="ssl", epochs=200, batch_size=64, lr=0.1, lr_schedule="step")
        base.update(overrides)
        return cls(**base)

    @classmethod
    def linear_eval(cls, **overrides):
        base = dict(phase="linear-eval", epochs=100, batch_size=32, lr=0.01)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def finetune(cls, **overrides):
        base = dict(phase="finetune", epochs=20, batch_size=32, lr=0.001)
        base.update(overrides)
        return cls(**base)

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        passed = sum(1 for m in self.milestones if epoch >= int(m * self.epochs))
        return self.lr * self.decay_factor ** passed


@dataclass
class RunMetrics:
    epoch_loss: list = field(default_factory=list)
    epoch_accuracy: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    final_test_accuracy: float | None = None

    def write_csv(self, path, timing: bool = True) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,loss,accuracy,seconds\n")
            rows = zip(self.epoch_loss, self.epoch_accuracy, self.epoch_seconds)
            for e, (loss, acc, sec) in enumerate(rows):
                sec_text = f"{sec:.3f}" if timing else "0.000"
                fh.write(f"{e},{loss:.9g},{acc:.9g},{sec_text}\n")


class _EpochStats:
    """Sample-weighted loss/accuracy accumulator (float64)."""

    def __init__(self):
        self.loss_sum = 0.0
        self.correct = 0
        self.count = 0

    def update(self, loss_value, logits, labels):
        n = labels.size
        self.loss_sum += float(loss_value) * n
        self.correct += int((logits.argmax(axis=1) == labels).sum())
        self.count += n

    @property
    def mean_loss(self):
        return self.loss_sum / self.count

    @property
    def accuracy(self):
        return self.correct / self.count


def _train_step(model, batch, cfg, lr, params, velocities, where):
    try:
        with ad.Tape() as tape:
            xb = ad.Tensor(batch.images_b) if batch.images_b is not None else None
            logits = model.forward(ad.Tensor(batch.images), xb, train=True)
            loss = ad.softmax_cross_entropy(logits, batch.labels)
        tape.backward(loss)
    except NonFiniteValueError as exc:
        raise NonFiniteLossError(f"aborting: non-finite values at {where}: {exc}") from exc
    ad.sgd_step(params, lr=lr, momentum=cfg.momentum,
                weight_decay=cfg.weight_decay, velocities=velocities)
    ad.zero_grads(params)
    return loss, logits


def pretrain_ssl(dataset, variant: str, spec: models.EncoderSpec, cfg: TrainConfig,
                 pcfg: pretext.PretextConfig | None = None, out_dir=None,
                 verbose: bool = False):
    """Minimize the pretext cross-entropy objective; returns (model, metrics).

    Deterministic given cfg.seed.  When out_dir is set, writes best.ckpt
    (by pretext train accuracy) and last.ckpt.
    """
    images = dataset.images if hasattr(dataset, "images") else list(dataset)
    if len(images) == 0:
        raise EmptyDatasetError("pretraining needs at least one image")
    if variant not in VARIANT_HEADS:
        raise ValueError(f"unknown variant {variant!r}")
    if pcfg is None:
        pcfg = pretext.PretextConfig(rng_seed=cfg.seed)
    else:
        pcfg = replace(pcfg, rng_seed=cfg.seed)

    model = models.SslModel(spec, VARIANT_HEADS[variant], cfg.seed)
    params = [t for _, t in model.named_params()]
    velocities = {}
    metrics = RunMetrics()
    best_acc = -1.0

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        stats = _EpochStats()
        for bi, batch in enumerate(
            pretext.build_epoch(images, variant, pcfg, cfg.batch_size, epoch)
        ):
            loss, logits = _train_step(model, batch, cfg, lr, params, velocities,
                                       f"epoch {epoch} batch {bi}")
            stats.update(loss.data, logits.data, batch.labels)
        metrics.epoch_loss.append(stats.mean_loss)
        metrics.epoch_accuracy.append(stats.accuracy)
        metrics.epoch_seconds.append(time.perf_counter() - t0)
        if verbose:
            print(f"epoch {epoch}: loss {stats.mean_loss:.4f} "
                  f"pretext_acc {stats.accuracy:.4f} ({metrics.epoch_seconds[-1]:.1f}s)")
        if out_dir is not None:
            if stats.accuracy > best_acc:
                best_acc = stats.accuracy
                checkpoint.save(model, f"{out_dir}/best.ckpt")
            checkpoint.save(model, f"{out_dir}/last.ckpt")
        if cfg.stop_at_accuracy is not None and stats.accuracy >= cfg.stop_at_accuracy:
            break
    return model, metrics


def _encode_dataset(encoder, images) -> np.ndarray:
    """Eval-mode latents for a list of HWC images, in dataset order."""
    out = []
    for lo in range(0, len(images), EVAL_BATCH):
        chunk = np.stack([im.transpose(2, 0, 1) for im in images[lo : lo + EVAL_BATCH]])
        z, _ = encoder.forward(ad.Tensor(np.ascontiguousarray(chunk)), train=False)
        out.append(z.data)
    return np.concatenate(out, axis=0)


def copy_encoder_state(src, dst) -> None:
    """Copy encoder parameters and BN running stats between models."""
    src_params = dict(src.named_params())
    src_buffers = dict(src.named_buffers())
    for name, t in dst.named_params():
        if name.startswith("encoder."):
            t.data[...] = src_params[name].data
    for name, arr in dst.named_buffers():
        arr[...] = src_buffers[name]


def linear_eval(pretrained, train_ds, test_ds, cfg: TrainConfig,
                hidden: int = 128, verbose: bool = False):
    """Train the two-layer head on frozen encoder features.

    The encoder is bit-frozen (eval-mode BN, no gradients); features are
    extracted once and the head trains on them.  Returns
    (downstream model, metrics with final_test_accuracy).
    """
    if len(train_ds.images) == 0 or len(test_ds.images) == 0:
        raise EmptyDatasetError("linear evaluation needs labeled train and test data")
    classes = max(train_ds.num_classes, test_ds.num_classes)
    if classes < 2:
        raise EmptyDatasetError("need at least 2 classes")

    model = models.DownstreamModel(pretrained.encoder.spec, classes, cfg.seed, hidden=hidden)
    copy_encoder_state(pretrained, model)

    feats_train = _encode_dataset(model.encoder, train_ds.images)
    feats_test = _encode_dataset(model.encoder, test_ds.images)

    head_params = [t for _, t in model.head.named_params()]
    velocities = {}
    metrics = RunMetrics()
    n = feats_train.shape[0]
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        order = seeding.substream(cfg.seed, seeding.SHUFFLE, epoch).permutation(n)
        stats = _EpochStats()
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            labels = train_ds.labels[idx]
            try:
                with ad.Tape() as tape:
                    logits = model.head(ad.Tensor(feats_train[idx]))
                    loss = ad.softmax_cross_entropy(logits, labels)
                tape.backward(loss)
            except NonFiniteValueError as exc:
                raise NonFiniteLossError(f"aborting: non-finite values at epoch {epoch}: {exc}") from exc
            ad.sgd_step(head_params, lr=lr, momentum=cfg.momentum,
                        weight_decay=cfg.weight_decay, velocities=velocities)
            ad.zero_grads(head_params)
            stats.update(loss.data, logits.data, labels)
        metrics.epoch_loss.append(stats.mean_loss)
        metrics.epoch_accuracy.append(stats.accuracy)
        metrics.epoch_seconds.append(time.perf_counter() - t0)
        if verbose:
            print(f"epoch {epoch}: loss {stats.mean_loss:.4f} "
                  f"train_acc {stats.accuracy:.4f} ({metrics.epoch_seconds[-1]:.1f}s)")

    test_logits = model.head(ad.Tensor(feats_test)).data
    metrics.final_test_accuracy = float((test_logits.argmax(axis=1) == test_ds.labels).mean())
    return model, metrics


def finetune(pretrained, train_ds, test_ds, cfg: TrainConfig,
             hidden: int = 128, verbose: bool = False):
    """Train encoder and two-layer head jointly; returns (model, metrics)."""
    if len(train_ds.images) == 0 or len(test_ds.images) == 0:
        raise EmptyDatasetError("finetuning needs labeled train and test data")
    classes = max(train_ds.num_classes, test_ds.num_classes)
    model = models.DownstreamModel(pretrained.encoder.spec, classes, cfg.seed, hidden=hidden)
    copy_encoder_state(pretrained, model)

    params = [t for _, t in model.named_params()]
    velocities = {}
    metrics = RunMetrics()
    n = len(train_ds.images)
    stacked = np.ascontiguousarray(
        np.stack([im.transpose(2, 0, 1) for im in train_ds.images])
    )
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        order = seeding.substream(cfg.seed, seeding.SHUFFLE, epoch).permutation(n)
        stats = _EpochStats()
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            labels = train_ds.labels[idx]
            try:
                with ad.Tape() as tape:
                    logits = model.forward(ad.Tensor(stacked[idx]), train=True)
                    loss = ad.softmax_cross_entropy(logits, labels)
                tape.backward(loss)
            except NonFiniteValueError as exc:
                raise NonFiniteLossError(f"aborting: non-finite values at epoch {epoch}: {exc}") from exc
            ad.sgd_step(params, lr=lr, momentum=cfg.momentum,
                        weight_decay=cfg.weight_decay, velocities=velocities)
            ad.zero_grads(params)
            stats.update(loss.data, logits.data, labels)
        metrics.epoch_loss.append(stats.mean_loss)
        metrics.epoch_accuracy.append(stats.accuracy)
        metrics.epoch_seconds.append(time.perf_counter() - t0)
        if verbose:
            print(f"epoch {epoch}: loss {stats.mean_loss:.4f} "
                  f"train_acc {stats.accuracy:.4f} ({metrics.epoch_seconds[-1]:.1f}s)")

    metrics.final_test_accuracy = evaluate(model, test_ds)
    return model, metrics


def evaluate(model, test_ds) -> float:
    """Top-1 accuracy over the dataset, deterministic iteration order."""
    if len(test_ds.images) == 0:
        raise EmptyDatasetError("evaluate needs a non-empty test set")
    correct = 0
    for lo in range(0, len(test_ds.images), EVAL_BATCH):
        chunk = test_ds.images[lo : lo + EVAL_BATCH]
        x = np.ascontiguousarray(np.stack([im.transpose(2, 0, 1) for im in chunk]))
        logits = model.forward(ad.Tensor(x), train=False)
        correct += int((logits.data.argmax(axis=1) == test_ds.labels[lo : lo + len(chunk)]).sum())
    return correct / len(test_ds.images)


def pretext_accuracy(model, images, variant: str, pcfg: pretext.PretextConfig,
                     batch_size: int = EVAL_BATCH) -> float:
    """Eval-mode accuracy of the SSL model on freshly generated samples."""
    correct = total = 0
    for batch in pretext.build_epoch(images, variant, pcfg, batch_size):
        xb = ad.Tensor(batch.images_b) if batch.images_b is not None else None
        logits = model.forward(ad.Tensor(batch.images), xb, train=False)
        correct += int((logits.data.argmax(axis=1) == batch.labels).sum())
        total += batch.labels.size
    return correct / total


def export_embeddings(model, dataset, path) -> None:
    """CSV of latents: one row per sample, label then 64 floats, dataset order."""
    latents = _encode_dataset(model.encoder, dataset.images)
    labels = dataset.labels if dataset.labels is not None else np.full(len(dataset.images), -1)
    with open(path, "w") as fh:
        for label, row in zip(labels, latents):
            fields = ",".join(f"{v:.9g}" for v in row)
            fh.write(f"{int(label)},{fields}\n")
