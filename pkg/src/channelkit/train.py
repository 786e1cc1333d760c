"""Desk-scale training: data, SGD with momentum, the step schedule, metrics.

Everything is seeded through :mod:`channelkit.rng`.  Given the same config,
data and seed, a single-process run produces bit-identical metrics and
checkpoints.

Metrics rows: row 0 is measured before any update (train-mode forward over
the training set in its stored order, no statistics committed); row ``e`` for
``e >= 1`` averages the minibatch losses seen while training epoch ``e`` with
learning rate ``lr_at(e - 1)``.  ``eval_top1`` always uses inference mode.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .checkpoint import save_checkpoint
from .errors import DataError, FormatError, NumericalError, ParameterError, ShapeError
from .rng import derive_seed, seeded_integers, seeded_normal, seeded_permutation
from .zoo import Network

log = logging.getLogger(__name__)

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
METRICS_HEADER = ("epoch", "lr", "train_loss", "train_top1", "eval_top1")


# ---------------------------------------------------------------------------
# configuration and schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.1
    momentum: float = 0.9
    decay_factor: float = 0.1
    decay_epochs: tuple = (45, 60, 65, 70, 75)
    total_epochs: int = 80
    batch_size: int = 64
    dropout_p: float = 1e-4
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        d = self.decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ParameterError(f"decay_epochs must be strictly increasing, got {list(d)}")
        if d and (d[0] < 0 or d[-1] >= self.total_epochs):
            raise ParameterError(
                f"decay_epochs must lie in [0, total_epochs={self.total_epochs}), got {list(d)}")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.total_epochs < 0:
            raise ParameterError(f"total_epochs must be >= 0, got {self.total_epochs}")
        if self.base_lr < 0:
            raise ParameterError(f"base_lr must be >= 0, got {self.base_lr}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ParameterError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @classmethod
    def published(cls) -> "TrainConfig":
        """The full-length ImageNet schedule, kept for reference and tests."""
        return cls(batch_size=512)

    def with_epochs(self, epochs: int) -> "TrainConfig":
        """Same config over ``epochs`` epochs, dropping decays that no longer fit."""
        kept = tuple(e for e in self.decay_epochs if e < epochs)
        return TrainConfig(**{**asdict(self), "total_epochs": epochs, "decay_epochs": kept})

    def to_json(self) -> str:
        doc = asdict(self)
        doc["decay_epochs"] = list(self.decay_epochs)
        return json.dumps(doc, indent=2) + "\n"


def load_train_config(path) -> TrainConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    known = set(TrainConfig.__dataclass_fields__)
    unknown = sorted(set(doc) - known)
    if unknown:
        raise FormatError(f"{path}: unknown train config field(s) {unknown}")
    return TrainConfig(**doc)


def lr_at(epoch: int, config: TrainConfig) -> float:
    drops = sum(1 for e in config.decay_epochs if e <= epoch)
    return config.base_lr * config.decay_factor ** drops


def sgd_momentum_step(params, grads, velocity, lr: float, momentum: float):
    """Classical momentum, in place: ``v = momentum * v + g``; ``w -= lr * v``."""
    if not (len(params) == len(grads) == len(velocity)):
        raise ShapeError(f"got {len(params)} params, {len(grads)} grads, {len(velocity)} velocities")
    for w, g, v in zip(params, grads, velocity):
        if not (w.shape == g.shape == v.shape):
            raise ShapeError(f"shape mismatch: param {w.shape}, grad {g.shape}, velocity {v.shape}")
        v *= momentum
        v += g
        w -= lr * v
    return params, velocity


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, S, S) float64
    labels: np.ndarray  # (N,) int64
    n_classes: int = 10
    prototypes: np.ndarray | None = None  # class means, synthetic data only

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ShapeError(f"images {self.images.shape} do not match labels {self.labels.shape}")

    def __len__(self):
        return int(self.labels.shape[0])

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.n_classes)


def read_cifar10_binary(path) -> Dataset:
    """Records of one label byte plus 3072 channel-major pixel bytes, scaled by 1/255."""
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD
        raise FormatError(f"{path}: {len(raw)} bytes is not a multiple of {CIFAR_RECORD}; "
                          f"record {whole} truncated at offset {whole * CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        i = int(bad[0])
        raise DataError(f"{path}: label {labels[i]} > 9 in record {i} (offset {i * CIFAR_RECORD})")
    images = rec[:, 1:].reshape(-1, *CIFAR_SHAPE).astype(np.float64) / 255.0
    return Dataset(images, labels, 10)


def _concat(parts) -> Dataset:
    if not parts:
        return Dataset(np.zeros((0, *CIFAR_SHAPE)), np.zeros(0, np.int64))
    return Dataset(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.labels for p in parts]))


def channel_stats(ds: Dataset):
    if len(ds) == 0:
        return np.zeros(3), np.ones(3)
    mean = ds.images.mean(axis=(0, 2, 3))
    std = ds.images.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


def normalize(ds: Dataset, mean, std) -> Dataset:
    return Dataset((ds.images - mean[None, :, None, None]) / std[None, :, None, None],
                   ds.labels, ds.n_classes)


def load_cifar10(path, train_limit: int | None = None, test_limit: int | None = None):
    """Load the binary distribution from a directory, or a single batch file.

    A directory must hold ``data_batch_*.bin`` and ``test_batch.bin``; the
    result is ``(train, test)`` normalised per channel with training-split
    statistics (computed after ``train_limit`` is applied).  A single file is
    returned as one raw dataset in ``[0, 1]``.
    """
    path = Path(path)
    if path.is_file():
        return read_cifar10_binary(path)
    if not path.is_dir():
        raise DataError(f"CIFAR-10 path {path} does not exist")
    train_files = sorted(path.glob("data_batch_*.bin"))
    test_file = path / "test_batch.bin"
    if not train_files or not test_file.exists():
        raise DataError(f"{path}: expected data_batch_*.bin and test_batch.bin")
    train = _concat([read_cifar10_binary(f) for f in train_files])
    test = read_cifar10_binary(test_file)
    if train_limit is not None:
        train = train.subset(train_limit)
    if test_limit is not None:
        test = test.subset(test_limit)
    mean, std = channel_stats(train)
    return normalize(train, mean, std), normalize(test, mean, std)


def synthetic_dataset(n_classes: int = 10, per_class: int = 50, size: int = 32, seed: int = 0,
                      noise: float = 0.1, channels: int = 3, prototypes=None) -> Dataset:
    """Gaussian class prototypes plus isotropic Gaussian noise, shuffled by seed.

    Pass the ``prototypes`` of an existing dataset to draw a held-out split
    from the same classes.
    """
    if n_classes < 1 or per_class < 0 or size < 1:
        raise ParameterError("synthetic_dataset needs n_classes >= 1, per_class >= 0, size >= 1")
    if noise < 0:
        raise ParameterError(f"noise must be >= 0, got {noise}")
    if prototypes is None:
        prototypes = seeded_normal((n_classes, channels, size, size), derive_seed(seed, "prototypes"))
    labels = np.repeat(np.arange(n_classes), per_class)
    order = seeded_permutation(labels.size, derive_seed(seed, "order"))
    labels = labels[order]
    jitter = seeded_normal((labels.size, channels, size, size), derive_seed(seed, "noise"))
    return Dataset(prototypes[labels] + noise * jitter, labels, n_classes, prototypes)


def augment(image: np.ndarray, seed: int, pad: int = 4, offset=None, flip=None) -> np.ndarray:
    """Zero-pad by ``pad``, crop back to size at a random offset, maybe mirror.

    ``offset=(dy, dx)`` in ``[0, 2*pad]`` and ``flip`` force the random choices.
    """
    c, h, w = image.shape
    draws = seeded_integers(3, 2 * pad + 1, seed)
    dy, dx = (int(draws[0]), int(draws[1])) if offset is None else offset
    if flip is None:
        flip = bool(draws[2] % 2)
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad))
    padded[:, pad:pad + h, pad:pad + w] = image
    out = padded[:, dy:dy + h, dx:dx + w]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, seed: int) -> np.ndarray:
    return np.stack([augment(img, derive_seed(seed, i)) for i, img in enumerate(images)])


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_top1: float
    eval_top1: float


@dataclass
class Metrics:
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in self.rows:
            w.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.train_top1),
                        repr(r.eval_top1)])
        return buf.getvalue()

    @property
    def final(self) -> EpochMetrics:
        return self.rows[-1]


class TrainingDiverged(NumericalError):
    def __init__(self, message, metrics):
        super().__init__(message)
        self.metrics = metrics


def _batches(n, batch_size):
    for start in range(0, n, batch_size):
        yield start, min(start + batch_size, n)


def _top1(logits, labels) -> int:
    return int((np.argmax(logits, axis=1) == labels).sum())


def evaluate(net: Network, ds: Dataset, batch_size: int = 64) -> float:
    """Top-1 accuracy in inference mode; 0.0 for an empty dataset."""
    if len(ds) == 0:
        return 0.0
    hits = 0
    for a, b in _batches(len(ds), batch_size):
        hits += _top1(net.forward(ds.images[a:b], "infer"), ds.labels[a:b])
    return hits / len(ds)


def _initial_train_stats(net, ds, batch_size):
    loss_sum, hits = 0.0, 0
    for a, b in _batches(len(ds), batch_size):
        logits = net.forward(ds.images[a:b], "train", 0)
        loss, _ = ops.softmax_cross_entropy(logits, ds.labels[a:b])
        loss_sum += loss * (b - a)
        hits += _top1(logits, ds.labels[a:b])
    net.discard_batch_stats()  # row 0 must not move running stats
    return loss_sum / max(len(ds), 1), hits / max(len(ds), 1)


def train(net: Network, train_set: Dataset, config: TrainConfig, eval_set: Dataset | None = None,
          out_dir=None) -> Metrics:
    """Run ``config.total_epochs`` epochs of SGD with momentum.

    With ``out_dir`` set, ``metrics.csv`` is rewritten after every epoch and
    ``best.cnkt`` holds the state with the highest ``eval_top1`` so far
    (ties keep the earlier one).  A non-finite loss raises
    :class:`TrainingDiverged`; files already written are left untouched.
    """
    s = net.spec.input_size
    if train_set.images.shape[1:] != (3, s, s):
        raise ShapeError(f"{net.name} takes 3x{s}x{s} inputs, dataset has "
                         f"{train_set.images.shape[1:]}")
    if len(train_set) == 0:
        raise DataError("training set is empty")
    eval_set = train_set if eval_set is None else eval_set
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    net.set_dropout(config.dropout_p)
    params = net.params()
    velocity = [np.zeros_like(p.value) for p in params]
    metrics = Metrics()
    best = -1.0

    def record(row):
        nonlocal best
        metrics.rows.append(row)
        log.info("epoch %d lr %.3g loss %.4f train %.3f eval %.3f", row.epoch, row.lr,
                 row.train_loss, row.train_top1, row.eval_top1)
        if out is None:
            return
        (out / "metrics.csv").write_text(metrics.to_csv())
        if row.eval_top1 > best:
            best = row.eval_top1
            save_checkpoint(out / "best.cnkt", net.state())

    loss0, acc0 = _initial_train_stats(net, train_set, config.batch_size)
    record(EpochMetrics(0, lr_at(0, config), loss0, acc0, evaluate(net, eval_set, config.batch_size)))

    step = 0
    n = len(train_set)
    for epoch in range(config.total_epochs):
        lr = lr_at(epoch, config)
        order = seeded_permutation(n, derive_seed(config.seed, "shuffle", epoch))
        loss_sum, hits = 0.0, 0
        for a, b in _batches(n, config.batch_size):
            idx = order[a:b]
            x = train_set.images[idx]
            if config.augment:
                x = augment_batch(x, derive_seed(config.seed, "augment", step))
            y = train_set.labels[idx]
            logits = net.forward(x, "train", derive_seed(config.seed, "dropout", step))
            loss, grad = ops.softmax_cross_entropy(logits, y)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, step {step}", metrics)
            net.zero_grad()
            net.backward(grad)
            net.update_running_stats()
            sgd_momentum_step([p.value for p in params], [p.grad for p in params], velocity,
                              lr, config.momentum)
            loss_sum += loss * (b - a)
            hits += _top1(logits, y)
            step += 1
        record(EpochMetrics(epoch + 1, lr, loss_sum / n, hits / n,
                            evaluate(net, eval_set, config.batch_size)))
    return metrics


# ---------------------------------------------------------------------------
# classifier sparsity
# ---------------------------------------------------------------------------

HIST_BINS = 64
DEFAULT_TAUS = (0.001, 0.01, 0.05, 0.1)


@dataclass
class SparsityReport:
    counts: np.ndarray          # (64,)
    edges: np.ndarray           # (65,)
    fractions: dict             # tau -> fraction with |w| < tau
    active_per_class: dict      # tau -> (n,) counts of |w| >= tau per row

    def to_text(self, width: int = 40) -> str:
        lines = ["weight histogram (64 bins)"]
        peak = max(int(self.counts.max()), 1)
        for c, lo, hi in zip(self.counts, self.edges[:-1], self.edges[1:]):
            bar = "#" * int(round(width * c / peak))
            lines.append(f"[{lo:+.4e}, {hi:+.4e}) {int(c):>8} {bar}")
        lines.append("")
        lines.append(f"{'tau':>10} {'frac |w|<tau':>14} {'active/class min':>17} "
                     f"{'mean':>8} {'max':>6}")
        for tau in self.fractions:
            act = self.active_per_class[tau]
            lines.append(f"{tau:>10.4g} {self.fractions[tau]:>14.4f} {int(act.min()):>17} "
                         f"{act.mean():>8.2f} {int(act.max()):>6}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        for c, lo, hi in zip(self.counts, self.edges[:-1], self.edges[1:]):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        w.writerow([])
        w.writerow(["tau", "fraction_below", "class", "active"])
        for tau in self.fractions:
            for k, a in enumerate(self.active_per_class[tau]):
                w.writerow([tau, repr(self.fractions[tau]), k, int(a)])
        return buf.getvalue()


def analyze_fc_sparsity(weights: np.ndarray, thresholds=DEFAULT_TAUS) -> SparsityReport:
    """Histogram and threshold sparsity of an ``(n_classes, m)`` classifier matrix."""
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise DataError("classifier weight matrix is empty")
    if w.ndim != 2:
        raise ShapeError(f"expected an (n_classes, m) matrix, got shape {w.shape}")
    counts, edges = np.histogram(w, bins=HIST_BINS, range=(float(w.min()), float(w.max())))
    mag = np.abs(w)
    fractions, active = {}, {}
    for tau in thresholds:
        tau = float(tau)
        if tau <= 0:
            raise ParameterError(f"thresholds must be positive, got {tau}")
        fractions[tau] = float((mag < tau).mean())
        active[tau] = (mag >= tau).sum(axis=1)
    return SparsityReport(counts, edges, fractions, active)
