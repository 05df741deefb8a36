"""Training loop, evaluation, prediction and checkpoint files."""
from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import (
    BatchNorm2D,
    Network,
    NetworkConfig,
    ShapeMismatch,
    adam_init,
    adam_step,
    one_hot,
)

log = logging.getLogger(__name__)

# label indices: Class I (appliance absent) and Class II (present)
ABSENT, PRESENT = 0, 1

MAGIC = b"IMGN"
FORMAT_VERSION = 1


class TrainerError(ValueError):
    pass


class EmptySet(TrainerError):
    pass


class CheckpointError(TrainerError):
    pass


class BadMagic(CheckpointError):
    pass


class UnsupportedVersion(CheckpointError):
    pass


class TruncatedFile(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 125
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0
    shuffle_each_epoch: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2 or not self.lr > 0:
            raise TrainerError("need epochs >= 1, batch_size >= 2 and lr > 0")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float


@dataclass(frozen=True)
class Metrics:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total


def images_to_input(images) -> np.ndarray:
    """``(N, H, W, 3)`` uint8 images to ``(N, 3, H, W)`` float64 in [0, 1]."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    return images.transpose(0, 3, 1, 2).astype(np.float64) / 255.0


def predicted_labels(probs: np.ndarray) -> np.ndarray:
    # ties go to Class I
    return (probs[:, PRESENT] > probs[:, ABSENT]).astype(np.int64)


def metrics_from_predictions(y_true, y_pred) -> Metrics:
    """Confusion counts with Class II (appliance present) as the positive class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if len(y_true) == 0:
        raise EmptySet("no samples to evaluate")
    pos, pred_pos = y_true == PRESENT, y_pred == PRESENT
    return Metrics(
        tp=int(np.sum(pos & pred_pos)),
        tn=int(np.sum(~pos & ~pred_pos)),
        fp=int(np.sum(~pos & pred_pos)),
        fn=int(np.sum(pos & ~pred_pos)),
    )


def _check_set(x, y, config: NetworkConfig, name: str):
    if len(x) == 0:
        raise EmptySet(f"{name} set is empty")
    if x.shape[1:] != (config.channels, config.input_side, config.input_side):
        raise ShapeMismatch(f"{name} inputs have shape {x.shape[1:]}, network expects "
                            f"{(config.channels, config.input_side, config.input_side)}")
    if len(y) != len(x) or not np.isin(y, (ABSENT, PRESENT)).all():
        raise TrainerError(f"{name} labels must be 0/1 and match the inputs")


def _batches(n: int, batch_size: int, order: np.ndarray):
    for i in range(0, n, batch_size):
        idx = order[i:i + batch_size]
        if len(idx) >= 2:  # batchnorm needs two samples
            yield idx


def predict_proba(network: Network, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = [network.predict_proba(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, 2))


def evaluate(network: Network, x: np.ndarray, y) -> Metrics:
    """Inference-mode confusion counts over ``(x, y)``."""
    if len(x) == 0:
        raise EmptySet("no samples to evaluate")
    return metrics_from_predictions(y, predicted_labels(predict_proba(network, x)))


def predict(network: Network, image: np.ndarray) -> tuple[int, np.ndarray]:
    """Label and class probabilities for one ``(side, side, 3)`` uint8 image."""
    side = network.config.input_side
    if np.shape(image) != (side, side, network.config.channels):
        raise ShapeMismatch(f"expected a {side}x{side} image, got {np.shape(image)}")
    probs = network.predict_proba(images_to_input(image))[0]
    return int(predicted_labels(probs[None])[0]), probs


def train(net_config: NetworkConfig, train_config: TrainConfig, train_set, val_set,
          network: Network | None = None):
    """Train a fresh network (or continue ``network``) with Adam.

    ``train_set`` and ``val_set`` are ``(x, y)`` pairs: float inputs in NCHW
    layout and integer labels (0 = Class I, 1 = Class II). Returns the
    network and one :class:`EpochStats` per epoch.
    """
    x_tr, y_tr = np.asarray(train_set[0], dtype=np.float64), np.asarray(train_set[1])
    x_va, y_va = np.asarray(val_set[0], dtype=np.float64), np.asarray(val_set[1])
    _check_set(x_tr, y_tr, net_config, "train")
    _check_set(x_va, y_va, net_config, "validation")

    seq_init, seq_shuffle, seq_dropout = np.random.SeedSequence(train_config.seed).spawn(3)
    if network is None:
        network = Network(net_config, seed=int(seq_init.generate_state(1)[0]))
    shuffle_rng = np.random.default_rng(seq_shuffle)
    dropout_rng = np.random.default_rng(seq_dropout)
    params = network.parameters()
    state = adam_init(params)
    targets = one_hot(y_tr)

    history = []
    n = len(x_tr)
    for epoch in range(1, train_config.epochs + 1):
        order = shuffle_rng.permutation(n) if train_config.shuffle_each_epoch else np.arange(n)
        loss_sum, correct, seen = 0.0, 0, 0
        for idx in _batches(n, train_config.batch_size, order):
            loss, probs = network.loss_and_grads(x_tr[idx], targets[idx], rng=dropout_rng)
            adam_step(params, network.gradients(), state, lr=train_config.lr)
            loss_sum += loss * len(idx)
            correct += int(np.sum(predicted_labels(probs) == y_tr[idx]))
            seen += len(idx)
        if seen == 0:
            raise EmptySet("training set yields no batch of at least 2 samples")
        val_acc = evaluate(network, x_va, y_va).accuracy
        stats = EpochStats(epoch, loss_sum / seen, correct / seen, val_acc)
        history.append(stats)
        log.info("epoch %d loss %.4f train_acc %.4f val_acc %.4f",
                 epoch, stats.train_loss, stats.train_accuracy, stats.val_accuracy)
    network.epochs_completed = getattr(network, "epochs_completed", 0) + train_config.epochs
    network.seed = train_config.seed
    return network, history


def format_history(history: list[EpochStats]) -> str:
    lines = ["epoch\ttrain_loss\ttrain_acc\tval_acc"]
    lines += [f"{h.epoch}\t{h.train_loss:.6f}\t{h.train_accuracy:.6f}\t{h.val_accuracy:.6f}"
              for h in history]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- checkpoints
#
# "IMGN" | u32 version | config | i64 seed | u32 epochs | u32 n_records |
# records of (u8 layer code, u8 rank, u32 dims..., f64 values...)
# All little-endian. Records follow layer order: params, then buffers.

def _tensors(network: Network):
    for layer in network.layers:
        for arr in layer.params.values():
            yield layer, arr
        if isinstance(layer, BatchNorm2D):
            yield layer, layer.buffers["running_mean"]
            yield layer, layer.buffers["running_var"]


def save_checkpoint(network: Network, sink) -> None:
    cfg = network.config
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<III", cfg.input_side, cfg.channels, cfg.kernel))
    buf.write(struct.pack(f"<I{len(cfg.conv_filters)}I", len(cfg.conv_filters), *cfg.conv_filters))
    buf.write(struct.pack(f"<I{len(cfg.fc_sizes)}I", len(cfg.fc_sizes), *cfg.fc_sizes))
    buf.write(struct.pack("<ddd", cfg.dropout_rate, cfg.bn_eps, cfg.bn_momentum))
    buf.write(struct.pack("<qI", int(getattr(network, "seed", 0)),
                          int(getattr(network, "epochs_completed", 0))))
    tensors = list(_tensors(network))
    buf.write(struct.pack("<I", len(tensors)))
    for layer, arr in tensors:
        buf.write(struct.pack("<BB", layer.code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    data = buf.getvalue()
    if isinstance(sink, (str, Path)):
        Path(sink).write_bytes(data)
    else:
        sink.write(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(f"checkpoint ends at byte {len(self.data)}, needed {self.pos + n}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(source) -> Network:
    data = Path(source).read_bytes() if isinstance(source, (str, Path)) else source.read()
    r = _Reader(data)
    if len(data) < 4 or r.take(4) != MAGIC:
        raise BadMagic("not an IMGN checkpoint")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    input_side, channels, kernel = r.unpack("<III")
    (n_conv,) = r.unpack("<I")
    conv_filters = r.unpack(f"<{n_conv}I")
    (n_fc,) = r.unpack("<I")
    fc_sizes = r.unpack(f"<{n_fc}I")
    dropout_rate, bn_eps, bn_momentum = r.unpack("<ddd")
    seed, epochs = r.unpack("<qI")
    try:
        config = NetworkConfig(input_side, channels, tuple(conv_filters), kernel,
                               tuple(fc_sizes), dropout_rate, bn_eps, bn_momentum)
    except ValueError as exc:
        raise CheckpointError(f"invalid network config in checkpoint: {exc}") from None
    network = Network(config)
    network.seed, network.epochs_completed = seed, epochs

    slots = list(_tensors(network))
    (n_records,) = r.unpack("<I")
    if n_records != len(slots):
        raise CheckpointError(f"checkpoint has {n_records} tensors, network needs {len(slots)}")
    for layer, arr in slots:
        code, rank = r.unpack("<BB")
        dims = r.unpack(f"<{rank}I")
        if code != layer.code or tuple(dims) != arr.shape:
            raise CheckpointError(f"tensor record {dims} (layer code {code}) does not fit {arr.shape}")
        values = np.frombuffer(r.take(8 * arr.size), dtype="<f8")
        arr[...] = values.reshape(arr.shape)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after the last tensor")
    return network
