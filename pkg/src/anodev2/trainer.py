"""SGD training loop, learning-rate schedules and the binary checkpoint format."""
import csv
import json
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledBatch, augment
from .layers import softmax_cross_entropy
from .models import ModelSpec, build_model

log = logging.getLogger(__name__)

ALEXNET_DECAYS = (40, 80, 100)
RESNET_DECAYS = (150, 300)


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 256
    lr0: float = 0.1
    decay_epochs: tuple = ()
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        d = tuple(self.decay_epochs)
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError(f"decay epochs must be strictly increasing, got {d}")
        if d and d[-1] >= self.epochs:
            raise ValueError(f"decay epoch {d[-1]} not below epochs={self.epochs}")
        self.decay_epochs = d

    @classmethod
    def alexnet(cls, **kw):
        return cls(epochs=120, decay_epochs=ALEXNET_DECAYS, **kw)

    @classmethod
    def resnet(cls, **kw):
        return cls(epochs=350, decay_epochs=RESNET_DECAYS, **kw)


def lr_at(config, epoch):
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    drops = sum(epoch >= d for d in config.decay_epochs)
    return config.lr0 * 10.0 ** (-drops)


# ---------------------------------------------------------------- optimizer


@dataclass
class SGDState:
    velocity: dict = field(default_factory=dict)


DECAYED_KINDS = ("weight", "bias")


def sgd_step(params, grads, state, lr, momentum=0.9, weight_decay=5e-4, kinds=None):
    """Momentum SGD in place: v = m*v + g + wd*x; x -= lr*v.

    Weight decay skips parameters whose kind is "rda" or "bn"; afterwards the
    diffusion coefficient (entry 0 of every "rda" array) is clamped at 0.
    """
    kinds = kinds or {}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    for name, x in params.items():
        g = grads[name]
        kind = kinds.get(name, "weight")
        step = g + weight_decay * x if (weight_decay and kind in DECAYED_KINDS) else g
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(x)
            state.velocity[name] = v
        v *= momentum
        v += step
        x -= (lr * v).astype(x.dtype, copy=False)
        if kind == "rda":
            x[0] = max(x[0], 0)
    return params


# ---------------------------------------------------------------- loop


def _batch_seed(seed, epoch, index):
    return (seed << 40) ^ (epoch << 20) ^ index


def evaluate(model, data, batch_size=500):
    """(mean loss, accuracy) in eval mode."""
    correct, total_loss = 0, 0.0
    for s in range(0, len(data), batch_size):
        x = data.images[s:s + batch_size]
        y = data.labels[s:s + batch_size]
        logits = model.forward(x, train=False)
        loss, _ = softmax_cross_entropy(logits.astype(np.float64), y)
        total_loss += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    return total_loss / len(data), correct / len(data)


def train(model, train_data, config, test_data=None, out_dir=None, on_epoch=None):
    """Run ``config.epochs`` of SGD; returns a list of per-epoch dicts.

    Deterministic given ``config.seed`` and the model's initial state. When
    ``out_dir`` is set, ``history.csv`` is rewritten after every epoch and the
    best-test-accuracy model is saved as ``best.anv2``.
    """
    if len(train_data) == 0:
        raise ValueError("empty training set")
    state = SGDState()
    history = []
    best = -1.0
    n = len(train_data)
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        run_loss = 0.0
        for b, s in enumerate(range(0, n, config.batch_size)):
            idx = order[s:s + config.batch_size]
            batch = train_data.subset(idx)
            batch = augment(batch, _batch_seed(config.seed, epoch, b), enabled=config.augment)
            loss, grads = model.loss_and_grads(batch.images, batch.labels, train=True)
            run_loss += loss * len(idx)
            sgd_step(model.params, grads, state, lr, config.momentum, config.weight_decay, model.kinds)
        row = {"epoch": epoch, "lr": lr, "train_loss": run_loss / n, "test_acc": float("nan")}
        if test_data is not None and len(test_data):
            row["test_acc"] = evaluate(model, test_data)[1]
        history.append(row)
        log.info("epoch %d lr %.4g loss %.4f acc %.4f", epoch, lr, row["train_loss"], row["test_acc"])
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            write_history(history, os.path.join(out_dir, "history.csv"))
            acc = row["test_acc"] if np.isfinite(row["test_acc"]) else -row["train_loss"]
            if acc > best:
                best = acc
                save_checkpoint(model, os.path.join(out_dir, "best.anv2"))
        if on_epoch:
            on_epoch(row)
    return history


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["epoch", "lr", "train_loss", "test_acc"])
        for r in history:
            wr.writerow([r["epoch"], repr(r["lr"]), repr(float(r["train_loss"])), repr(float(r["test_acc"]))])


# ---------------------------------------------------------------- checkpoints

MAGIC = b"ANV2"
FORMAT_VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
TAG_OF = {v: k for k, v in DTYPE_TAGS.items()}
SPEC_RECORD = "__spec__"


class CheckpointError(ValueError):
    pass


def _record(name, arr):
    arr = np.asarray(arr)
    tag = TAG_OF.get(arr.dtype.newbyteorder("<"))
    if tag is None:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    nb = name.encode()
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<BB", tag, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes()


def save_checkpoint(model, path):
    spec = json.dumps(model.spec.to_dict(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), _record(SPEC_RECORD, np.frombuffer(spec, np.uint8))]
    for name, arr in model.state_arrays().items():
        parts.append(_record(name, arr))
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def read_records(path):
    """Parse a checkpoint into an ordered dict of name -> array."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"offset 0: bad magic {buf[:4]!r}")
    if len(buf) < 8:
        raise CheckpointError("offset 4: truncated header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"offset 4: unsupported format version {version}")
    off = 8
    out = {}

    def take(n):
        nonlocal off
        if off + n > len(buf):
            raise CheckpointError(f"offset {off}: truncated (need {n} bytes, have {len(buf) - off})")
        chunk = buf[off:off + n]
        off += n
        return chunk

    while off < len(buf):
        start = off
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        tag, rank = struct.unpack("<BB", take(2))
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"offset {start}: unknown dtype tag {tag} in record {name!r}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = DTYPE_TAGS[tag]
        count = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(take(count * dt.itemsize), dtype=dt).reshape(dims).copy()
    return out


def load_checkpoint(path):
    recs = read_records(path)
    if SPEC_RECORD not in recs:
        raise CheckpointError("missing model spec record")
    spec = ModelSpec(**json.loads(recs.pop(SPEC_RECORD).tobytes().decode()))
    model = build_model(spec)
    arrays = model.state_arrays()
    for name, arr in arrays.items():
        if name not in recs:
            raise CheckpointError(f"missing record {name!r}")
        if recs[name].shape != arr.shape:
            raise CheckpointError(f"record {name!r}: shape {recs[name].shape} != {arr.shape}")
        arr[...] = recs[name]
    return model
