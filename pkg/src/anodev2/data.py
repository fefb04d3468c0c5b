"""CIFAR-10 binary ingestion, augmentation and a synthetic stand-in dataset."""
import os
from dataclasses import dataclass

import numpy as np

RECORD_BYTES = 1 + 3 * 32 * 32
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465])
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616])
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"


class CifarFormatError(ValueError):
    pass


@dataclass
class LabeledBatch:
    images: np.ndarray  # (n, 3, 32, 32), normalized
    labels: np.ndarray  # (n,) int64

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return LabeledBatch(self.images[idx], self.labels[idx])


def normalize(pixels_u8):
    x = pixels_u8.astype(np.float64) / 255.0
    return (x - CIFAR_MEAN[None, :, None, None]) / CIFAR_STD[None, :, None, None]


def denormalize(images):
    """Inverse of :func:`normalize`, rounded back to uint8."""
    x = images * CIFAR_STD[None, :, None, None] + CIFAR_MEAN[None, :, None, None]
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def parse_cifar10(raw):
    if len(raw) % RECORD_BYTES:
        raise CifarFormatError(f"size {len(raw)} is not a multiple of {RECORD_BYTES}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise CifarFormatError(f"record {bad[0]}: label byte {labels[bad[0]]} > 9")
    pixels = rec[:, 1:].reshape(-1, 3, 32, 32)
    return LabeledBatch(normalize(pixels), labels)


def load_cifar10(path):
    """Load one CIFAR-10 binary file, or every training file of a directory."""
    if os.path.isdir(path):
        parts = [load_cifar10(os.path.join(path, f)) for f in TRAIN_FILES if os.path.exists(os.path.join(path, f))]
        if not parts:
            raise FileNotFoundError(f"no data_batch_*.bin files in {path}")
        return LabeledBatch(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))
    with open(path, "rb") as fh:
        return parse_cifar10(fh.read())


def load_cifar10_split(directory):
    """(train, test) from the standard directory layout."""
    test_path = os.path.join(directory, TEST_FILE)
    if not os.path.exists(test_path):
        raise FileNotFoundError(f"missing {test_path}")
    return load_cifar10(directory), load_cifar10(test_path)


def to_binary(batch):
    """Serialize back to the CIFAR-10 record layout."""
    pixels = denormalize(batch.images).reshape(len(batch), -1)
    out = np.empty((len(batch), RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = batch.labels
    out[:, 1:] = pixels
    return out.tobytes()


def augment(batch, seed, enabled=True, pad=4):
    """Reflect-pad, random crop back to size, random horizontal flip.

    Randomness comes from a counter-based Philox stream keyed by ``seed``, so
    the same (batch, seed) always produces the same output.
    """
    if not enabled:
        return batch
    n, _, h, w = batch.images.shape
    rng = np.random.Generator(np.random.Philox(key=seed))
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    padded = np.pad(batch.images, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    out = np.empty_like(batch.images)
    for i in range(n):
        dy, dx = offsets[i]
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return LabeledBatch(out, batch.labels.copy())


def crop_offsets(n, seed, pad=4):
    """The crop offsets :func:`augment` would draw for ``n`` images."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    return rng.integers(0, 2 * pad + 1, size=(n, 2))


def synthetic_blobs(n, seed=0, noise=1.0, hw=32):
    """Ten Gaussian class prototypes in 3 x hw x hw plus i.i.d. noise.

    Labels cycle 0..9 so every class appears floor(n/10) or ceil(n/10) times.
    """
    proto_rng = np.random.default_rng(12345)
    # smooth prototypes: low-frequency patterns so conv nets can pick them up
    base = proto_rng.standard_normal((10, 3, 4, 4))
    protos = np.kron(base, np.ones((hw // 4, hw // 4)))
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    rng.shuffle(labels)
    images = protos[labels] + noise * rng.standard_normal((n, 3, hw, hw))
    return LabeledBatch(images, labels.astype(np.int64))
