"""Toy datasets and their on-disk container.

The labeled "shapes" set is a Gaussian mixture in pixel space: one fixed
prototype image per class plus isotropic pixel noise.  That keeps a closed
form for the optimal denoiser available while still giving the classifier
something non-trivial to separate.

File layout: a utf-8 text header terminated by ``end-header``, then the image
payload as little-endian float64, then (when labels are present) the label
payload as little-endian int64.

    skiplab-dataset 1
    shape <N> <C> <H> <W>
    dtype float64
    labels <0|1>
    seed <int>
    end-header
"""

from __future__ import annotations

import io

import numpy as np

from .errors import ConfigError

DATASET_MAGIC = "skiplab-dataset"
DATASET_VERSION = 1

FOREGROUND = 0.5
BACKGROUND = -0.5


def _prototype(kind, size):
    img = np.full((size, size), BACKGROUND)
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == 0:  # filled disk
        img[(yy - c) ** 2 + (xx - c) ** 2 <= (size / 3.2) ** 2] = FOREGROUND
    elif kind == 1:  # square outline
        lo, hi = size // 5, size - size // 5 - 1
        img[lo : hi + 1, lo] = FOREGROUND
        img[lo : hi + 1, hi] = FOREGROUND
        img[lo, lo : hi + 1] = FOREGROUND
        img[hi, lo : hi + 1] = FOREGROUND
    elif kind == 2:  # plus
        half = max(1, size // 8)
        img[:, int(c) - half : int(c) + half + 1] = FOREGROUND
        img[int(c) - half : int(c) + half + 1, :] = FOREGROUND
    elif kind == 3:  # diagonal cross
        band = max(1, size // 8)
        img[np.abs(yy - xx) <= band] = FOREGROUND
        img[np.abs(yy + xx - (size - 1)) <= band] = FOREGROUND
    else:
        raise ConfigError(f"no prototype for class {kind}")
    return img


def shape_prototypes(size=16, num_classes=4):
    return np.stack([_prototype(k, size) for k in range(num_classes)])[:, None]


def make_shapes(n, size=16, num_classes=4, noise_sigma=0.12, seed=0):
    """Labeled Gaussian-mixture images: prototype[label] + noise_sigma * N(0, I)."""
    if num_classes < 1 or num_classes > 4:
        raise ConfigError("shape dataset supports 1..4 classes")
    rng = np.random.default_rng(seed)
    protos = shape_prototypes(size, num_classes)
    labels = rng.integers(0, num_classes, size=n)
    images = protos[labels] + noise_sigma * rng.standard_normal((n, 1, size, size))
    return images, labels


def make_noise(n, shape=(1, 16, 16), seed=0):
    """Unit Gaussian reference samples in image layout."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, *shape))


def save_dataset(path, images, labels=None, seed=None):
    images = np.ascontiguousarray(images, dtype="<f8")
    if images.ndim != 4:
        raise ConfigError(f"dataset images must be (N, C, H, W), got {images.shape}")
    buf = io.StringIO()
    buf.write(f"{DATASET_MAGIC} {DATASET_VERSION}\n")
    buf.write("shape " + " ".join(str(d) for d in images.shape) + "\n")
    buf.write("dtype float64\n")
    buf.write(f"labels {int(labels is not None)}\n")
    if seed is not None:
        buf.write(f"seed {int(seed)}\n")
    buf.write("end-header\n")
    with open(path, "wb") as fh:
        fh.write(buf.getvalue().encode("utf-8"))
        fh.write(images.tobytes())
        if labels is not None:
            fh.write(np.ascontiguousarray(labels, dtype="<i8").tobytes())


def load_dataset(path):
    """Returns (images, labels_or_None, meta dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"end-header\n")
    if end < 0:
        raise ConfigError(f"{path}: not a dataset file")
    header = blob[:end].decode("utf-8").splitlines()
    payload = blob[end + len(b"end-header\n") :]
    magic = header[0].split()
    if magic[0] != DATASET_MAGIC or int(magic[1]) != DATASET_VERSION:
        raise ConfigError(f"{path}: bad dataset header {header[0]!r}")
    meta = {}
    for line in header[1:]:
        key, _, value = line.partition(" ")
        meta[key] = value
    shape = tuple(int(d) for d in meta["shape"].split())
    if meta.get("dtype") != "float64":
        raise ConfigError(f"{path}: unsupported dtype {meta.get('dtype')!r}")
    n_img = int(np.prod(shape))
    images = np.frombuffer(payload, dtype="<f8", count=n_img).reshape(shape).copy()
    labels = None
    if meta.get("labels") == "1":
        labels = np.frombuffer(payload, dtype="<i8", offset=n_img * 8, count=shape[0]).copy()
    return images, labels, meta
