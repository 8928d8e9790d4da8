"""Datasets, noise pairing, checkpoint persistence, and small file writers.

The raw image container is the generic channel-major, column-major 8-bit
binary layout (one plane per channel, each plane stored column by column);
synthetic datasets are persisted in the same layout with a ``key=value``
manifest next to them.  Checkpoints are a little-endian binary format with
an 8-byte magic, a key/value header, and named float64 tensor records; a
save/load round trip reproduces forward and inverse outputs bitwise.
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .network import IResNet, Subnetwork

# luminance weights, normalized by their sum so an all-white record maps to 1.0
_LUMA_RAW = (0.2989, 0.5870, 0.1140)
LUMA_WEIGHTS = tuple(w / sum(_LUMA_RAW) for w in _LUMA_RAW)

CHECKPOINT_MAGIC = b"IRESNET1"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, or inconsistent checkpoint file."""


@dataclass
class Dataset:
    """Clean images plus contiguous train/val/test split boundaries."""

    images: np.ndarray  # (N, H, W) float64 in [0, 1]
    splits: tuple  # (n_train, n_val, n_test), disjoint and exhaustive
    provenance: str = "synthetic"

    def __post_init__(self):
        if self.images.ndim != 3:
            raise ValueError(f"images must be (N, H, W), got shape {self.images.shape}")
        if sum(self.splits) != len(self.images):
            raise ValueError(
                f"splits {self.splits} do not cover the {len(self.images)} images"
            )
        if any(s < 0 for s in self.splits):
            raise ValueError("split counts must be nonnegative")

    @property
    def shape(self):
        return self.images.shape[1:]

    @property
    def train_images(self):
        return self.images[: self.splits[0]]

    @property
    def val_images(self):
        return self.images[self.splits[0] : self.splits[0] + self.splits[1]]

    @property
    def test_images(self):
        return self.images[self.splits[0] + self.splits[1] :]


@dataclass
class PairedBatch:
    """Clean/distorted pairs at a fixed noise level."""

    pairs: list  # [(x, z_delta)]
    delta: float

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        for x, z in self.pairs:
            if x.shape != z.shape:
                raise ValueError("pair shapes differ")


def synth_dataset(n, size, seed, splits=None):
    """Seeded synthetic images: rectangles/disks on smooth ramp backgrounds.

    Each image derives its own RNG stream from (seed, index), so the dataset
    is bit-reproducible and any slice of it is independent of the rest.
    """
    if size < 16:
        raise ValueError(f"image size must be at least 16, got {size}")
    if n < 1:
        raise ValueError("need at least one image")
    images = np.empty((n, size, size))
    for i in range(n):
        images[i] = _synth_image(size, np.random.default_rng([seed, i]))
    return Dataset(images, splits if splits is not None else (n, 0, 0), "synthetic")


def _synth_image(size, rng):
    rr, cc = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    c00, c01, c10, c11 = rng.uniform(0.05, 0.6, 4)
    img = (
        c00 * (1 - rr) * (1 - cc)
        + c01 * (1 - rr) * cc
        + c10 * rr * (1 - cc)
        + c11 * rr * cc
    )
    for _ in range(int(rng.integers(2, 7))):
        intensity = rng.uniform(0.0, 1.0)
        if rng.random() < 0.5:
            h = int(rng.integers(size // 8, size // 2))
            w = int(rng.integers(size // 8, size // 2))
            r0 = int(rng.integers(0, size - h))
            c0 = int(rng.integers(0, size - w))
            img[r0 : r0 + h, c0 : c0 + w] = intensity
        else:
            rad = rng.uniform(size / 10, size / 4)
            cy, cx = rng.uniform(rad, size - rad, 2)
            mask = (rr * (size - 1) - cy) ** 2 + (cc * (size - 1) - cx) ** 2 <= rad**2
            img[mask] = intensity
    return np.clip(img, 0.0, 1.0)


def import_raw(path, width, height, channels, layout="channel_major_column_major"):
    """Decode a raw 8-bit binary container into a grayscale dataset.

    Records are channel-major with column-major planes; RGB records are
    collapsed with the usual luminance weights, and values scale to [0, 1].
    """
    if layout != "channel_major_column_major":
        raise ValueError(f"unsupported layout {layout!r}")
    data = np.fromfile(path, dtype=np.uint8)
    rec = width * height * channels
    if rec == 0 or data.size % rec != 0:
        raise ValueError(
            f"file size {data.size} is not a multiple of the record size {rec}"
        )
    n = data.size // rec
    planes = data.reshape(n, channels, width, height).transpose(0, 1, 3, 2)
    planes = planes.astype(np.float64) / 255.0
    if channels == 1:
        imgs = planes[:, 0]
    elif channels == 3:
        w = np.asarray(LUMA_WEIGHTS)
        imgs = np.tensordot(planes, w, axes=([1], [0]))
    else:
        imgs = planes.mean(axis=1)
    return Dataset(np.ascontiguousarray(imgs), (n, 0, 0), "imported")


def export_raw(path, images):
    """Write (N, H, W) images in the single-channel raw layout (8-bit)."""
    arr = np.asarray(images, dtype=np.float64)
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    q.transpose(0, 2, 1).tofile(path)  # column-major planes


def make_pairs(op, images, delta, seed):
    """z = F(x) + delta * g with i.i.d. standard normal g, per-image streams."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    pairs = []
    for i, x in enumerate(images):
        x = np.asarray(x, dtype=np.float64)
        z = op.apply(x)
        if delta > 0:
            z = z + delta * np.random.default_rng([seed, i]).standard_normal(x.shape)
        pairs.append((x, z))
    return PairedBatch(pairs, delta)


# --------------------------------------------------------------------------
# checkpoint format


def _write_str(f, s):
    b = s.encode("utf-8")
    f.write(struct.pack("<I", len(b)))
    f.write(b)


def _read_exact(f, n):
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint file")
    return b


def _read_str(f):
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    return _read_exact(f, n).decode("utf-8")


def model_tensors(model, adam=None):
    """Named tensors covering parameters, power states, and optimizer moments."""
    tensors = {}
    for i, sub in enumerate(model.subnets):
        tensors[f"subnet{i}.conv_a"] = sub.conv_a
        tensors[f"subnet{i}.shrink_raw"] = sub.shrink_raw
        tensors[f"subnet{i}.conv_b"] = sub.conv_b
        tensors[f"subnet{i}.v_a"] = sub.v_a
        tensors[f"subnet{i}.v_b"] = sub.v_b
    if adam is not None:
        for i, (m, v) in enumerate(zip(adam.m, adam.v)):
            for name in ("conv_a", "shrink_raw", "conv_b"):
                tensors[f"adam.m{i}.{name}"] = getattr(m, name)
                tensors[f"adam.v{i}.{name}"] = getattr(v, name)
    return tensors


def save_checkpoint(model, adam, path, metadata=None):
    """Write the model (and optimizer state, when given) to ``path``."""
    header = {
        "n_subnets": str(model.n_subnets),
        "channels": str(model.channels),
        "hidden": str(model.hidden),
        "kernel_size": str(model.kernel_size),
        "height": str(model.height),
        "width": str(model.width),
        "lip_param": repr(model.lip_param),
        "budgets": ",".join(repr(s.budget) for s in model.subnets),
        "has_adam": "1" if adam is not None else "0",
    }
    if adam is not None:
        header["adam_step"] = str(adam.step)
        header["adam_lr"] = repr(adam.lr)
    for k, v in (metadata or {}).items():
        header[f"meta.{k}"] = str(v)
    tensors = model_tensors(model, adam)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(header)))
        for k in sorted(header):
            _write_str(f, k)
            _write_str(f, header[k])
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            _write_str(f, name)
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns ``(model, adam_or_none, metadata_dict)``.

    Validates magic, version, and that every tensor shape is consistent with
    the architecture metadata before the model is assembled.
    """
    with open(path, "rb") as f:
        if _read_exact(f, 8) != CHECKPOINT_MAGIC:
            raise CheckpointError("bad magic: not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (n_header,) = struct.unpack("<I", _read_exact(f, 4))
        header = {}
        for _ in range(n_header):
            k = _read_str(f)
            header[k] = _read_str(f)
        (n_tensors,) = struct.unpack("<I", _read_exact(f, 4))
        tensors = {}
        for _ in range(n_tensors):
            name = _read_str(f)
            (rank,) = struct.unpack("<I", _read_exact(f, 4))
            dims = struct.unpack("<" + "I" * rank, _read_exact(f, 4 * rank))
            payload = _read_exact(f, 8 * int(np.prod(dims, dtype=np.int64)))
            tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    try:
        n = int(header["n_subnets"])
        channels = int(header["channels"])
        hidden = int(header["hidden"])
        k = int(header["kernel_size"])
        height = int(header["height"])
        width = int(header["width"])
        lip = float(header["lip_param"])
        budgets = [float(b) for b in header["budgets"].split(",")]
    except KeyError as exc:
        raise CheckpointError(f"missing header entry {exc}") from exc
    if len(budgets) != n:
        raise CheckpointError(f"header lists {len(budgets)} budgets for {n} subnetworks")
    expected = {
        "conv_a": (hidden, channels, k, k),
        "shrink_raw": (hidden,),
        "conv_b": (channels, hidden, 1, 1),
        "v_a": (channels, height, width),
        "v_b": (hidden, height, width),
    }
    subnets = []
    for i in range(n):
        parts = {}
        for name, shape in expected.items():
            key = f"subnet{i}.{name}"
            if key not in tensors:
                raise CheckpointError(f"missing tensor {key}")
            if tensors[key].shape != shape:
                raise CheckpointError(
                    f"tensor {key} has shape {tensors[key].shape}, expected {shape}"
                )
            parts[name] = tensors[key]
        subnets.append(
            Subnetwork(
                parts["conv_a"], parts["shrink_raw"], parts["conv_b"],
                budgets[i], parts["v_a"], parts["v_b"],
            )
        )
    model = IResNet(subnets, channels, height, width, lip)
    adam = None
    if header.get("has_adam") == "1":
        from .training import AdamState  # deferred: training imports this module's writers

        adam = AdamState.for_model(model, lr=float(header.get("adam_lr", "1e-3")))
        adam.step = int(header.get("adam_step", "0"))
        for i in range(n):
            for name in ("conv_a", "shrink_raw", "conv_b"):
                getattr(adam.m[i], name)[...] = tensors[f"adam.m{i}.{name}"]
                getattr(adam.v[i], name)[...] = tensors[f"adam.v{i}.{name}"]
    metadata = {k[5:]: v for k, v in header.items() if k.startswith("meta.")}
    return model, adam, metadata


@dataclass
class Checkpoint:
    """In-memory view of a persisted checkpoint."""

    model: IResNet
    adam: object | None
    metadata: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path):
        return cls(*load_checkpoint(path))


# --------------------------------------------------------------------------
# small writers


def write_csv(path, fieldnames, rows):
    """RFC-4180-style CSV with a header row and '.' decimals."""
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_pgm(path, image, maxval=255):
    """Plain (P2) PGM; float images are clipped from [0, 1] to the gray range."""
    arr = np.asarray(image)
    if arr.dtype == bool:
        q = arr.astype(np.int64) * maxval
    else:
        q = np.clip(np.rint(arr * maxval), 0, maxval).astype(np.int64)
    h, w = q.shape
    lines = ["P2", f"{w} {h}", str(maxval)]
    lines += [" ".join(str(v) for v in row) for row in q]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_pgm(path):
    """Read a plain P2 PGM into floats in [0, 1]."""
    with open(path) as f:
        tokens = []
        for line in f:
            line = line.split("#", 1)[0]
            tokens.extend(line.split())
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path} is not a plain P2 PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    vals = np.asarray([int(t) for t in tokens[4 : 4 + w * h]], dtype=np.float64)
    if vals.size != w * h:
        raise ValueError("PGM payload truncated")
    return (vals / maxval).reshape(h, w)


def write_manifest(path, entries):
    with open(path, "w") as f:
        for k, v in entries.items():
            f.write(f"{k}={v}\n")


def read_manifest(path):
    entries = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line and "=" in line:
                k, v = line.split("=", 1)
                entries[k] = v
    return entries


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
