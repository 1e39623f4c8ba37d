"""Dataset ingestion, normalization, and Dirichlet label-skew partitioning.

All loaders return images as float32 (N, C, H, W) arrays in [-1, 1] with
integer labels. Partitioning splits index sets, never copies pixels.
"""

import gzip
import pickle
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    split: str
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        amax = float(np.abs(self.images).max()) if self.images.size else 0.0
        if amax > 1.0 + 1e-6:
            raise ValueError(f"images must lie in [-1, 1], max abs value {amax}")

    def __len__(self) -> int:
        return len(self.images)


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    concentration: float
    seed: int
    min_samples_per_client: int = 1
    max_retries: int = 100

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError(f"num_clients must be >= 1, got {self.num_clients}")
        if self.concentration <= 0:
            raise ValueError(f"concentration must be > 0, got {self.concentration}")


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    indices: np.ndarray
    label_histogram: np.ndarray

    def __post_init__(self):
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValueError(f"client {self.client_id}: duplicate indices in shard")
        if int(self.label_histogram.sum()) != len(self.indices):
            raise ValueError(
                f"client {self.client_id}: histogram sum != shard size"
            )

    def __len__(self) -> int:
        return len(self.indices)


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer allotment of `total` items by proportions; ties go to the
    lower client index."""
    quotas = proportions * total
    counts = np.floor(quotas).astype(np.int64)
    leftover = total - int(counts.sum())
    if leftover > 0:
        order = np.argsort(-(quotas - counts), kind="stable")
        counts[order[:leftover]] += 1
    return counts


def dirichlet_partition(
    labels: np.ndarray, spec: PartitionSpec, num_classes: int | None = None
) -> list[ClientShard]:
    """Split sample indices into per-client shards with Dirichlet label skew.

    For each class k (ascending) a proportion vector is drawn from
    Dirichlet(concentration * 1_N), that class's indices are shuffled, and
    they are allotted by largest-remainder rounding. The RNG consumption
    order per attempt is: class 0 proportions, class 0 permutation,
    class 1 proportions, ... If any client ends up below
    ``min_samples_per_client``, the whole allotment is redrawn (up to
    ``max_retries`` extra attempts). Shard indices are sorted ascending.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot partition an empty dataset")
    k_count = int(num_classes if num_classes is not None else labels.max() + 1)
    n = spec.num_clients
    if spec.min_samples_per_client * n > len(labels):
        raise ValueError(
            f"infeasible: {n} clients x {spec.min_samples_per_client} min samples "
            f"> {len(labels)} total samples"
        )
    class_indices = [np.flatnonzero(labels == k) for k in range(k_count)]
    rng = np.random.default_rng(spec.seed)

    for _attempt in range(spec.max_retries + 1):
        assigned = [[] for _ in range(n)]
        for idx in class_indices:
            props = rng.dirichlet(np.full(n, spec.concentration))
            shuffled = idx[rng.permutation(len(idx))]
            counts = _largest_remainder(props, len(idx))
            offset = 0
            for client, c in enumerate(counts):
                assigned[client].append(shuffled[offset : offset + c])
                offset += c
        sizes = [sum(len(a) for a in parts) for parts in assigned]
        if min(sizes) >= spec.min_samples_per_client:
            shards = []
            for client, parts in enumerate(assigned):
                indices = np.sort(np.concatenate(parts).astype(np.int64))
                hist = np.bincount(labels[indices], minlength=k_count)
                shards.append(
                    ClientShard(
                        client_id=client, indices=indices, label_histogram=hist
                    )
                )
            return shards
    raise RuntimeError(
        f"partition retry budget ({spec.max_retries}) exhausted: could not give "
        f"every client {spec.min_samples_per_client} samples"
    )


def partition_heatmap(shards: list[ClientShard], num_classes: int) -> np.ndarray:
    """(N, K) matrix of per-client class counts."""
    rows = []
    for shard in shards:
        if len(shard.label_histogram) != num_classes:
            raise ValueError(
                f"client {shard.client_id}: histogram length "
                f"{len(shard.label_histogram)} != {num_classes}"
            )
        rows.append(shard.label_histogram)
    return np.stack(rows)


def export_partition_csv(shards, num_classes: int, path) -> None:
    """Write (client_id, class, count) rows for heatmap reproduction."""
    matrix = partition_heatmap(shards, num_classes)
    with open(path, "w", newline="") as f:
        f.write("client_id,class,count\n")
        for i, row in enumerate(matrix):
            for k, c in enumerate(row):
                f.write(f"{i},{k},{int(c)}\n")


def augment_hflip(batch: np.ndarray, rng, probability: float = 0.5) -> np.ndarray:
    """Flip each image along width independently with the given probability."""
    if not 0.0 <= probability <= 1.0:
        raise ValueError(f"probability must lie in [0, 1], got {probability}")
    mask = rng.random(batch.shape[0]) < probability
    out = batch.copy()
    out[mask] = out[mask][..., ::-1]
    return out


# --- loaders -------------------------------------------------------------


def _to_unit_range(u8: np.ndarray) -> np.ndarray:
    return (u8.astype(np.float32) / 127.5) - 1.0


def load_image_folder(path, image_size: int, channels: int) -> LabeledDataset:
    """Load a directory-per-class image tree, resized and scaled to [-1, 1].

    Class labels follow the sorted order of the class directory names.
    """
    root = Path(path)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ValueError(f"{root}: no class directories found")
    mode = "L" if channels == 1 else "RGB"
    images, labels = [], []
    for k, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.is_file())
        if not files:
            raise ValueError(f"{d}: empty class directory")
        for p in files:
            try:
                with Image.open(p) as im:
                    im = im.convert(mode).resize(
                        (image_size, image_size), Image.BILINEAR
                    )
                    arr = np.asarray(im, dtype=np.uint8)
            except Exception as e:
                raise ValueError(f"unreadable image {p}: {e}") from e
            if channels == 1:
                arr = arr[None, :, :]
            else:
                arr = arr.transpose(2, 0, 1)
            images.append(_to_unit_range(arr))
            labels.append(k)
    return LabeledDataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        split="train",
        num_classes=len(class_dirs),
    )


def load_cifar10(root, split: str = "train") -> LabeledDataset:
    """CIFAR-10 from the published python-pickle batches."""
    root = Path(root)
    if (root / "cifar-10-batches-py").is_dir():
        root = root / "cifar-10-batches-py"
    names = [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
    data, labels = [], []
    for name in names:
        with open(root / name, "rb") as f:
            batch = pickle.load(f, encoding="bytes")
        data.append(batch[b"data"])
        labels.extend(batch[b"labels"])
    images = np.concatenate(data).reshape(-1, 3, 32, 32)
    return LabeledDataset(
        images=_to_unit_range(images),
        labels=np.asarray(labels, dtype=np.int64),
        split=split,
        num_classes=10,
    )


def _read_idx(path) -> np.ndarray:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        magic = struct.unpack(">I", f.read(4))[0]
        ndim = magic & 0xFF
        dims = struct.unpack(f">{ndim}I", f.read(4 * ndim))
        return np.frombuffer(f.read(), dtype=np.uint8).reshape(dims)


def load_fashion_mnist(root, split: str = "train") -> LabeledDataset:
    """Fashion-MNIST from the published idx-ubyte files (optionally gzipped)."""
    root = Path(root)
    prefix = "train" if split == "train" else "t10k"

    def find(stem):
        for suffix in ("", ".gz"):
            p = root / (stem + suffix)
            if p.exists():
                return p
        raise FileNotFoundError(f"{root}: missing {stem}[.gz]")

    images = _read_idx(find(f"{prefix}-images-idx3-ubyte"))[:, None, :, :]
    labels = _read_idx(find(f"{prefix}-labels-idx1-ubyte"))
    return LabeledDataset(
        images=_to_unit_range(images),
        labels=labels.astype(np.int64),
        split=split,
        num_classes=10,
    )


def load_svhn(root, split: str = "train") -> LabeledDataset:
    """SVHN from the published .mat files; digit '0' is stored as label 10."""
    import scipy.io

    mat = scipy.io.loadmat(str(Path(root) / f"{split}_32x32.mat"))
    images = mat["X"].transpose(3, 2, 0, 1)
    labels = mat["y"].ravel().astype(np.int64) % 10
    return LabeledDataset(
        images=_to_unit_range(images), labels=labels, split=split, num_classes=10
    )


def make_synthetic_shapes(
    n: int,
    image_size: int = 8,
    channels: int = 1,
    num_classes: int = 2,
    seed: int = 0,
    split: str = "train",
) -> LabeledDataset:
    """Deterministic shape dataset for CI: no downloads required.

    Classes cycle through {disk, frame, cross, stripes}; each sample gets a
    random 1-pixel shift, intensity, per-channel tint, and mild pixel noise.
    Class counts are exactly balanced (up to remainder), order shuffled.
    """
    if not 1 <= num_classes <= 4:
        raise ValueError(f"num_classes must be in [1, 4], got {num_classes}")
    rng = np.random.default_rng(seed)
    s = image_size
    yy, xx = np.mgrid[0:s, 0:s]
    images = np.full((n, channels, s, s), -1.0, dtype=np.float32)
    labels = np.arange(n, dtype=np.int64) % num_classes
    for i in range(n):
        k = labels[i]
        dx, dy = rng.integers(-1, 2, size=2)
        intensity = rng.uniform(0.5, 1.0)
        cx, cy = s / 2 - 0.5 + dx, s / 2 - 0.5 + dy
        if k == 0:
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= (s / 3.2) ** 2
        elif k == 1:
            inner = (np.abs(xx - cx) <= s / 4) & (np.abs(yy - cy) <= s / 4)
            core = (np.abs(xx - cx) <= s / 4 - 1) & (np.abs(yy - cy) <= s / 4 - 1)
            mask = inner & ~core
        elif k == 2:
            mask = (np.abs(xx - cx) <= 0.6) | (np.abs(yy - cy) <= 0.6)
        else:
            mask = (yy + dy) % 3 == 0
        tint = rng.uniform(0.6, 1.0, size=channels) if channels > 1 else np.ones(1)
        for c in range(channels):
            images[i, c][mask] = -1.0 + 2.0 * intensity * tint[c]
    images += rng.normal(0.0, 0.05, size=images.shape).astype(np.float32)
    perm = rng.permutation(n)
    return LabeledDataset(
        images=np.clip(images[perm], -1.0, 1.0),
        labels=labels[perm],
        split=split,
        num_classes=num_classes,
    )
