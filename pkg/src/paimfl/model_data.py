"""Small ReLU MLP with hand-written backprop, MNIST IDX loading, partitioning."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grad_core import GradientVector

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049


class IdxFormatError(ValueError):
    pass


# -- model -------------------------------------------------------------------

def param_count(layer_dims) -> int:
    return sum(a * b + b for a, b in zip(layer_dims[:-1], layer_dims[1:]))


@dataclass
class MlpModel:
    """Fully connected net; hidden layers ReLU, softmax output.

    ``weights`` is flat: for each layer the (out, in) matrix row-major,
    followed by its bias.
    """

    layer_dims: tuple
    weights: np.ndarray

    def __post_init__(self):
        self.layer_dims = tuple(int(n) for n in self.layer_dims)
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ValueError(f"bad layer_dims {self.layer_dims}")
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if self.weights.size != self.d:
            raise ValueError(f"expected {self.d} weights, got {self.weights.size}")

    @property
    def d(self) -> int:
        return param_count(self.layer_dims)

    @classmethod
    def init(cls, layer_dims, seed=0) -> "MlpModel":
        rng = np.random.default_rng(seed)
        parts = []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            parts.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=fan_in * fan_out))
            parts.append(np.zeros(fan_out))
        return cls(layer_dims, np.concatenate(parts))

    def layers(self, flat=None):
        """Views ``[(W, b), ...]`` into ``flat`` (defaults to the weights)."""
        flat = self.weights if flat is None else flat
        out, pos = [], 0
        for a, b in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            W = flat[pos:pos + a * b].reshape(b, a)
            pos += a * b
            out.append((W, flat[pos:pos + b]))
            pos += b
        return out

    def copy(self) -> "MlpModel":
        return MlpModel(self.layer_dims, self.weights.copy())

    def forward(self, X):
        """Return (probabilities, per-layer cache)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.layer_dims[0]:
            raise ValueError(f"feature dim {X.shape[1]} != input layer {self.layer_dims[0]}")
        acts, pre = [X], []
        layers = self.layers()
        h = X
        for i, (W, b) in enumerate(layers):
            z = h @ W.T + b
            pre.append(z)
            h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
            acts.append(h)
        return softmax(acts[-1]), (acts, pre)

    def predict_proba(self, X):
        return self.forward(X)[0]

    def accuracy(self, shard: "DatasetShard", chunk: int = 4096) -> float:
        hits = 0
        for s in range(0, len(shard), chunk):
            p = self.predict_proba(shard.inputs[s:s + chunk])
            hits += int(np.sum(p.argmax(axis=1) == shard.labels[s:s + chunk]))
        return hits / max(1, len(shard))


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward_backward(model: MlpModel, batch) -> tuple[float, GradientVector]:
    """Mean cross-entropy over the batch and its exact gradient."""
    X, y = _unpack(batch)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    n_cls = model.layer_dims[-1]
    if y.min() < 0 or y.max() >= n_cls:
        bad = int(y[(y < 0) | (y >= n_cls)][0])
        raise ValueError(f"label {bad} outside [0, {n_cls})")
    probs, (acts, pre) = model.forward(X)
    n = X.shape[0]
    loss = float(-np.mean(np.log(np.maximum(probs[np.arange(n), y], 1e-300))))

    grad = np.zeros(model.d)
    glayers = model.layers(grad)
    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    layers = model.layers()
    for i in range(len(layers) - 1, -1, -1):
        gW, gb = glayers[i]
        gW[...] = delta.T @ acts[i]
        gb[...] = delta.sum(axis=0)
        if i:
            delta = (delta @ layers[i][0]) * (pre[i - 1] > 0)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite loss or gradient")
    return loss, GradientVector(grad)


def _unpack(batch):
    if isinstance(batch, DatasetShard):
        return batch.inputs, batch.labels
    X, y = batch
    return np.atleast_2d(np.asarray(X, dtype=np.float64)), np.asarray(y, dtype=np.int64).reshape(-1)


# -- data --------------------------------------------------------------------

@dataclass
class DatasetShard:
    inputs: np.ndarray
    labels: np.ndarray
    owner_id: int = -1

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels differ in length")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx, owner_id=None) -> "DatasetShard":
        return DatasetShard(self.inputs[idx], self.labels[idx],
                            self.owner_id if owner_id is None else owner_id)

    def batches(self, batch_size: int, rng: np.random.Generator):
        """Endless shuffled minibatches (reshuffled every pass)."""
        n = len(self)
        while True:
            order = rng.permutation(n)
            for s in range(0, n, batch_size):
                yield self.subset(order[s:s + batch_size])


def _read_idx(path, magic: int):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated at byte 0 (no magic number)")
    (got,) = struct.unpack_from(">I", raw, 0)
    if got != magic:
        raise IdxFormatError(f"{path}: bad magic number {got:#010x} at byte 0, expected {magic:#010x}")
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise IdxFormatError(f"{path}: truncated header at byte {len(raw)}")
    dims = struct.unpack_from(">" + "I" * ndim, raw, 4)
    want = hdr + int(np.prod(dims))
    if len(raw) < want:
        raise IdxFormatError(f"{path}: truncated at byte {len(raw)}, expected {want} bytes")
    if len(raw) > want:
        raise IdxFormatError(f"{path}: {len(raw) - want} trailing bytes after byte {want}")
    return np.frombuffer(raw, dtype=np.uint8, offset=hdr).reshape(dims)


def load_mnist_idx(images_path, labels_path, owner_id=-1, n_classes=10) -> DatasetShard:
    """Read an IDX image/label pair (plain or .gz); pixels scaled by 1/255."""
    images = _read_idx(images_path, IMAGES_MAGIC)
    labels = _read_idx(labels_path, LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels "
            f"(count field at byte 4)")
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        off = 8 + int(bad[0])
        raise IdxFormatError(f"{labels_path}: label {int(labels[bad[0]])} at byte {off} outside [0, {n_classes})")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return DatasetShard(X, labels.astype(np.int64), owner_id)


def mnist_dir(root=None) -> Path:
    """Directory holding the four MNIST IDX files (``.gz`` or plain).

    Resolution order: ``root``, ``$PAIMFL_MNIST_DIR``, ``<repo>/data/mnist``.
    """
    if root is None:
        root = os.environ.get("PAIMFL_MNIST_DIR") or Path(__file__).resolve().parents[2] / "data" / "mnist"
    return Path(root)


def _find(root: Path, stem: str) -> Path:
    for name in (stem + ".gz", stem):
        if (root / name).exists():
            return root / name
    raise FileNotFoundError(f"{stem}[.gz] not found under {root} (run scripts/fetch_mnist.sh)")


def load_mnist(root=None) -> tuple[DatasetShard, DatasetShard]:
    """The standard (train 60000, test 10000) MNIST split."""
    root = mnist_dir(root)
    train = load_mnist_idx(_find(root, "train-images-idx3-ubyte"), _find(root, "train-labels-idx1-ubyte"))
    test = load_mnist_idx(_find(root, "t10k-images-idx3-ubyte"), _find(root, "t10k-labels-idx1-ubyte"))
    return train, test


def partition_noniid(data: DatasetShard, m: int, classes_per_client: int, seed=0) -> list[DatasetShard]:
    """Label-skew split into ``m`` disjoint shards covering all of ``data``.

    Client ``j`` holds ``classes_per_client`` consecutive classes of a seeded
    cyclic class order; each class is divided evenly among its holders.
    """
    classes = np.unique(data.labels)
    K = classes.size
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if not (1 <= classes_per_client <= K):
        raise ValueError(f"classes_per_client must be in [1, {K}], got {classes_per_client}")
    if m * classes_per_client < K:
        raise ValueError(
            f"{m} clients x {classes_per_client} classes cannot cover {K} classes")
    rng = np.random.default_rng(seed)
    cycle = classes[rng.permutation(K)]
    slots = [cycle[i % K] for i in range(m * classes_per_client)]
    holders = {int(c): [] for c in classes}
    for s, c in enumerate(slots):
        holders[int(c)].append(s // classes_per_client)
    owned = [[] for _ in range(m)]
    for c in classes:
        idx = np.flatnonzero(data.labels == c)
        idx = idx[rng.permutation(idx.size)]
        hs = holders[int(c)]
        if idx.size < len(hs):
            raise ValueError(
                f"class {int(c)} has {idx.size} samples for {len(hs)} shards; m exceeds available shards")
        for h, part in zip(hs, np.array_split(idx, len(hs))):
            owned[h].append(part)
    return [data.subset(np.sort(np.concatenate(p)), owner_id=j) for j, p in enumerate(owned)]


def synthetic_gaussian(classes: int, per_class: int, feature_dim: int, seed=0,
                       separation: float = 5.0) -> DatasetShard:
    """Unit-covariance Gaussian blobs with pairwise mean distance ``separation``,
    then min-max scaled per feature to [0, 1]."""
    for name, v in (("classes", classes), ("per_class", per_class), ("feature_dim", feature_dim)):
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v}")
    rng = np.random.default_rng(seed)
    if classes <= feature_dim:
        q, _ = np.linalg.qr(rng.normal(size=(feature_dim, classes)))
        dirs = q.T
    else:
        dirs = rng.normal(size=(classes, feature_dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = dirs * (separation / np.sqrt(2.0))
    X = np.concatenate([rng.normal(size=(per_class, feature_dim)) + mu for mu in means])
    y = np.repeat(np.arange(classes), per_class)
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    X = (X - lo) / span
    return DatasetShard(X, y)
