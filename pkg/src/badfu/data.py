"""Datasets, IDX ingestion, non-IID partitioning and trigger application.

A :class:`Dataset` is stored column-wise (ids, features, labels, origin
tags) so training can slice mini-batches without materialising per-example
objects; indexing or iterating yields :class:`LabeledExample` records.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, IngestionError, PartitionError
from .rng import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class Origin(IntEnum):
    CLEAN = 0
    BACKDOOR = 1
    CAMOUFLAGE = 2


@dataclass(frozen=True, eq=False)
class LabeledExample:
    id: int
    features: np.ndarray
    label: int
    origin: Origin = Origin.CLEAN


@dataclass(eq=False)
class Dataset:
    ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    origins: np.ndarray | None = None
    image_shape: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.ids.shape[0]
        if self.origins is None:
            self.origins = np.zeros(n, dtype=np.int8)
        self.origins = np.asarray(self.origins, dtype=np.int8)
        if self.features.ndim != 2 or self.features.shape[0] != n or self.labels.shape != (n,) \
                or self.origins.shape != (n,):
            raise ConfigError("dataset columns have inconsistent lengths")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ConfigError(f"labels must lie in [0, {self.n_classes})")
        if self.image_shape is not None:
            self.image_shape = (int(self.image_shape[0]), int(self.image_shape[1]))

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.ids.shape[0]

    def __getitem__(self, i: int) -> LabeledExample:
        return LabeledExample(int(self.ids[i]), self.features[i], int(self.labels[i]),
                              Origin(int(self.origins[i])))

    def __iter__(self) -> Iterator[LabeledExample]:
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_examples(cls, examples: Sequence[LabeledExample], d: int, n_classes: int,
                      image_shape: tuple[int, int] | None = None) -> Dataset:
        if examples:
            features = np.stack([e.features for e in examples])
        else:
            features = np.empty((0, d))
        return cls(
            ids=np.array([e.id for e in examples], dtype=np.int64),
            features=features,
            labels=np.array([e.label for e in examples], dtype=np.int64),
            n_classes=n_classes,
            origins=np.array([int(e.origin) for e in examples], dtype=np.int8),
            image_shape=image_shape,
        )

    def subset(self, index: np.ndarray) -> Dataset:
        index = np.asarray(index)
        return Dataset(self.ids[index], self.features[index], self.labels[index],
                       self.n_classes, self.origins[index], self.image_shape)

    def without_ids(self, ids) -> Dataset:
        drop = np.isin(self.ids, np.fromiter(ids, dtype=np.int64))
        return self.subset(np.flatnonzero(~drop))

    def select_ids(self, ids) -> Dataset:
        keep = np.isin(self.ids, np.fromiter(ids, dtype=np.int64))
        return self.subset(np.flatnonzero(keep))

    def with_origin(self, origin: Origin) -> Dataset:
        return self.subset(np.flatnonzero(self.origins == int(origin)))

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    @staticmethod
    def concat(parts: Sequence[Dataset]) -> Dataset:
        if not parts:
            raise ConfigError("nothing to concatenate")
        first = parts[0]
        return Dataset(
            np.concatenate([p.ids for p in parts]),
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            first.n_classes,
            np.concatenate([p.origins for p in parts]),
            first.image_shape,
        )


# --- IDX -----------------------------------------------------------------

def _read_bytes(path: Path) -> bytes:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IngestionError(f"{path}: {exc.strerror or exc}") from exc
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    raw = _read_bytes(path)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IngestionError(f"{path}: truncated IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IngestionError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = math.prod(dims)
    if len(raw) - header < size:
        raise IngestionError(f"{path}: truncated IDX payload ({len(raw) - header} of {size} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, n_classes: int = 10) -> Dataset:
    """Load an IDX image/label pair (gzip accepted) with pixels scaled by 1/255."""
    images = _parse_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _parse_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IngestionError(
            f"{labels_path}: {labels.shape[0]} labels for {images.shape[0]} images in {images_path}"
        )
    if labels.size and labels.max() >= n_classes:
        raise IngestionError(f"{labels_path}: label {labels.max()} outside [0, {n_classes})")
    n, h, w = images.shape
    return Dataset(
        ids=np.arange(n, dtype=np.int64),
        features=images.reshape(n, h * w).astype(np.float64) / 255.0,
        labels=labels.astype(np.int64),
        n_classes=n_classes,
        image_shape=(h, w),
    )


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images ``(n, H, W)`` and labels ``(n,)`` as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I3I", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


# --- synthetic ---------------------------------------------------------------

def gen_synthetic(n: int, d: int, n_classes: int, seed: int, noise: float = 0.15) -> Dataset:
    """Seeded class-conditional data in [0, 1]^d with balanced labels.

    When ``d`` is a perfect square the examples are images: each class owns
    a prototype made of a few 2-D Gaussian blobs inside a dark border, and
    every sample jitters the blob centres and amplitudes before adding
    pixel noise.  Otherwise class prototypes are uniform vectors and
    samples are prototype plus Gaussian noise.  Everything is clipped to
    [0, 1].
    """
    if min(n, d, n_classes) < 1:
        raise ConfigError("n, d and n_classes must all be >= 1")
    rng = make_rng(seed, "synthetic")
    labels = rng.permutation(np.arange(n) % n_classes)
    side = math.isqrt(d)
    if side * side != d or side < 8:
        prototypes = rng.uniform(0.0, 1.0, size=(n_classes, d))
        features = prototypes[labels] + rng.normal(0.0, noise, size=(n, d))
        return Dataset(np.arange(n, dtype=np.int64), np.clip(features, 0.0, 1.0), labels, n_classes,
                       image_shape=(side, side) if side * side == d else None)

    n_blobs = 5
    margin = max(2, side // 6)
    centres = rng.uniform(margin, side - 1 - margin, size=(n_classes, n_blobs, 2))
    widths = rng.uniform(side / 14, side / 8, size=(n_classes, n_blobs))
    grid = np.stack(np.meshgrid(np.arange(side), np.arange(side), indexing="ij"), axis=-1).reshape(d, 2)
    features = np.empty((n, d))
    for start in range(0, n, 1024):
        lab = labels[start:start + 1024]
        m = lab.shape[0]
        c = centres[lab] + rng.normal(0.0, side / 28, size=(m, n_blobs, 2))
        amp = rng.uniform(0.5, 1.0, size=(m, n_blobs))
        w = widths[lab]
        sq = ((grid[None, None, :, :] - c[:, :, None, :]) ** 2).sum(axis=-1)
        img = (amp[:, :, None] * np.exp(-sq / (2.0 * w[:, :, None] ** 2))).sum(axis=1)
        features[start:start + m] = img + rng.normal(0.0, noise, size=(m, d))
    return Dataset(np.arange(n, dtype=np.int64), np.clip(features, 0.0, 1.0), labels, n_classes,
                   image_shape=(side, side))


def train_test_split(ds: Dataset, n_test: int, seed: int) -> tuple[Dataset, Dataset]:
    order = make_rng(seed, "split").permutation(len(ds))
    return ds.subset(np.sort(order[n_test:])), ds.subset(np.sort(order[:n_test]))


# --- triggers ----------------------------------------------------------------

@dataclass(frozen=True)
class TriggerSpec:
    kind: str = "badnet_patch"
    target_label: int = 0
    patch_size: int = 3
    corner: str = "bottom_right"
    intensity: float = 1.0
    alpha: float = 0.2
    trigger_seed: int = 0

    CORNERS = ("bottom_right", "bottom_left", "top_right", "top_left")

    def __post_init__(self) -> None:
        if self.kind not in ("badnet_patch", "blended"):
            raise ConfigError(f"unknown trigger kind {self.kind!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("blend alpha must lie in (0, 1)")
        if self.corner not in self.CORNERS:
            raise ConfigError(f"corner must be one of {self.CORNERS}")
        if self.patch_size < 1:
            raise ConfigError("patch_size must be >= 1")

    def validate_for(self, n_classes: int, d: int, image_shape: tuple[int, int] | None) -> None:
        if not 0 <= self.target_label < n_classes:
            raise ConfigError(f"target label {self.target_label} outside [0, {n_classes})")
        if self.kind == "badnet_patch":
            if image_shape is None:
                raise ConfigError("patch trigger needs image-shaped features")
            h, w = image_shape
            if self.patch_size > h or self.patch_size > w or h * w != d:
                raise ConfigError(f"{self.patch_size}x{self.patch_size} patch does not fit {image_shape}")

    def watermark(self, d: int) -> np.ndarray:
        """Seeded uniform-noise blend pattern in [0, 1]^d."""
        return make_rng(self.trigger_seed, "watermark", d).uniform(0.0, 1.0, size=d)

    def patch_index(self, image_shape: tuple[int, int]) -> np.ndarray:
        h, w = image_shape
        s = self.patch_size
        rows = range(h - s, h) if self.corner.startswith("bottom") else range(s)
        cols = range(w - s, w) if self.corner.endswith("right") else range(s)
        return np.array([r * w + c for r in rows for c in cols], dtype=np.int64)

    def apply(self, features: np.ndarray, image_shape: tuple[int, int] | None) -> np.ndarray:
        """Triggered copy of a feature matrix (or single vector)."""
        x = np.array(features, dtype=np.float64, copy=True)
        d = x.shape[-1]
        if self.kind == "badnet_patch":
            if image_shape is None or image_shape[0] * image_shape[1] != d:
                raise ConfigError("patch trigger needs image-shaped features")
            if self.patch_size > min(image_shape):
                raise ConfigError(f"{self.patch_size}x{self.patch_size} patch does not fit {image_shape}")
            x[..., self.patch_index(image_shape)] = self.intensity
        else:
            x = (1.0 - self.alpha) * x + self.alpha * self.watermark(d)
        return np.clip(x, 0.0, 1.0)


def apply_trigger(x: LabeledExample, t: TriggerSpec, poison_label: bool,
                  image_shape: tuple[int, int] | None = None) -> LabeledExample:
    if t.kind == "badnet_patch" and image_shape is None:
        side = math.isqrt(x.features.shape[0])
        if side * side != x.features.shape[0]:
            raise ConfigError("patch trigger needs an image shape")
        image_shape = (side, side)
    return LabeledExample(
        id=x.id,
        features=t.apply(x.features, image_shape),
        label=t.target_label if poison_label else x.label,
        origin=Origin.BACKDOOR if poison_label else Origin.CAMOUFLAGE,
    )


def trigger_dataset(ds: Dataset, t: TriggerSpec, poison_label: bool) -> Dataset:
    """Vectorised :func:`apply_trigger` over a whole dataset."""
    n = len(ds)
    return Dataset(
        ids=ds.ids.copy(),
        features=t.apply(ds.features, ds.image_shape),
        labels=np.full(n, t.target_label) if poison_label else ds.labels.copy(),
        n_classes=ds.n_classes,
        origins=np.full(n, Origin.BACKDOOR if poison_label else Origin.CAMOUFLAGE, dtype=np.int8),
        image_shape=ds.image_shape,
    )


# --- partitioning ------------------------------------------------------------

@dataclass(frozen=True)
class PartitionSpec:
    scheme: str = "dominant"
    n_clients: int = 5
    seed: int = 0
    ratio: float = 0.7
    classes_per_client: int | None = None
    alpha: float = 0.3

    def __post_init__(self) -> None:
        if self.scheme not in ("dominant", "dirichlet", "iid"):
            raise ConfigError(f"unknown partition scheme {self.scheme!r}")
        if self.n_clients < 2:
            raise ConfigError("need at least 2 clients")
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError("dominant ratio must lie in (0, 1]")
        if self.alpha <= 0:
            raise ConfigError("dirichlet alpha must be positive")


def dominant_classes(k: int, n_clients: int, n_classes: int, per_client: int | None = None) -> list[int]:
    """Client ``k``'s (0-based) dominant classes: ``(k * ceil(C/K) + j) mod C``."""
    stride = math.ceil(n_classes / n_clients)
    per_client = stride if per_client is None else per_client
    return sorted({(k * stride + j) % n_classes for j in range(per_client)})


def partition(ds: Dataset, spec: PartitionSpec) -> list[Dataset]:
    """Split ``ds`` into ``spec.n_clients`` id-disjoint parts covering every example."""
    K = spec.n_clients
    if K > len(ds):
        raise PartitionError(f"{K} clients but only {len(ds)} examples")
    rng = make_rng(spec.seed, "partition", spec.scheme)
    if spec.scheme == "dominant":
        assignment = _dominant(ds, spec, rng)
    elif spec.scheme == "dirichlet":
        assignment = _dirichlet(ds, spec, rng)
    else:
        assignment = np.array_split(rng.permutation(len(ds)), K)
    return [ds.subset(np.sort(idx)) for idx in assignment]


def _dominant(ds: Dataset, spec: PartitionSpec, rng: np.random.Generator) -> list[np.ndarray]:
    K, C = spec.n_clients, ds.n_classes
    per_client = spec.classes_per_client or math.ceil(C / K)
    if per_client * K < C:
        raise PartitionError(f"{K} clients x {per_client} dominant classes cannot cover {C} classes")
    quotas = [len(ds) // K + (1 if k < len(ds) % K else 0) for k in range(K)]
    pools = {c: list(rng.permutation(np.flatnonzero(ds.labels == c))) for c in range(C)}
    taken: list[list[int]] = [[] for _ in range(K)]
    dominants = [dominant_classes(k, K, C, per_client) for k in range(K)]

    for k in range(K):
        want = int(round(spec.ratio * quotas[k]))
        classes = dominants[k]
        shares = [want // len(classes) + (1 if j < want % len(classes) else 0) for j in range(len(classes))]
        for c, share in zip(classes, shares):
            if share > len(pools[c]):
                raise PartitionError(
                    f"client {k} needs {share} examples of class {c}, only {len(pools[c])} left"
                )
            taken[k].extend(pools[c][:share])
            pools[c] = pools[c][share:]

    # remaining quotas come from the other classes' leftovers, in proportion
    # to what is left, so no client ends up with extra dominant samples
    need = np.array([quotas[k] - len(taken[k]) for k in range(K)])
    left = np.array([len(pools[c]) for c in range(C)])
    allowed = np.ones((K, C), dtype=bool)
    for k in range(K):
        allowed[k, dominants[k]] = False
    plan = _transport(need, left, allowed)
    for c in range(C):
        offset = 0
        for k in range(K):
            taken[k].extend(pools[c][offset:offset + plan[k, c]])
            offset += plan[k, c]
    return [np.array(t, dtype=np.int64) for t in taken]


def _transport(rows: np.ndarray, cols: np.ndarray, allowed: np.ndarray, iters: int = 500) -> np.ndarray:
    """Integer matrix on ``allowed`` cells with the given row and column sums.

    Sinkhorn scaling gives a proportional real solution; flooring it and
    handing out the remaining units by largest fractional part, then along
    augmenting paths, keeps both margins exact.  If the ``allowed`` cells
    cannot absorb everything, the last units may land anywhere.
    """
    if rows.sum() != cols.sum():
        raise PartitionError("partition quotas do not match the examples left")
    m = allowed.astype(np.float64)
    for _ in range(iters):
        r = m.sum(axis=1)
        m *= np.divide(rows, r, out=np.zeros_like(r), where=r > 0)[:, None]
        c = m.sum(axis=0)
        m *= np.divide(cols, c, out=np.zeros_like(c), where=c > 0)[None, :]
    plan = np.floor(m).astype(np.int64)
    frac = m - plan
    # Sinkhorn may not converge when the mask is too tight; trim overfull margins
    for view, target in ((plan, rows), (plan.T, cols)):
        for i, over in enumerate(view.sum(axis=1) - target):
            for j in np.argsort(-view[i], kind="stable"):
                if over <= 0:
                    break
                cut = min(over, view[i, j])
                view[i, j] -= cut
                over -= cut
    row_def = rows - plan.sum(axis=1)
    col_def = cols - plan.sum(axis=0)
    for flat in np.argsort(-frac, axis=None, kind="stable"):
        k, c = divmod(int(flat), allowed.shape[1])
        if allowed[k, c] and row_def[k] > 0 and col_def[c] > 0:
            plan[k, c] += 1
            row_def[k] -= 1
            col_def[c] -= 1
    while row_def.any():
        # leftover units from rounding: shift them along augmenting paths
        if not _augment(plan, allowed, row_def, col_def):
            # too few non-dominant leftovers: the remainder spills into dominant classes
            allowed = np.ones_like(allowed)
    return plan


def _augment(plan: np.ndarray, allowed: np.ndarray, row_def: np.ndarray, col_def: np.ndarray) -> bool:
    """Route one unit from a deficit row to a deficit column (BFS on the residual graph)."""
    row_from: dict[int, int | None] = {int(k): None for k in np.flatnonzero(row_def > 0)}
    col_from: dict[int, int] = {}
    frontier = list(row_from)
    while frontier:
        nxt = []
        for k in frontier:
            for c in map(int, np.flatnonzero(allowed[k])):
                if c in col_from:
                    continue
                col_from[c] = k
                if col_def[c] > 0:
                    col_def[c] -= 1
                    while True:
                        k = col_from[c]
                        plan[k, c] += 1
                        if row_from[k] is None:
                            row_def[k] -= 1
                            return True
                        c = row_from[k]
                        plan[k, c] -= 1
                for k2 in map(int, np.flatnonzero(plan[:, c] > 0)):
                    if k2 not in row_from:
                        row_from[k2] = c
                        nxt.append(k2)
        frontier = nxt
    return False


def _dirichlet(ds: Dataset, spec: PartitionSpec, rng: np.random.Generator,
               max_tries: int = 100) -> list[np.ndarray]:
    K = spec.n_clients
    for _ in range(max_tries):
        parts: list[list[np.ndarray]] = [[] for _ in range(K)]
        for c in range(ds.n_classes):
            idx = rng.permutation(np.flatnonzero(ds.labels == c))
            props = rng.dirichlet(np.full(K, spec.alpha))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
            for k, chunk in enumerate(np.split(idx, cuts)):
                parts[k].append(chunk)
        assignment = [np.concatenate(p) for p in parts]
        if all(len(a) > 0 for a in assignment):
            return assignment
    raise PartitionError(f"dirichlet(alpha={spec.alpha}) left a client empty after {max_tries} draws")


# --- attack data -------------------------------------------------------------

def stratified_sample(ds: Dataset, size: int, rng: np.random.Generator) -> Dataset:
    """Sample up to ``size`` examples, balancing labels as far as availability allows."""
    size = min(size, len(ds))
    by_class = [rng.permutation(np.flatnonzero(ds.labels == c)) for c in range(ds.n_classes)]
    chosen: list[int] = []
    per_class = math.ceil(size / ds.n_classes)
    for idx in by_class:
        chosen.extend(idx[:per_class].tolist())
    if len(chosen) > size:
        chosen = rng.choice(np.array(chosen), size=size, replace=False).tolist()
    elif len(chosen) < size:
        left = np.setdiff1d(np.arange(len(ds)), chosen)
        chosen.extend(rng.choice(left, size=size - len(chosen), replace=False).tolist())
    return ds.subset(np.sort(np.array(chosen, dtype=np.int64)))


def data_prepare(attack_set: Dataset, t: TriggerSpec, n_bd: int, n_c: int,
                 seed: int) -> tuple[Dataset, Dataset]:
    """Draw disjoint backdoor and camouflage sets and apply the trigger.

    Backdoor examples take the target label; camouflage examples keep their
    own. Source ids are preserved.
    """
    if n_bd < 0 or n_c < 0:
        raise ConfigError("n_bd and n_c must be non-negative")
    if n_bd + n_c > len(attack_set):
        raise ConfigError(f"attack set has {len(attack_set)} examples, {n_bd + n_c} requested")
    missing = np.flatnonzero(attack_set.label_counts() == 0)
    if missing.size:
        raise ConfigError(f"attack set is missing labels {missing.tolist()}")
    t.validate_for(attack_set.n_classes, attack_set.d, attack_set.image_shape)
    order = make_rng(seed, "data_prepare").permutation(len(attack_set))
    bd = attack_set.subset(np.sort(order[:n_bd]))
    cam = attack_set.subset(np.sort(order[n_bd:n_bd + n_c]))
    return trigger_dataset(bd, t, poison_label=True), trigger_dataset(cam, t, poison_label=False)


__all__ = [
    "Origin", "LabeledExample", "Dataset", "TriggerSpec", "PartitionSpec",
    "load_idx", "write_idx", "gen_synthetic", "train_test_split", "partition",
    "dominant_classes", "apply_trigger", "trigger_dataset", "stratified_sample",
    "data_prepare",
]
