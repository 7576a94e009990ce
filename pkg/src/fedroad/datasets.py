"""Dataset loading, synthetic multimodal generation, non-i.i.d. partitioners.

Records carry an optional image, an optional token list, and (after a trip
through the privacy pipeline) an optional dense text feature. The IDX
loader/writer speaks the classic big-endian format (magic 0x00000803 for
images, 0x00000801 for labels); the generators are fully deterministic per
seed so fixtures never need to be shipped.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError
from .numcore import RngStream

__all__ = [
    "Record",
    "PartitionPlan",
    "load_idx",
    "write_idx",
    "synth_multimodal",
    "synth_digits",
    "shard_partition",
    "class_restricted_partition",
]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Record:
    """One training example; at least one modality must be present."""

    label: int
    image: np.ndarray | None = None  # 2-D float64 (or 1-D dense feature)
    tokens: list[int] | None = None
    text_vec: np.ndarray | None = None  # dense text feature (post-privacy)

    def __post_init__(self):
        if self.image is None and self.tokens is None and self.text_vec is None:
            raise InputError("record needs at least one modality")


@dataclass(frozen=True)
class PartitionPlan:
    """client id -> record indices; lists are disjoint by construction."""

    assignments: dict[int, list[int]]
    scheme: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def client_indices(self, client: int) -> list[int]:
        return self.assignments[client]

    @property
    def num_clients(self) -> int:
        return len(self.assignments)


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------


def _read_u32(f) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise FormatError("truncated IDX header")
    return struct.unpack(">I", raw)[0]


def load_idx(images_path, labels_path) -> list[Record]:
    """Load an IDX image/label file pair into records with pixels in [0, 1]."""
    with open(images_path, "rb") as f:
        if _read_u32(f) != IDX_IMAGE_MAGIC:
            raise FormatError(f"bad magic in image file {images_path}")
        count, rows, cols = _read_u32(f), _read_u32(f), _read_u32(f)
        raw = f.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise FormatError(f"image file {images_path} is truncated")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)
    with open(labels_path, "rb") as f:
        if _read_u32(f) != IDX_LABEL_MAGIC:
            raise FormatError(f"bad magic in label file {labels_path}")
        n = _read_u32(f)
        if n != count:
            raise FormatError(f"count mismatch: {count} images vs {n} labels")
        raw = f.read(n)
        if len(raw) != n:
            raise FormatError(f"label file {labels_path} is truncated")
        labels = np.frombuffer(raw, dtype=np.uint8)
    return [
        Record(label=int(labels[i]), image=images[i].astype(np.float64) / 255.0)
        for i in range(count)
    ]


def write_idx(records: list[Record], images_path, labels_path) -> None:
    """Inverse of load_idx; pixel floats in [0, 1] are scaled back to bytes."""
    if not records:
        raise InputError("cannot write an empty dataset")
    shape = records[0].image.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, len(records), *shape))
        for r in records:
            if r.image is None or r.image.shape != shape:
                raise InputError("all records need images of one shape")
            f.write(np.clip(np.round(r.image * 255.0), 0, 255).astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, len(records)))
        f.write(bytes(int(r.label) for r in records))


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------


def synth_multimodal(
    n_classes: int,
    n_per_class: int,
    image_dim: int = 32,
    vocab: int = 64,
    text_len: int = 12,
    noise_sigma: float = 0.1,
    seed: int = 0,
    *,
    antipodal: bool = False,
    token_purity: float = 0.9,
) -> list[Record]:
    """Deterministic multimodal records: prototype image + noise, class tokens.

    Each class has a fixed random +-0.5 image prototype and a categorical
    token distribution putting `token_purity` of its mass on the class's own
    vocabulary slice (the rest uniform), so both modal difficulty knobs are
    explicit. With `antipodal`, prototypes come in negated pairs (class
    2i+1 = -class 2i), which maximizes class separation under sign
    projections.
    """
    if n_classes < 2:
        raise InputError("need at least two classes")
    root = RngStream(seed, 7001)
    proto_rng = root.spawn(1)
    protos = []
    for c in range(n_classes):
        if antipodal and c % 2 == 1:
            protos.append(-protos[c - 1])
        else:
            pattern = proto_rng.uniform01_array(image_dim * image_dim) < 0.5
            protos.append(np.where(pattern, 0.5, -0.5).reshape(image_dim, image_dim))
    # token distribution: 90% mass on the class's own slice of the vocabulary
    slice_w = max(1, vocab // n_classes)
    per_class: list[list[Record]] = []
    for c in range(n_classes):
        rng = root.spawn(2, c)
        rows = []
        for _ in range(n_per_class):
            img = protos[c] + noise_sigma * rng.normal_array(image_dim * image_dim).reshape(
                image_dim, image_dim
            )
            tokens = []
            for _ in range(text_len):
                if rng.uniform01() < token_purity:
                    tokens.append((c * slice_w + rng.randint(slice_w)) % vocab)
                else:
                    tokens.append(rng.randint(vocab))
            rows.append(Record(label=c, image=img, tokens=tokens))
        per_class.append(rows)
    # round-robin labels so any prefix/suffix split stays class-balanced
    return [per_class[i % n_classes][i // n_classes] for i in range(n_classes * n_per_class)]


def _smooth(a: np.ndarray, radius: int) -> np.ndarray:
    """Box blur via shifted sums (wrap-around edges are fine here)."""
    out = np.zeros_like(a)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            out += np.roll(np.roll(a, dy, axis=0), dx, axis=1)
    return out / (2 * radius + 1) ** 2


def synth_digits(
    n: int,
    seed: int = 0,
    image_dim: int = 28,
    noise_sigma: float = 0.25,
    max_shift: int = 2,
) -> list[Record]:
    """Ten-class digit-like images: smooth class glyphs + shift + pixel noise.

    Each class glyph is a deterministic low-frequency pattern (smoothed white
    noise, normalized to [0, 1]); records perturb it with a random circular
    shift and per-pixel noise, which keeps the task non-trivial for a linear
    model while staying easy for a small MLP. Labels cycle 0..9 so any prefix
    of the dataset is class-balanced.
    """
    root = RngStream(seed, 7002)
    glyph_rng = root.spawn(1)
    glyphs = []
    for _ in range(10):
        raw = glyph_rng.normal_array(image_dim * image_dim).reshape(image_dim, image_dim)
        g = _smooth(raw, 3)
        g = (g - g.min()) / (g.max() - g.min())
        glyphs.append(g)
    records = []
    noise_rng = root.spawn(2)
    for i in range(n):
        c = i % 10
        dy = noise_rng.randint(2 * max_shift + 1) - max_shift
        dx = noise_rng.randint(2 * max_shift + 1) - max_shift
        img = np.roll(np.roll(glyphs[c], dy, axis=0), dx, axis=1)
        img = img + noise_sigma * noise_rng.normal_array(image_dim * image_dim).reshape(
            image_dim, image_dim
        )
        records.append(Record(label=c, image=np.clip(img, 0.0, 1.0)))
    return records


# ---------------------------------------------------------------------------
# Partitioners
# ---------------------------------------------------------------------------


def shard_partition(
    labels, num_shards: int, shards_per_client: list[int], rng: RngStream
) -> PartitionPlan:
    """Label-sort, cut into equal shards, shuffle shards, deal to clients.

    Each shard then holds a contiguous label range (usually one class), which
    is what makes the split non-i.i.d. Shards left over after dealing stay
    unassigned.
    """
    labels = [int(x) for x in labels]
    n = len(labels)
    if num_shards < 1 or n % num_shards != 0:
        raise InputError(f"{num_shards} shards do not evenly divide {n} records")
    if sum(shards_per_client) > num_shards:
        raise InputError(
            f"clients request {sum(shards_per_client)} shards, only {num_shards} exist"
        )
    shard_size = n // num_shards
    order = np.argsort(np.asarray(labels), kind="stable")
    shards = [order[i * shard_size : (i + 1) * shard_size].tolist() for i in range(num_shards)]
    deal = rng.permutation(num_shards)
    assignments: dict[int, list[int]] = {}
    pos = 0
    for client, k in enumerate(shards_per_client):
        mine: list[int] = []
        for j in range(k):
            mine.extend(shards[deal[pos + j]])
        assignments[client] = sorted(mine)
        pos += k
    return PartitionPlan(
        assignments,
        "shard",
        {"num_shards": num_shards, "shards_per_client": list(shards_per_client)},
        rng.seed,
    )


def class_restricted_partition(
    records: list[Record], classes_per_client: int, num_clients: int, rng: RngStream
) -> PartitionPlan:
    """Each client draws `classes_per_client` distinct classes; class pools are
    split evenly among the clients that drew them (leftovers dropped)."""
    labels = sorted({r.label for r in records})
    n_classes = len(labels)
    if not 1 <= classes_per_client <= n_classes:
        raise InputError(
            f"classes_per_client {classes_per_client} not in [1, {n_classes}]"
        )
    picks = {
        client: [labels[i] for i in rng.permutation(n_classes)[:classes_per_client]]
        for client in range(num_clients)
    }
    by_class: dict[int, list[int]] = {c: [] for c in labels}
    for i, r in enumerate(records):
        by_class[r.label].append(i)
    assignments: dict[int, list[int]] = {client: [] for client in range(num_clients)}
    for c in labels:
        claimants = [client for client in range(num_clients) if c in picks[client]]
        if not claimants:
            continue
        pool = by_class[c]
        share = len(pool) // len(claimants)
        for j, client in enumerate(claimants):
            assignments[client].extend(pool[j * share : (j + 1) * share])
    for client in assignments:
        assignments[client].sort()
    return PartitionPlan(
        assignments,
        "class_restricted",
        {"classes_per_client": classes_per_client, "picks": picks},
        rng.seed,
    )
