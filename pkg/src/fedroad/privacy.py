"""Local differential privacy for high-dimensional multimodal records.

Pipeline per record, applied on-device before anything leaves it:

1. dimensionality reduction by seed-regenerable random sign matrices
   (text: tanh(Q y), image: tanh(Q x R)), squashing every coordinate into
   (-1, 1) so the per-coordinate sensitivity is a fixed constant 2;
2. per-coordinate Laplace noise with the total budget epsilon split evenly
   over the output coordinates, i.e. scale = sensitivity * dims / epsilon.

Short text vectors skip the reduction (their dimension is already small);
they still get the noise. ``empirical_ldp_ratio`` is the statistical
verification harness: it histograms mechanism outputs for two fixed inputs
and reports the worst smoothed bin ratio, which for a true epsilon-LDP
mechanism stays below exp(epsilon) up to sampling noise.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DomainError, InputError, ShapeError
from .numcore import RngStream, Tensor

__all__ = [
    "SignMatrix",
    "PrivacyBudget",
    "PrivatizedRecord",
    "make_sign_matrix",
    "regenerate_sign_matrix",
    "reduce_text",
    "reduce_image",
    "laplace_perturb",
    "privatize_record",
    "empirical_ldp_ratio",
    "serialize_privatized",
    "deserialize_privatized",
    "DEFAULT_SENSITIVITY",
    "DEFAULT_TEXT_SKIP_THRESHOLD",
]

DEFAULT_SENSITIVITY = 2.0  # post-tanh coordinates live in (-1, 1)
DEFAULT_TEXT_SKIP_THRESHOLD = 64  # below this, text keeps its dimension

# float64 tanh saturates to exactly +-1.0 around |x| ~ 19; clamp one ulp back
# so reduced coordinates stay strictly inside the open interval.
_ONE_INSIDE = float(np.nextafter(1.0, 0.0))


def _squash(z: np.ndarray) -> np.ndarray:
    return np.clip(np.tanh(z), -_ONE_INSIDE, _ONE_INSIDE)


@dataclass(frozen=True)
class SignMatrix:
    """Random projection matrix with entries +-1/e, regenerable from its seed."""

    rows: int
    cols: int
    e: int
    seed: int
    stream_id: int
    entries: np.ndarray = field(repr=False, compare=False)

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.e < 1:
            raise DomainError("rows, cols and e must all be >= 1")


@dataclass(frozen=True)
class PrivacyBudget:
    """Total budget epsilon split evenly over the output coordinates."""

    epsilon_total: float
    output_dims: int
    per_dim_sensitivity: float = DEFAULT_SENSITIVITY

    def __post_init__(self):
        if self.epsilon_total <= 0:
            raise DomainError(f"epsilon must be positive, got {self.epsilon_total}")
        if self.output_dims < 1:
            raise DomainError(f"output_dims must be >= 1, got {self.output_dims}")
        if self.per_dim_sensitivity <= 0:
            raise DomainError("per-dimension sensitivity must be positive")

    @property
    def per_dim_epsilon(self) -> float:
        return self.epsilon_total / self.output_dims

    @property
    def noise_scale(self) -> float:
        # pinned operation order: (sensitivity * dims) / epsilon
        return self.per_dim_sensitivity * self.output_dims / self.epsilon_total


@dataclass(frozen=True)
class PrivatizedRecord:
    """Noised reduced features of one record plus everything needed to audit it.

    The projection matrices are not shipped; the receiving side regenerates
    them from the recorded (seed, stream_id) pairs. The budget metadata is
    immutable: post-processing cannot change the epsilon that was spent.
    """

    modalities: tuple[str, ...]
    label: int
    text_feature: Tensor | None
    image_feature: Tensor | None
    text_budget: PrivacyBudget | None
    image_budget: PrivacyBudget | None
    projection_seeds: dict[str, tuple[int, int]]
    text_reduced: bool


def make_sign_matrix(rows: int, cols: int, e: int, rng: RngStream) -> SignMatrix:
    """Entries sign(u)/e with u ~ U(-1, 1); u == 0 counts as positive.

    `rng` must be freshly created/spawned: the matrix records the stream's
    (seed, stream_id) so a receiver can regenerate it bit-identically.
    """
    if rows < 1 or cols < 1 or e < 1:
        raise DomainError("rows, cols and e must all be >= 1")
    u = 2.0 * rng.uniform01_array(rows * cols) - 1.0
    entries = np.where(u < 0, -1.0 / e, 1.0 / e).reshape(rows, cols)
    return SignMatrix(rows, cols, e, rng.seed, rng.stream_id, entries)


def regenerate_sign_matrix(rows: int, cols: int, e: int, seed: int, stream_id: int) -> SignMatrix:
    return make_sign_matrix(rows, cols, e, RngStream(seed, stream_id))


def reduce_text(y: Tensor, q: SignMatrix) -> Tensor:
    """tanh(Q y): project a d-vector to q.rows coordinates inside (-1, 1)."""
    if y.rank != 1 or q.cols != y.size:
        raise ShapeError(f"projection {q.rows}x{q.cols} cannot reduce shape {y.shape}")
    return Tensor((q.rows,), _squash(q.entries @ y.data))


def reduce_image(x: Tensor, q: SignMatrix, r: SignMatrix) -> Tensor:
    """tanh(Q x R): project a d1 x d2 image to q.rows x r.e coordinates."""
    if x.rank != 2:
        raise ShapeError(f"image must be rank 2, got shape {x.shape}")
    d1, d2 = x.shape
    if q.cols != d1 or r.rows != d2:
        raise ShapeError(
            f"projection chain {q.rows}x{q.cols} . {d1}x{d2} . {r.rows}x{r.cols} is invalid"
        )
    return Tensor.from_array(_squash(q.entries @ x.nd @ r.entries))


def laplace_perturb(v: Tensor, budget: PrivacyBudget, rng: RngStream) -> Tensor:
    """Add independent Laplace(budget.noise_scale) noise to every coordinate."""
    if v.size != budget.output_dims:
        raise InputError(f"budget covers {budget.output_dims} dims, tensor has {v.size}")
    return Tensor(v.shape, v.data + rng.laplace_array(budget.noise_scale, v.size))


def _text_to_vector(tokens: list[int], vocab: int) -> np.ndarray:
    """Numeric encoding of raw text: token-count vector over the vocabulary."""
    counts = np.zeros(vocab, dtype=np.float64)
    for t in tokens:
        if not 0 <= t < vocab:
            raise InputError(f"token id {t} outside vocabulary of size {vocab}")
        counts[t] += 1.0
    return counts


def privatize_record(
    record,
    epsilon_total: float,
    c: int,
    e: int,
    rng: RngStream,
    *,
    vocab: int | None = None,
    text_skip_threshold: int = DEFAULT_TEXT_SKIP_THRESHOLD,
    sensitivity: float = DEFAULT_SENSITIVITY,
    projection_seed: int | None = None,
) -> PrivatizedRecord:
    """Run the full pipeline on one record; each present modality spends epsilon.

    Text: encode tokens to a count vector (dimension = vocab); if that
    dimension exceeds `text_skip_threshold`, reduce to c coordinates first.
    Image: reduce d1 x d2 to c x e.

    Noise streams are spawned from `rng`, so distinct per-record streams give
    independent noise. Projection matrices are the receiving edge's: they
    derive from `projection_seed` (default: rng.seed) and fixed stream tags
    only, so every record privatized under one edge seed shares the same
    matrices - without shared projections the reduced features of different
    records would live in unrelated coordinate systems and carry no usable
    class signal. The (seed, stream_id) pairs travel in the record metadata
    for bit-identical regeneration.
    """
    if epsilon_total <= 0:
        raise DomainError(f"epsilon must be positive, got {epsilon_total}")
    has_text = getattr(record, "tokens", None) is not None or getattr(record, "text_vec", None) is not None
    has_image = getattr(record, "image", None) is not None
    if not has_text and not has_image:
        raise InputError("record has neither text nor image modality")
    proj_root = RngStream(projection_seed if projection_seed is not None else rng.seed, 8400)

    modalities: list[str] = []
    seeds: dict[str, tuple[int, int]] = {}
    text_feature = image_feature = None
    text_budget = image_budget = None
    text_reduced = False

    if has_text:
        if getattr(record, "text_vec", None) is not None:
            y = np.asarray(record.text_vec, dtype=np.float64)
        else:
            if vocab is None:
                vocab = max(record.tokens) + 1
            y = _text_to_vector(record.tokens, vocab)
        d_t = y.size
        if d_t > text_skip_threshold:
            if c > d_t:
                raise InputError(f"target dimension {c} exceeds text dimension {d_t}")
            q_rng = proj_root.spawn(101, c, d_t)
            q = make_sign_matrix(c, d_t, e, q_rng)
            seeds["text_q"] = (q_rng.seed, q_rng.stream_id)
            reduced = reduce_text(Tensor((d_t,), y), q)
            text_reduced = True
        else:
            reduced = Tensor((d_t,), y)
        text_budget = PrivacyBudget(epsilon_total, reduced.size, sensitivity)
        text_feature = laplace_perturb(reduced, text_budget, rng.spawn(102))
        modalities.append("text")

    if has_image:
        img = np.asarray(record.image, dtype=np.float64)
        if img.ndim != 2:
            raise ShapeError(f"image must be 2-D, got shape {img.shape}")
        d1, d2 = img.shape
        if c > d1 or e > d2:
            raise InputError(f"target dims ({c}, {e}) exceed image dims ({d1}, {d2})")
        q_rng = proj_root.spawn(103, c, d1)
        r_rng = proj_root.spawn(104, d2, e)
        q = make_sign_matrix(c, d1, e, q_rng)
        r = make_sign_matrix(d2, e, e, r_rng)
        seeds["image_q"] = (q_rng.seed, q_rng.stream_id)
        seeds["image_r"] = (r_rng.seed, r_rng.stream_id)
        reduced = reduce_image(Tensor.from_array(img), q, r)
        image_budget = PrivacyBudget(epsilon_total, reduced.size, sensitivity)
        image_feature = laplace_perturb(reduced, image_budget, rng.spawn(105))
        modalities.append("image")

    return PrivatizedRecord(
        modalities=tuple(modalities),
        label=int(getattr(record, "label", -1)),
        text_feature=text_feature,
        image_feature=image_feature,
        text_budget=text_budget,
        image_budget=image_budget,
        projection_seeds=seeds,
        text_reduced=text_reduced,
    )


MAGIC_PRIVATIZED = b"FRP1"
_KIND_PRIVATIZED = 4


def _pack_feature(t: Tensor) -> bytes:
    head = struct.pack("<B", t.rank) + struct.pack(f"<{t.rank}I", *t.shape)
    return head + t.data.astype("<f8").tobytes()


def _unpack_feature(buf: bytes, off: int) -> tuple[Tensor, int]:
    rank = buf[off]
    off += 1
    shape = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    n = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(buf, dtype="<f8", count=n, offset=off)
    return Tensor(tuple(shape), data.copy()), off + 8 * n


def serialize_privatized(rec: PrivatizedRecord) -> bytes:
    """FRP1 wire form: header convention shared with the payload codecs.

    Noised features travel as float64 (they are the values of record; no
    further lossy step is acceptable), projection matrices travel as their
    (seed, stream_id) pairs only.
    """
    flags = (
        (1 if rec.text_feature is not None else 0)
        | (2 if rec.image_feature is not None else 0)
        | (4 if rec.text_reduced else 0)
    )
    eps = (rec.text_budget or rec.image_budget).epsilon_total
    sens = (rec.text_budget or rec.image_budget).per_dim_sensitivity
    body = struct.pack("<Biddd", flags, rec.label, eps, sens, 0.0)
    if rec.text_feature is not None:
        body += _pack_feature(rec.text_feature)
        if rec.text_reduced:
            seed, sid = rec.projection_seeds["text_q"]
            body += struct.pack("<QQ", seed, sid)
    if rec.image_feature is not None:
        body += _pack_feature(rec.image_feature)
        qs, qsid = rec.projection_seeds["image_q"]
        rs, rsid = rec.projection_seeds["image_r"]
        body += struct.pack("<QQQQ", qs, qsid, rs, rsid)
    return MAGIC_PRIVATIZED + struct.pack("<BB", _KIND_PRIVATIZED, 0) + body


def deserialize_privatized(buf: bytes) -> PrivatizedRecord:
    if len(buf) < 6 or buf[:4] != MAGIC_PRIVATIZED or buf[4] != _KIND_PRIVATIZED:
        raise InputError("not a privatized-record blob")
    off = 6
    flags, label, eps, sens, _ = struct.unpack_from("<Biddd", buf, off)
    off += struct.calcsize("<Biddd")
    text_feature = image_feature = None
    text_budget = image_budget = None
    seeds: dict[str, tuple[int, int]] = {}
    text_reduced = bool(flags & 4)
    modalities: list[str] = []
    if flags & 1:
        text_feature, off = _unpack_feature(buf, off)
        if text_reduced:
            seed, sid = struct.unpack_from("<QQ", buf, off)
            off += 16
            seeds["text_q"] = (seed, sid)
        text_budget = PrivacyBudget(eps, text_feature.size, sens)
        modalities.append("text")
    if flags & 2:
        image_feature, off = _unpack_feature(buf, off)
        qs, qsid, rs, rsid = struct.unpack_from("<QQQQ", buf, off)
        off += 32
        seeds["image_q"] = (qs, qsid)
        seeds["image_r"] = (rs, rsid)
        image_budget = PrivacyBudget(eps, image_feature.size, sens)
        modalities.append("image")
    if off != len(buf):
        raise InputError("trailing bytes in privatized-record blob")
    return PrivatizedRecord(
        modalities=tuple(modalities),
        label=label,
        text_feature=text_feature,
        image_feature=image_feature,
        text_budget=text_budget,
        image_budget=image_budget,
        projection_seeds=seeds,
        text_reduced=text_reduced,
    )


def empirical_ldp_ratio(
    mechanism: Callable[[np.ndarray, int, RngStream], np.ndarray],
    x,
    x_prime,
    epsilon: float,
    bins: int = 48,
    trials: int = 100_000,
    rng: RngStream | None = None,
) -> float:
    """Worst smoothed histogram ratio between mechanism outputs on x and x'.

    `mechanism(input, trials, rng)` returns one output per trial (an array of
    scalars, or of vectors whose first coordinate is then used as the fixed
    scalar projection). Outputs of both runs are pooled to fix common bin
    edges (1st..99th percentile, outliers clamped into the edge bins), then
    the max over bins of (count_x + 1)/(count_x' + 1) is returned. For an
    epsilon-LDP mechanism this statistic approaches exp(epsilon) from below;
    `epsilon` is the claimed budget the caller compares against.
    """
    if trials < 1:
        raise DomainError("trials must be positive")
    if bins < 2:
        raise DomainError("need at least two bins")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    x_prime = np.atleast_1d(np.asarray(x_prime, dtype=np.float64))
    if x.shape != x_prime.shape:
        raise InputError(f"inputs must share a shape, got {x.shape} vs {x_prime.shape}")
    if epsilon <= 0:
        raise DomainError(f"claimed epsilon must be positive, got {epsilon}")
    rng = rng if rng is not None else RngStream(0)

    def _project(out: np.ndarray) -> np.ndarray:
        out = np.asarray(out, dtype=np.float64)
        return out if out.ndim == 1 else out.reshape(out.shape[0], -1)[:, 0]

    a = _project(mechanism(x, trials, rng.spawn(1)))
    b = _project(mechanism(x_prime, trials, rng.spawn(2)))
    pooled = np.concatenate([a, b])
    lo, hi = np.quantile(pooled, [0.01, 0.99])
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    count_a = np.histogram(np.clip(a, lo, hi), edges)[0]
    count_b = np.histogram(np.clip(b, lo, hi), edges)[0]
    return float(np.max((count_a + 1.0) / (count_b + 1.0)))
