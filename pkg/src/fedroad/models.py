"""Toy multimodal detector: encoders, fusion head, triplet pretraining.

Two small encoders map text (token ids) and images (flat pixel vectors) into
one shared embedding space of dimension k; a two-layer fusion head turns an
embedding into class probabilities. Pretraining shapes the embedding space
with a margin loss over (anchor, positive, negative) triplets measured by
cosine distance, mining the hardest in-batch negative for each anchor; the
classification stage then trains everything with cross-entropy.

All gradients are computed analytically (closed-form backward passes over
the forward caches); the test suite checks every one of them against central
finite differences. A plain MLP classifier for unimodal dense inputs lives
here too, as the model used by the digit experiments, and both models expose
the same protocol the federated engine consumes.

The margin term is max{ cosdist(a, p) - cosdist(a, n) + c, m } with
cosdist = 1 - cosine similarity. Set ``TripletConfig.use_similarity`` to
evaluate the raw-similarity variant of the formula instead (kept for
comparison; minimizing it pushes anchors away from positives).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, InputError, ShapeError
from .numcore import ModelParams, RngStream, Tensor

__all__ = [
    "ModelDims",
    "TextEncoderParams",
    "ImageEncoderParams",
    "DenseTextParams",
    "EncoderParams",
    "FusionParams",
    "TripletConfig",
    "EncodedItem",
    "TripletBatch",
    "init_encoder_params",
    "init_fusion_params",
    "encode_text",
    "encode_image",
    "triplet_term",
    "mine_hard_negatives",
    "combined_triplet_loss",
    "fuse_predict",
    "predict_record",
    "build_triplet_batch",
    "pretrain",
    "MultimodalClassifier",
    "MlpClassifier",
]


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class ModelDims:
    """Architecture sizes; defaults are the desk-scale configuration."""

    vocab: int = 64
    text_hidden: int = 32
    embed_dim: int = 16
    image_dim: int = 1024  # flattened pixel count
    image_hidden: int = 32
    n_classes: int = 5
    fusion_hidden: int = 32
    text_dense_dim: int | None = None  # dense text features (post-privacy)


@dataclass
class TextEncoderParams:
    embed: np.ndarray  # (V, h)
    w: np.ndarray  # (h, k)
    b: np.ndarray  # (k,)


@dataclass
class ImageEncoderParams:
    w1: np.ndarray  # (d, h)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h, k)
    b2: np.ndarray  # (k,)


@dataclass
class DenseTextParams:
    w: np.ndarray  # (d_t, k)
    b: np.ndarray  # (k,)


@dataclass
class EncoderParams:
    text: TextEncoderParams
    image: ImageEncoderParams
    text_dense: DenseTextParams | None = None

    def __post_init__(self):
        k = self.text.w.shape[1]
        if self.image.w2.shape[1] != k:
            raise ShapeError("text and image encoders must share the embedding dimension")
        if self.text_dense is not None and self.text_dense.w.shape[1] != k:
            raise ShapeError("dense text branch must share the embedding dimension")


@dataclass
class FusionParams:
    w1: np.ndarray  # (k, hf)
    b1: np.ndarray  # (hf,)
    w2: np.ndarray  # (hf, C)
    b2: np.ndarray  # (C,)


@dataclass(frozen=True)
class TripletConfig:
    """alpha weighs the text-only term; c is the margin, m the floor."""

    alpha: float = 0.1
    c: float = 0.2
    m: float = 0.0
    use_similarity: bool = False  # literal-formula variant, off by default

    def __post_init__(self):
        if self.c < 0:
            raise DomainError(f"margin c must be >= 0, got {self.c}")
        if self.m > self.c:
            raise DomainError(f"floor m must not exceed margin c ({self.m} > {self.c})")


def _normal(rng: RngStream, shape: tuple[int, ...], std: float) -> np.ndarray:
    n = int(np.prod(shape))
    return (rng.normal_array(n) * std).reshape(shape)


def init_encoder_params(dims: ModelDims, rng: RngStream) -> EncoderParams:
    h, k = dims.text_hidden, dims.embed_dim
    text = TextEncoderParams(
        embed=_normal(rng, (dims.vocab, h), 1.0),
        w=_normal(rng, (h, k), 1.0 / np.sqrt(h)),
        b=np.zeros(k),
    )
    hi = dims.image_hidden
    image = ImageEncoderParams(
        w1=_normal(rng, (dims.image_dim, hi), 1.0 / np.sqrt(dims.image_dim)),
        b1=np.zeros(hi),
        w2=_normal(rng, (hi, k), 1.0 / np.sqrt(hi)),
        b2=np.zeros(k),
    )
    dense = None
    if dims.text_dense_dim is not None:
        dense = DenseTextParams(
            w=_normal(rng, (dims.text_dense_dim, k), 1.0 / np.sqrt(dims.text_dense_dim)),
            b=np.zeros(k),
        )
    return EncoderParams(text=text, image=image, text_dense=dense)


def init_fusion_params(dims: ModelDims, rng: RngStream) -> FusionParams:
    k, hf, c = dims.embed_dim, dims.fusion_hidden, dims.n_classes
    return FusionParams(
        w1=_normal(rng, (k, hf), 1.0 / np.sqrt(k)),
        b1=np.zeros(hf),
        w2=_normal(rng, (hf, c), 1.0 / np.sqrt(hf)),
        b2=np.zeros(c),
    )


def _zero_grads(p) -> dict[str, np.ndarray]:
    """name -> zero array mirroring every leaf array of a params dataclass."""
    out = {}

    def walk(prefix, obj):
        for name, val in vars(obj).items():
            if isinstance(val, np.ndarray):
                out[f"{prefix}{name}"] = np.zeros_like(val)
            elif val is not None and hasattr(val, "__dict__"):
                walk(f"{prefix}{name}.", val)

    walk("", p)
    return out


def _apply_step(p, grads: dict[str, np.ndarray], lr: float) -> None:
    def walk(prefix, obj):
        for name, val in vars(obj).items():
            if isinstance(val, np.ndarray):
                val -= lr * grads[f"{prefix}{name}"]
            elif val is not None and hasattr(val, "__dict__"):
                walk(f"{prefix}{name}.", val)

    walk("", p)


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------


def _text_forward(tokens: list[int], p: TextEncoderParams):
    if not tokens:
        raise InputError("cannot encode an empty token list")
    vocab = p.embed.shape[0]
    for t in tokens:
        if not 0 <= t < vocab:
            raise InputError(f"token id {t} outside vocabulary of size {vocab}")
    mean = p.embed[tokens].mean(axis=0)
    emb = mean @ p.w + p.b
    return emb, {"kind": "text", "tokens": tokens, "mean": mean}


def _text_backward(cache, demb: np.ndarray, p: TextEncoderParams, grads) -> None:
    grads["text.w"] += np.outer(cache["mean"], demb)
    grads["text.b"] += demb
    dmean = p.w @ demb
    share = dmean / len(cache["tokens"])
    for t in cache["tokens"]:
        grads["text.embed"][t] += share


def _image_forward(x: np.ndarray, p: ImageEncoderParams):
    if x.ndim != 1 or x.size != p.w1.shape[0]:
        raise ShapeError(f"image encoder expects {p.w1.shape[0]} values, got shape {x.shape}")
    a1 = x @ p.w1 + p.b1
    t1 = np.tanh(a1)
    emb = t1 @ p.w2 + p.b2
    return emb, {"kind": "image", "x": x, "t1": t1}


def _image_backward(cache, demb: np.ndarray, p: ImageEncoderParams, grads) -> None:
    grads["image.w2"] += np.outer(cache["t1"], demb)
    grads["image.b2"] += demb
    da1 = (p.w2 @ demb) * (1.0 - cache["t1"] ** 2)
    grads["image.w1"] += np.outer(cache["x"], da1)
    grads["image.b1"] += da1


def _dense_text_forward(v: np.ndarray, p: DenseTextParams):
    if v.ndim != 1 or v.size != p.w.shape[0]:
        raise ShapeError(f"dense text branch expects {p.w.shape[0]} values, got shape {v.shape}")
    return v @ p.w + p.b, {"kind": "dense_text", "v": v}


def _dense_text_backward(cache, demb: np.ndarray, p: DenseTextParams, grads) -> None:
    grads["text_dense.w"] += np.outer(cache["v"], demb)
    grads["text_dense.b"] += demb


def encode_text(tokens: list[int], params: EncoderParams) -> Tensor:
    """Mean of the token embeddings pushed through the affine layer."""
    emb, _ = _text_forward(list(tokens), params.text)
    return Tensor.from_array(emb)


def encode_image(image: Tensor, params: EncoderParams) -> Tensor:
    """affine -> tanh -> affine over a flat pixel vector."""
    emb, _ = _image_forward(image.data, params.image)
    return Tensor.from_array(emb)


# ---------------------------------------------------------------------------
# Triplet loss and mining
# ---------------------------------------------------------------------------


def _cos_parts(u: np.ndarray, v: np.ndarray):
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise DomainError("zero-norm embedding in triplet")
    cos = float(u @ v) / (nu * nv)
    return cos, nu, nv


def _dcos(u, v, cos, nu, nv):
    """Gradients of cos(u, v) w.r.t. u and v."""
    du = v / (nu * nv) - cos * u / (nu * nu)
    dv = u / (nu * nv) - cos * v / (nv * nv)
    return du, dv


def _triplet_term_grads(a, p, n, cfg: TripletConfig):
    cos_ap, na, np_ = _cos_parts(a, p)
    cos_an, _, nn = _cos_parts(a, n)
    if cfg.use_similarity:
        gap = cos_ap - cos_an + cfg.c
        sign = 1.0
    else:
        gap = (1.0 - cos_ap) - (1.0 - cos_an) + cfg.c
        sign = -1.0
    loss = max(gap, cfg.m)
    da = np.zeros_like(a)
    dp = np.zeros_like(p)
    dn = np.zeros_like(n)
    if gap > cfg.m:
        dap_a, dap_p = _dcos(a, p, cos_ap, na, np_)
        dan_a, dan_n = _dcos(a, n, cos_an, na, nn)
        da = sign * (dap_a - dan_a)
        dp = sign * dap_p
        dn = -sign * dan_n
    return loss, da, dp, dn


def triplet_term(a: Tensor, p: Tensor, n: Tensor, cfg: TripletConfig) -> float:
    """max{ cosdist(a,p) - cosdist(a,n) + c, m } for one triplet."""
    loss, *_ = _triplet_term_grads(a.data, p.data, n.data, cfg)
    return loss


def _as_vector(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64).reshape(-1)


def mine_hard_negatives(anchor, candidates, anchor_label: int) -> int:
    """Index of the closest (smallest cosine distance) differently labeled
    candidate; ties break toward the lowest index."""
    a = _as_vector(anchor)
    best_idx = -1
    best = np.inf
    for i, (emb, label) in enumerate(candidates):
        if label == anchor_label:
            continue
        cos, _, _ = _cos_parts(a, _as_vector(emb))
        dist = 1.0 - cos
        if dist < best:
            best = dist
            best_idx = i
    if best_idx < 0:
        raise InputError("no candidate with a different label")
    return best_idx


@dataclass
class EncodedItem:
    """One encoded modality of one record, with its backward cache."""

    modality: str  # "text" | "image" | "dense_text"
    label: int
    embedding: np.ndarray
    cache: dict | None = field(default=None, repr=False)


@dataclass
class TripletBatch:
    anchors: list[EncodedItem]
    positives: list[EncodedItem]
    negatives: list[EncodedItem]

    def __post_init__(self):
        if not len(self.anchors) == len(self.positives) == len(self.negatives):
            raise InputError("anchor/positive/negative lists must have equal length")
        for a, p, n in zip(self.anchors, self.positives, self.negatives):
            if a.label != p.label or a.label == n.label:
                raise InputError("triplet labels must satisfy a == p != n")


_FAMILIES = {
    ("text", "text", "text"): "tt",
    ("text", "image", "image"): "ti",
    ("image", "text", "text"): "it",
}


def combined_triplet_loss(
    batch: TripletBatch, cfg: TripletConfig, params: EncoderParams | None = None
) -> tuple[float, dict[str, np.ndarray]]:
    """Weighted sum over the batch of the three triplet families.

    The text-only family is weighted by alpha; text-anchor/image-pair and
    image-anchor/text-pair families enter with weight 1. All three families
    must be present. With `params`, the summed loss comes back together with
    its gradient w.r.t. every encoder parameter (named arrays), accumulated
    through each item's forward cache; without, the gradient dict is empty.
    """
    seen: set[str] = set()
    triplets = []
    for a, p, n in zip(batch.anchors, batch.positives, batch.negatives):
        fam = _FAMILIES.get((a.modality, p.modality, n.modality))
        if fam is None:
            raise InputError(
                f"unknown triplet family ({a.modality}, {p.modality}, {n.modality})"
            )
        seen.add(fam)
        triplets.append((fam, a, p, n))
    missing = {"tt", "ti", "it"} - seen
    if missing:
        raise InputError(f"batch is missing triplet families: {sorted(missing)}")

    total = 0.0
    demb: dict[int, np.ndarray] = {}
    items: dict[int, EncodedItem] = {}

    def bump(item: EncodedItem, g: np.ndarray, w: float):
        key = id(item)
        if key not in demb:
            demb[key] = np.zeros_like(item.embedding)
            items[key] = item
        demb[key] += w * g

    for fam, a, p, n in triplets:
        w = cfg.alpha if fam == "tt" else 1.0
        loss, da, dp, dn = _triplet_term_grads(a.embedding, p.embedding, n.embedding, cfg)
        total += w * loss
        for item, g in ((a, da), (p, dp), (n, dn)):
            bump(item, g, w)
    if params is None:
        return total, {}
    grads = _zero_grads(params)
    for key, g in demb.items():
        cache = items[key].cache
        if cache is None:
            continue
        if cache["kind"] == "text":
            _text_backward(cache, g, params.text, grads)
        elif cache["kind"] == "image":
            _image_backward(cache, g, params.image, grads)
        else:
            _dense_text_backward(cache, g, params.text_dense, grads)
    return total, grads


# ---------------------------------------------------------------------------
# Fusion and prediction
# ---------------------------------------------------------------------------


def _fusion_forward(emb: np.ndarray, m: FusionParams):
    if emb.ndim != 1 or emb.size != m.w1.shape[0]:
        raise ShapeError(f"fusion head expects {m.w1.shape[0]} values, got shape {emb.shape}")
    a1 = emb @ m.w1 + m.b1
    r = np.maximum(a1, 0.0)
    logits = r @ m.w2 + m.b2
    return logits, {"emb": emb, "a1": a1, "r": r}


def _fusion_backward(cache, dlogits: np.ndarray, m: FusionParams, grads, prefix="fusion."):
    grads[prefix + "w2"] += np.outer(cache["r"], dlogits)
    grads[prefix + "b2"] += dlogits
    da1 = (m.w2 @ dlogits) * (cache["a1"] > 0.0)
    grads[prefix + "w1"] += np.outer(cache["emb"], da1)
    grads[prefix + "b1"] += da1
    return m.w1 @ da1  # gradient w.r.t. the embedding


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def fuse_predict(embedding: Tensor, m: FusionParams) -> Tensor:
    """Class probabilities: softmax of the two-layer fusion head."""
    logits, _ = _fusion_forward(embedding.data, m)
    return Tensor.from_array(_softmax(logits))


def _record_embedding(record, enc: EncoderParams):
    """Mean of the present modalities' embeddings plus the backward caches."""
    embs = []
    caches = []
    if getattr(record, "tokens", None) is not None:
        e, cache = _text_forward(record.tokens, enc.text)
        embs.append(e)
        caches.append(cache)
    if getattr(record, "text_vec", None) is not None:
        if enc.text_dense is None:
            raise InputError("record has a dense text feature but no dense branch")
        e, cache = _dense_text_forward(np.asarray(record.text_vec, np.float64), enc.text_dense)
        embs.append(e)
        caches.append(cache)
    if getattr(record, "image", None) is not None:
        e, cache = _image_forward(np.asarray(record.image, np.float64).reshape(-1), enc.image)
        embs.append(e)
        caches.append(cache)
    if not embs:
        raise InputError("record has no modality to encode")
    emb = embs[0] if len(embs) == 1 else np.mean(embs, axis=0)
    return emb, caches


def predict_record(record, params: EncoderParams, fusion: FusionParams) -> Tensor:
    """Class probabilities for a record with any subset of modalities."""
    emb, _ = _record_embedding(record, params)
    return fuse_predict(Tensor.from_array(emb), fusion)


# ---------------------------------------------------------------------------
# Pretraining (triplet stage)
# ---------------------------------------------------------------------------


def build_triplet_batch(records, params: EncoderParams) -> TripletBatch | None:
    """Encode a batch and assemble the three mined triplet families.

    Positives are the next same-class item in batch order; negatives are the
    hardest (closest) differently labeled in-batch item of the required
    modality. Returns None when the batch cannot produce all three families.
    """
    text_items: list[EncodedItem] = []
    image_items: list[EncodedItem] = []
    for r in records:
        if r.tokens is not None:
            e, cache = _text_forward(r.tokens, params.text)
            text_items.append(EncodedItem("text", r.label, e, cache))
        if r.image is not None:
            e, cache = _image_forward(
                np.asarray(r.image, np.float64).reshape(-1), params.image
            )
            image_items.append(EncodedItem("image", r.label, e, cache))

    def next_positive(pool: list[EncodedItem], i: int):
        n = len(pool)
        for off in range(1, n):
            cand = pool[(i + off) % n]
            if cand.label == pool[i].label:
                return cand
        return None

    def hardest_negative(anchor: EncodedItem, pool: list[EncodedItem]):
        cands = [(it.embedding, it.label) for it in pool]
        try:
            return pool[mine_hard_negatives(anchor.embedding, cands, anchor.label)]
        except InputError:
            return None

    anchors, positives, negatives = [], [], []
    for i, a in enumerate(text_items):  # (a_t, p_t, n_t)
        p = next_positive(text_items, i)
        n = hardest_negative(a, text_items)
        if p is not None and n is not None:
            anchors.append(a)
            positives.append(p)
            negatives.append(n)
    for a in text_items:  # (a_t, p_i, n_i)
        p = next((it for it in image_items if it.label == a.label), None)
        n = hardest_negative(a, image_items)
        if p is not None and n is not None:
            anchors.append(a)
            positives.append(p)
            negatives.append(n)
    for a in image_items:  # (a_i, p_t, n_t)
        p = next((it for it in text_items if it.label == a.label), None)
        n = hardest_negative(a, text_items)
        if p is not None and n is not None:
            anchors.append(a)
            positives.append(p)
            negatives.append(n)
    fams = {
        _FAMILIES[(a.modality, p.modality, n.modality)]
        for a, p, n in zip(anchors, positives, negatives)
    }
    if fams != {"tt", "ti", "it"}:
        return None
    return TripletBatch(anchors, positives, negatives)


def pretrain(
    records,
    dims: ModelDims,
    cfg: TripletConfig,
    epochs: int,
    lr: float,
    rng: RngStream,
    batch_size: int = 16,
):
    """Gradient descent on the combined triplet loss with in-batch mining.

    Returns (EncoderParams, per-epoch mean triplet loss). The gradient of
    each batch is normalized by its triplet count so the step size does not
    depend on how many triplets the miner produced.
    """
    labels = {r.label for r in records}
    if len(labels) < 2:
        raise InputError("pretraining needs at least two classes")
    if not any(r.tokens is not None for r in records) or not any(
        r.image is not None for r in records
    ):
        raise InputError("pretraining needs both modalities represented")
    params = init_encoder_params(dims, rng.spawn(1))
    order_rng = rng.spawn(2)
    trace: list[float] = []
    for _ in range(epochs):
        order = order_rng.permutation(len(records))
        epoch_loss = 0.0
        epoch_triplets = 0
        for start in range(0, len(records), batch_size):
            batch = [records[i] for i in order[start : start + batch_size]]
            tb = build_triplet_batch(batch, params)
            if tb is None:
                continue
            loss, grads = combined_triplet_loss(tb, cfg, params)
            count = len(tb.anchors)
            epoch_loss += loss
            epoch_triplets += count
            if lr != 0.0:
                _apply_step(params, {k: v / count for k, v in grads.items()}, lr)
        trace.append(epoch_loss / max(epoch_triplets, 1))
    return params, trace


# ---------------------------------------------------------------------------
# Federated-model adapters (shared protocol: init / loss_and_grads / evaluate)
# ---------------------------------------------------------------------------


def _params_to_model(p) -> ModelParams:
    out = {}

    def walk(prefix, obj):
        for name, val in vars(obj).items():
            if isinstance(val, np.ndarray):
                out[f"{prefix}{name}"] = Tensor.from_array(val)
            elif val is not None and hasattr(val, "__dict__"):
                walk(f"{prefix}{name}.", val)

    walk("", p)
    return ModelParams(out)


class MultimodalClassifier:
    """Encoders + fusion head trained with cross-entropy, one protocol object.

    Frozen-start pretrained encoders can be injected via `pretrained`; when a
    record misses a modality its encoder simply receives no gradient.
    """

    def __init__(self, dims: ModelDims, pretrained: EncoderParams | None = None):
        self.dims = dims
        self._pretrained = pretrained

    def init_params(self, rng: RngStream) -> ModelParams:
        enc = self._pretrained or init_encoder_params(dims=self.dims, rng=rng.spawn(1))
        fus = init_fusion_params(self.dims, rng.spawn(2))
        merged = dict(_params_to_model(enc).items())
        merged |= {f"fusion.{k}": Tensor.from_array(v) for k, v in vars(fus).items()}
        return ModelParams(merged)

    def _unpack(self, params: ModelParams):
        get = lambda n: params[n].data  # noqa: E731
        text = TextEncoderParams(
            embed=get("text.embed").reshape(self.dims.vocab, self.dims.text_hidden),
            w=get("text.w").reshape(self.dims.text_hidden, self.dims.embed_dim),
            b=get("text.b"),
        )
        image = ImageEncoderParams(
            w1=get("image.w1").reshape(self.dims.image_dim, self.dims.image_hidden),
            b1=get("image.b1"),
            w2=get("image.w2").reshape(self.dims.image_hidden, self.dims.embed_dim),
            b2=get("image.b2"),
        )
        dense = None
        if "text_dense.w" in params:
            dense = DenseTextParams(
                w=get("text_dense.w").reshape(self.dims.text_dense_dim, self.dims.embed_dim),
                b=get("text_dense.b"),
            )
        fus = FusionParams(
            w1=get("fusion.w1").reshape(self.dims.embed_dim, self.dims.fusion_hidden),
            b1=get("fusion.b1"),
            w2=get("fusion.w2").reshape(self.dims.fusion_hidden, self.dims.n_classes),
            b2=get("fusion.b2"),
        )
        return EncoderParams(text=text, image=image, text_dense=dense), fus

    def loss_and_grads(self, params: ModelParams, batch) -> tuple[float, ModelParams]:
        enc, fus = self._unpack(params)
        grads = _zero_grads(enc)
        grads |= {f"fusion.{k}": np.zeros_like(v) for k, v in vars(fus).items()}
        total = 0.0
        scale = 1.0 / len(batch)
        for rec in batch:
            emb, caches = _record_embedding(rec, enc)
            logits, fcache = _fusion_forward(emb, fus)
            probs = _softmax(logits)
            total += -float(np.log(max(probs[rec.label], 1e-300)))
            dlogits = probs.copy()
            dlogits[rec.label] -= 1.0
            dlogits *= scale
            dembed = _fusion_backward(fcache, dlogits, fus, grads)
            share = dembed / len(caches)
            for cache in caches:
                if cache["kind"] == "text":
                    _text_backward(cache, share, enc.text, grads)
                elif cache["kind"] == "image":
                    _image_backward(cache, share, enc.image, grads)
                else:
                    _dense_text_backward(cache, share, enc.text_dense, grads)
        gp = ModelParams(
            {
                name: Tensor(params[name].shape, grads[name].reshape(-1))
                for name in params.names()
            }
        )
        return total * scale, gp

    def evaluate(self, params: ModelParams, records) -> tuple[float, float]:
        enc, fus = self._unpack(params)
        correct = 0
        loss = 0.0
        for rec in records:
            emb, _ = _record_embedding(rec, enc)
            logits, _ = _fusion_forward(emb, fus)
            probs = _softmax(logits)
            loss += -float(np.log(max(probs[rec.label], 1e-300)))
            correct += int(int(np.argmax(probs)) == rec.label)
        n = max(len(records), 1)
        return correct / n, loss / n

    def predict(self, params: ModelParams, record) -> int:
        enc, fus = self._unpack(params)
        emb, _ = _record_embedding(record, enc)
        logits, _ = _fusion_forward(emb, fus)
        return int(np.argmax(logits))


class MlpClassifier:
    """Dense-input MLP (affine-relu-affine) with vectorized batch training."""

    def __init__(self, input_dim: int, hidden: int, n_classes: int):
        self.input_dim = input_dim
        self.hidden = hidden
        self.n_classes = n_classes

    def init_params(self, rng: RngStream) -> ModelParams:
        d, h, c = self.input_dim, self.hidden, self.n_classes
        return ModelParams(
            {
                "w1": Tensor.from_array(_normal(rng, (d, h), 1.0 / np.sqrt(d))),
                "b1": Tensor.zeros((h,)),
                "w2": Tensor.from_array(_normal(rng, (h, c), 1.0 / np.sqrt(h))),
                "b2": Tensor.zeros((c,)),
            }
        )

    @staticmethod
    def _features(records) -> np.ndarray:
        rows = []
        for r in records:
            if r.image is not None:
                rows.append(np.asarray(r.image, np.float64).reshape(-1))
            elif r.text_vec is not None:
                rows.append(np.asarray(r.text_vec, np.float64).reshape(-1))
            else:
                raise InputError("record has no dense feature for the MLP")
        return np.stack(rows)

    def _forward(self, params: ModelParams, x: np.ndarray):
        w1 = params["w1"].data.reshape(self.input_dim, self.hidden)
        w2 = params["w2"].data.reshape(self.hidden, self.n_classes)
        a1 = x @ w1 + params["b1"].data
        r = np.maximum(a1, 0.0)
        logits = r @ w2 + params["b2"].data
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs = e / e.sum(axis=1, keepdims=True)
        return probs, a1, r, w2

    def loss_and_grads(self, params: ModelParams, batch) -> tuple[float, ModelParams]:
        x = self._features(batch)
        y = np.array([r.label for r in batch])
        n = len(batch)
        probs, a1, r, w2 = self._forward(params, x)
        loss = -float(np.mean(np.log(np.maximum(probs[np.arange(n), y], 1e-300))))
        dlogits = probs.copy()
        dlogits[np.arange(n), y] -= 1.0
        dlogits /= n
        gw2 = r.T @ dlogits
        gb2 = dlogits.sum(axis=0)
        dr = dlogits @ w2.T
        da1 = dr * (a1 > 0.0)
        gw1 = x.T @ da1
        gb1 = da1.sum(axis=0)
        return loss, ModelParams(
            {
                "w1": Tensor.from_array(gw1),
                "b1": Tensor.from_array(gb1),
                "w2": Tensor.from_array(gw2),
                "b2": Tensor.from_array(gb2),
            }
        )

    def evaluate(self, params: ModelParams, records) -> tuple[float, float]:
        if not records:
            return 0.0, 0.0
        x = self._features(records)
        y = np.array([r.label for r in records])
        probs, *_ = self._forward(params, x)
        loss = -float(np.mean(np.log(np.maximum(probs[np.arange(len(y)), y], 1e-300))))
        acc = float(np.mean(np.argmax(probs, axis=1) == y))
        return acc, loss

    def predict(self, params: ModelParams, record) -> int:
        probs, *_ = self._forward(params, self._features([record]))
        return int(np.argmax(probs[0]))
