"""Dual-stream encoder network.

The visual path is patchify + linear -> affine projection with learned
position embeddings -> a text-aligned transformer layer (plus a visual
semantic tag) -> the shared transformer encoder -> pooling. The textual
path is embedding lookup + learned positions + one transformer layer ->
affine projection with a textual semantic tag -> the same shared
transformer encoder -> pooling. Both paths read the shared encoder weights
from one parameter set, so a single optimizer step updates both.

All forward functions are batched: images are [B, H, W, 3], token ids are
[B, m], and every transformer input is [B, k, D].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DataError, DimensionError

# encode-call instrumentation, used by eval/bench to verify the
# double-stream access pattern
call_counts = {"encode_image": 0, "encode_text": 0}


def reset_call_counts():
    call_counts["encode_image"] = 0
    call_counts["encode_text"] = 0


@dataclass
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    d_visual: int = 48      # visual backbone output width
    d_text: int = 32        # text backbone output width
    d_model: int = 64       # common subspace width
    n_heads: int = 4
    d_ff: int = 64
    tav_layers: int = 1
    ws_layers: int = 2
    vocab_size: int = 128
    max_words: int = 12
    text_heads: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.d_text % self.text_heads != 0:
            raise ConfigError(f"d_text {self.d_text} not divisible by {self.text_heads} heads")

    @property
    def n_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self):
        return dict(self.__dict__)


_LAYER_MATS = ("wq", "wk", "wv", "wo", "w1", "w2")


def _init_layer(params, prefix, d, d_ff, rng, dtype):
    def uni(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    for name in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.{name}"] = T.Parameter(f"{prefix}.{name}", uni(d, (d, d)))
    for name in ("bq", "bk", "bv", "bo"):
        params[f"{prefix}.{name}"] = T.Parameter(f"{prefix}.{name}", np.zeros(d, dtype))
    params[f"{prefix}.w1"] = T.Parameter(f"{prefix}.w1", uni(d, (d, d_ff)))
    params[f"{prefix}.b1"] = T.Parameter(f"{prefix}.b1", np.zeros(d_ff, dtype))
    params[f"{prefix}.w2"] = T.Parameter(f"{prefix}.w2", uni(d_ff, (d_ff, d)))
    params[f"{prefix}.b2"] = T.Parameter(f"{prefix}.b2", np.zeros(d, dtype))
    for ln in ("ln1", "ln2"):
        params[f"{prefix}.{ln}.g"] = T.Parameter(f"{prefix}.{ln}.g", np.ones(d, dtype))
        params[f"{prefix}.{ln}.b"] = T.Parameter(f"{prefix}.{ln}.b", np.zeros(d, dtype))


@dataclass
class EncoderParams:
    """All learnable tensors, keyed by dotted name.

    The shared encoder layers live under the ``ws.`` prefix; both modality
    paths read those same Parameter objects.
    """

    config: EncoderConfig
    params: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.params[name]

    def items(self):
        return self.params.items()

    def as_dict(self):
        return self.params

    def ws_parameters(self):
        return {k: v for k, v in self.params.items() if k.startswith("ws.")}

    def astype(self, dtype):
        out = {k: T.Parameter(k, p.data.astype(dtype)) for k, p in self.params.items()}
        return EncoderParams(self.config, out)


def init_params(config: EncoderConfig, seed: int, dtype=np.float32) -> EncoderParams:
    rng = np.random.default_rng(seed)
    p = {}

    def uni(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    d = config.d_model
    p["vb.w"] = T.Parameter("vb.w", uni(config.patch_dim, (config.patch_dim, config.d_visual)))
    p["vb.b"] = T.Parameter("vb.b", np.zeros(config.d_visual, dtype))
    p["tb.emb"] = T.Parameter("tb.emb", uni(config.d_text, (config.vocab_size, config.d_text)))
    p["tb.pos"] = T.Parameter("tb.pos", np.zeros((config.max_words, config.d_text), dtype))
    _init_layer(p, "tb.l0", config.d_text, config.d_text, rng, dtype)
    p["proj_v.w"] = T.Parameter("proj_v.w", uni(config.d_visual, (config.d_visual, d)))
    p["proj_v.b"] = T.Parameter("proj_v.b", np.zeros(d, dtype))
    p["pos_v"] = T.Parameter("pos_v", np.zeros((config.n_patches, d), dtype))
    p["sem_v"] = T.Parameter("sem_v", np.zeros(d, dtype))
    p["proj_t.w"] = T.Parameter("proj_t.w", uni(config.d_text, (config.d_text, d)))
    p["proj_t.b"] = T.Parameter("proj_t.b", np.zeros(d, dtype))
    p["sem_t"] = T.Parameter("sem_t", np.zeros(d, dtype))
    for i in range(config.tav_layers):
        _init_layer(p, f"tav.l{i}", d, config.d_ff, rng, dtype)
    for i in range(config.ws_layers):
        _init_layer(p, f"ws.l{i}", d, config.d_ff, rng, dtype)
    return EncoderParams(config, p)


# -- transformer layer --------------------------------------------------

def transformer_layer(x, params, prefix, n_heads, mask=None):
    """Pre-norm transformer layer: x + MHA(LN(x)), then x + FFN(LN(x)).

    ``mask`` is an optional [B, k] 0/1 array; masked positions neither
    attend nor are attended to.
    """
    B, k, d = x.shape
    dh = d // n_heads
    p = params.as_dict() if isinstance(params, EncoderParams) else params

    h = T.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    q = T.matmul(h, p[f"{prefix}.wq"]) + p[f"{prefix}.bq"]
    kk = T.matmul(h, p[f"{prefix}.wk"]) + p[f"{prefix}.bk"]
    v = T.matmul(h, p[f"{prefix}.wv"]) + p[f"{prefix}.bv"]

    def split_heads(t):
        return T.transpose(T.reshape(t, (B, k, n_heads, dh)), (0, 2, 1, 3))

    q, kk, v = split_heads(q), split_heads(kk), split_heads(v)
    scores = T.matmul(q, T.transpose(kk, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    if mask is not None:
        key_mask = np.asarray(mask).reshape(B, 1, 1, k)
        weights = T.masked_softmax(scores, key_mask, axis=-1)
    else:
        weights = T.softmax(scores, axis=-1)
    ctx = T.attend(weights, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, k, d))
    x = x + (T.matmul(ctx, p[f"{prefix}.wo"]) + p[f"{prefix}.bo"])

    h = T.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    ff = T.matmul(T.relu(T.matmul(h, p[f"{prefix}.w1"]) + p[f"{prefix}.b1"]),
                  p[f"{prefix}.w2"]) + p[f"{prefix}.b2"]
    return x + ff


# -- backbones ----------------------------------------------------------

def patchify(images, config: EncoderConfig):
    """[B, H, W, C] -> [B, n_patches, patch_dim], patches in row-major order."""
    images = np.asarray(images)
    B, H, W, C = images.shape
    if H != config.image_size or W != config.image_size or C != config.channels:
        raise DimensionError(
            f"image shape {(H, W, C)} does not match configured "
            f"{(config.image_size, config.image_size, config.channels)}")
    ps = config.patch_size
    g = H // ps
    x = images.reshape(B, g, ps, g, ps, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, g * g, ps * ps * C)


def toy_visual_backbone(images, params: EncoderParams):
    """Patch features: each non-overlapping patch flattened and linearly
    mapped, so a one-patch change in the image moves exactly one row."""
    patches = patchify(images, params.config)
    x = T.Tensor(patches.astype(params["vb.w"].dtype))
    return T.matmul(x, params["vb.w"]) + params["vb.b"]


def toy_text_backbone(token_ids, pad_mask, params: EncoderParams):
    """Word features: embedding + learned positions + one transformer layer."""
    cfg = params.config
    ids = np.asarray(token_ids)
    mask = np.asarray(pad_mask, dtype=float)
    if ids.ndim != 2 or ids.shape[1] != cfg.max_words:
        raise DimensionError(f"token ids shape {ids.shape} != [B, {cfg.max_words}]")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise DataError(f"token id out of vocabulary (size {cfg.vocab_size}): "
                        f"range [{ids.min()}, {ids.max()}]")
    if (mask.sum(axis=1) == 0).any():
        raise ContractError("every token sequence needs at least one unmasked position")
    x = T.gather_rows(params["tb.emb"], ids) + params["tb.pos"]
    return transformer_layer(x, params, "tb.l0", cfg.text_heads, mask=mask)


# -- projections and encoders ------------------------------------------

def project_visual(v, params: EncoderParams):
    """Row i maps to v_i W + b + p_i (learned position embeddings)."""
    return T.matmul(v, params["proj_v.w"]) + params["proj_v.b"] + params["pos_v"]


def project_textual(t, params: EncoderParams):
    """Row i maps to t_i W + b + s (one semantic tag added to every row)."""
    return T.matmul(t, params["proj_t.w"]) + params["proj_t.b"] + params["sem_t"]


def tav_encode(v_hat, params: EncoderParams):
    """Global-attention alignment layer(s) on the visual path, plus the
    visual semantic tag added to every output row."""
    x = v_hat
    for i in range(params.config.tav_layers):
        x = transformer_layer(x, params, f"tav.l{i}", params.config.n_heads)
    return x + params["sem_v"]


def ws_encode(tokens, pad_mask, params: EncoderParams):
    """Shared transformer stack, applied identically to either modality."""
    if pad_mask is not None:
        m = np.asarray(pad_mask, dtype=float)
        if (m.sum(axis=1) == 0).any():
            raise ContractError("ws_encode: a sample has all positions masked")
    x = tokens
    for i in range(params.config.ws_layers):
        x = transformer_layer(x, params, f"ws.l{i}", params.config.n_heads, mask=pad_mask)
    return x


def pool(tokens, pad_mask, strategy="max"):
    """Reduce [B, k, D] to [B, D] over unmasked rows."""
    B, k, d = tokens.shape
    if pad_mask is None:
        mask = np.ones((B, k), dtype=float)
    else:
        mask = np.asarray(pad_mask, dtype=float)
    counts = mask.sum(axis=1, keepdims=True)
    if (counts == 0).any():
        raise ContractError("pool: a sample has no unmasked rows")
    m3 = mask[:, :, None]
    if strategy == "max":
        neg = (m3 - 1.0) * 1e30
        return T.amax(tokens * T.Tensor(m3.astype(tokens.dtype)) + T.Tensor(neg.astype(tokens.dtype)),
                      axis=1)
    if strategy == "mean":
        total = T.osum(tokens * T.Tensor(m3.astype(tokens.dtype)), axis=1)
        return total * T.Tensor((1.0 / counts).astype(tokens.dtype))
    raise ContractError(f"unknown pooling strategy {strategy!r}")


def encode_images(images, params: EncoderParams, strategy="max"):
    """Full visual pipeline -> [B, D] embeddings in the common subspace."""
    images = np.asarray(images)
    call_counts["encode_image"] += images.shape[0]
    v = toy_visual_backbone(images, params)
    v_hat = project_visual(v, params)
    f_v = tav_encode(v_hat, params)
    out = ws_encode(f_v, None, params)
    return pool(out, None, strategy)


def encode_texts(token_ids, pad_mask, params: EncoderParams, strategy="max"):
    """Full textual pipeline -> [B, D] embeddings in the common subspace."""
    ids = np.asarray(token_ids)
    call_counts["encode_text"] += ids.shape[0]
    t = toy_text_backbone(ids, pad_mask, params)
    f_t = project_textual(t, params)
    out = ws_encode(f_t, pad_mask, params)
    return pool(out, pad_mask, strategy)


def encode_image(image, params, strategy="max"):
    """Single-image convenience wrapper; returns a [D] embedding."""
    return encode_images(np.asarray(image)[None], params, strategy)[0]


def encode_text(token_ids, pad_mask, params, strategy="max"):
    """Single-caption convenience wrapper; returns a [D] embedding."""
    return encode_texts(np.asarray(token_ids)[None], np.asarray(pad_mask)[None], params, strategy)[0]


def ws_token_outputs(images=None, token_ids=None, pad_mask=None, params=None):
    """Per-token outputs of the shared encoder, for attention ranking."""
    if images is not None:
        v = toy_visual_backbone(np.asarray(images), params)
        f = tav_encode(project_visual(v, params), params)
        return ws_encode(f, None, params)
    t = toy_text_backbone(np.asarray(token_ids), pad_mask, params)
    return ws_encode(project_textual(t, params), pad_mask, params)


def zero_layer_weights(params: EncoderParams, prefix):
    """Zero a transformer layer's matrices/biases so it becomes the identity
    (pre-norm residual with zeroed sublayer outputs)."""
    for name in _LAYER_MATS + ("bq", "bk", "bv", "bo", "b1", "b2"):
        params[f"{prefix}.{name}"].data[...] = 0.0
