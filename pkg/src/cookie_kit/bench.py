"""Inference-cost benchmark: double-stream vs one-stream retrieval.

Double-stream retrieval embeds each of the n images and n captions once
(2n encoder calls) and scores all pairs with one cosine matrix. The
one-stream simulation runs a joint forward over the concatenated
image+text token sequence for every (image, caption) pair — n^2 calls —
through the *same* transformer stack, so the measured gap reflects the
interaction pattern rather than model size.

Timing uses a tape-free numpy forward (no gradient bookkeeping), excludes
data preparation, discards a warm-up run, and reports the median of the
remaining repeats.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import BenchmarkError, ContractError

# guard against accidentally requesting a pair-chunk that will not fit in RAM
MAX_SIZE = 4096
PAIR_CHUNK = 256


@dataclass
class BenchConfig:
    d_model: int = 32
    n_heads: int = 2
    d_ff: int = 32
    n_layers: int = 2
    patch_size: int = 8
    image_size: int = 32
    channels: int = 3
    vocab_size: int = 128
    text_len: int = 12

    @property
    def n_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.patch_size ** 2 * self.channels


@dataclass
class BenchModel:
    """Plain-numpy weights for the shared stack plus both token embedders."""

    config: BenchConfig
    weights: dict

    # instrumented call counters, reset per benchmark run
    calls: dict = field(default_factory=lambda: {"encode": 0, "joint": 0})


def build_model(config: BenchConfig, seed) -> BenchModel:
    rng = np.random.default_rng(seed)
    d, f = config.d_model, config.d_ff

    def uni(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    w = {"patch_proj": uni(config.patch_dim, (config.patch_dim, d)),
         "tok_emb": uni(d, (config.vocab_size, d)),
         "pos": uni(d, (config.n_patches + config.text_len, d))}
    for i in range(config.n_layers):
        for name, shape, fan in (("wq", (d, d), d), ("wk", (d, d), d), ("wv", (d, d), d),
                                 ("wo", (d, d), d), ("w1", (d, f), d), ("w2", (f, d), f)):
            w[f"l{i}.{name}"] = uni(fan, shape)
        w[f"l{i}.ln1.g"] = np.ones(d, np.float32)
        w[f"l{i}.ln1.b"] = np.zeros(d, np.float32)
        w[f"l{i}.ln2.g"] = np.ones(d, np.float32)
        w[f"l{i}.ln2.b"] = np.zeros(d, np.float32)
    return BenchModel(config, w)


def _layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return g * (x - mu) / np.sqrt(var + eps) + b


def _forward_stack(model: BenchModel, x):
    """Pre-norm transformer forward over [B, k, d] token batches."""
    cfg, w = model.config, model.weights
    b, k, d = x.shape
    h = cfg.n_heads
    dh = d // h
    for i in range(cfg.n_layers):
        y = _layer_norm(x, w[f"l{i}.ln1.g"], w[f"l{i}.ln1.b"])
        q = (y @ w[f"l{i}.wq"]).reshape(b, k, h, dh).transpose(0, 2, 1, 3)
        key = (y @ w[f"l{i}.wk"]).reshape(b, k, h, dh).transpose(0, 2, 1, 3)
        v = (y @ w[f"l{i}.wv"]).reshape(b, k, h, dh).transpose(0, 2, 1, 3)
        scores = q @ key.transpose(0, 1, 3, 2) / np.sqrt(dh)
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        att = (e / e.sum(axis=-1, keepdims=True)) @ v
        x = x + att.transpose(0, 2, 1, 3).reshape(b, k, d) @ w[f"l{i}.wo"]
        y = _layer_norm(x, w[f"l{i}.ln2.g"], w[f"l{i}.ln2.b"])
        x = x + np.maximum(y @ w[f"l{i}.w1"], 0.0) @ w[f"l{i}.w2"]
    return x


def _image_tokens(model, images):
    cfg = model.config
    p, s = cfg.patch_size, cfg.image_size
    n = s // p
    b = images.shape[0]
    patches = (images.reshape(b, n, p, n, p, cfg.channels)
               .transpose(0, 1, 3, 2, 4, 5).reshape(b, n * n, cfg.patch_dim))
    return patches @ model.weights["patch_proj"] + model.weights["pos"][:n * n]

def _text_tokens(model, token_ids):
    k = token_ids.shape[1]
    offset = model.config.n_patches
    return model.weights["tok_emb"][token_ids] + model.weights["pos"][offset:offset + k]


def encode_batch(model, tokens):
    """Single-stream encoding of already-embedded tokens; one call per row."""
    model.calls["encode"] += tokens.shape[0]
    return _forward_stack(model, tokens).mean(axis=1)


def joint_forward(model, image_tokens, text_tokens):
    """Joint pair scoring: concatenated sequence per (image, text) pair.
    Counts one call per pair row."""
    x = np.concatenate([image_tokens, text_tokens], axis=1)
    model.calls["joint"] += x.shape[0]
    return _forward_stack(model, x).mean(axis=(1, 2))


def make_inputs(config: BenchConfig, n, seed):
    rng = np.random.default_rng(seed)
    images = rng.uniform(size=(n, config.image_size, config.image_size,
                               config.channels)).astype(np.float32)
    token_ids = rng.integers(2, config.vocab_size, size=(n, config.text_len))
    return images, token_ids


def double_stream_pass(model, images, token_ids):
    img_emb = encode_batch(model, _image_tokens(model, images))
    txt_emb = encode_batch(model, _text_tokens(model, token_ids))
    img_emb = img_emb / np.linalg.norm(img_emb, axis=1, keepdims=True)
    txt_emb = txt_emb / np.linalg.norm(txt_emb, axis=1, keepdims=True)
    return img_emb @ txt_emb.T


def one_stream_pass(model, images, token_ids, chunk=PAIR_CHUNK):
    n = images.shape[0]
    img_tok = _image_tokens(model, images)
    txt_tok = _text_tokens(model, token_ids)
    sims = np.empty((n, n), dtype=np.float32)
    for i in range(n):
        row_img = np.broadcast_to(img_tok[i], (n,) + img_tok.shape[1:])
        for start in range(0, n, chunk):
            stop = min(start + chunk, n)
            sims[i, start:stop] = joint_forward(
                model, np.ascontiguousarray(row_img[start:stop]), txt_tok[start:stop])
    return sims


@dataclass
class TimingRecord:
    mode: str
    sizes: list
    median_ms: list
    min_ms: list
    max_ms: list
    calls: list

    def rows(self):
        return [(self.mode, n, med, lo, hi, c) for n, med, lo, hi, c in
                zip(self.sizes, self.median_ms, self.min_ms, self.max_ms, self.calls)]


MODES = {"double-stream": double_stream_pass, "one-stream-sim": one_stream_pass}


def bench_retrieval(mode, sizes, repeats, config=None, seed=0) -> TimingRecord:
    """Time one retrieval pass per gallery size; median over ``repeats``
    after one discarded warm-up run."""
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}; expected one of {sorted(MODES)}")
    sizes = list(sizes)
    if sizes != sorted(sizes) or len(sizes) != len(set(sizes)):
        raise ContractError(f"sizes must be strictly ascending, got {sizes}")
    if any(s < 2 for s in sizes):
        raise ContractError(f"sizes must be >= 2, got {sizes}")
    if repeats < 5:
        raise ContractError(f"repeats must be >= 5, got {repeats}")
    if max(sizes) > MAX_SIZE:
        raise BenchmarkError(
            f"largest size {max(sizes)} exceeds the memory cap; keep n <= {MAX_SIZE}")
    config = config or BenchConfig()
    passes = MODES[mode]
    model = build_model(config, seed)
    medians, lows, highs, counts = [], [], [], []
    for n in sizes:
        images, token_ids = make_inputs(config, n, seed)
        model.calls = {"encode": 0, "joint": 0}
        passes(model, images, token_ids)  # warm-up run, not timed
        per_pass = model.calls["encode" if mode == "double-stream" else "joint"]
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            passes(model, images, token_ids)
            times.append((time.perf_counter() - t0) * 1e3)
        model.calls = {"encode": 0, "joint": 0}
        medians.append(float(np.median(times)))
        lows.append(float(np.min(times)))
        highs.append(float(np.max(times)))
        counts.append(int(per_pass))
    return TimingRecord(mode, sizes, medians, lows, highs, counts)


def fit_scaling_exponent(record: TimingRecord):
    """Least-squares slope of log(median time) vs log(n), with stderr."""
    sizes = np.asarray(record.sizes, dtype=np.float64)
    times = np.asarray(record.median_ms, dtype=np.float64)
    if len(sizes) < 4 or sizes.max() / sizes.min() < 8:
        raise ContractError("need >= 4 sizes spanning at least an 8x range")
    if np.any(times <= 0):
        raise ContractError("non-positive times cannot be fitted on a log scale")
    coeffs, cov = np.polyfit(np.log(sizes), np.log(times), 1, cov=True)
    return float(coeffs[0]), float(np.sqrt(cov[0, 0]))


def write_csv(records, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["mode", "n", "median_ms", "min_ms", "max_ms", "calls"])
        for record in records:
            writer.writerows(record.rows())


def write_summary(records, path):
    summary = {}
    for record in records:
        slope, stderr = fit_scaling_exponent(record)
        summary[record.mode] = {
            "sizes": record.sizes, "median_ms": record.median_ms,
            "calls": record.calls, "slope": slope, "slope_stderr": stderr}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
    return summary
