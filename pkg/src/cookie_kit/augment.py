"""Seeded augmentation pipelines for the two single-modal contrastive views.

Images go through crop -> flip -> noise -> jitter -> gray, in that order,
then a bilinear resize back to the configured output size. Text tokens are
independently selected with ``token_prob`` and the selected ones are
masked, replaced, or deleted. Everything is a pure function of
(input, config, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass
class VisualAugConfig:
    crop_scale_min: float = 0.6
    crop_scale_max: float = 1.0
    flip_prob: float = 0.5
    noise_prob: float = 0.5
    noise_std: float = 0.05
    jitter_prob: float = 0.8
    jitter_gain: tuple = (0.6, 1.4)
    jitter_bias: tuple = (-0.2, 0.2)
    gray_prob: float = 0.2
    output_size: tuple = (32, 32)

    def __post_init__(self):
        for name in ("flip_prob", "noise_prob", "jitter_prob", "gray_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name}={v} outside [0, 1]")
        if not 0.0 < self.crop_scale_min <= self.crop_scale_max <= 1.0:
            raise ContractError(
                f"crop scale range ({self.crop_scale_min}, {self.crop_scale_max}) not within (0, 1]")

    @classmethod
    def identity(cls, output_size=(32, 32)):
        """No-op configuration: all probabilities 0, crop factor forced to 1."""
        return cls(crop_scale_min=1.0, crop_scale_max=1.0, flip_prob=0.0,
                   noise_prob=0.0, jitter_prob=0.0, gray_prob=0.0,
                   output_size=output_size)


@dataclass
class TextAugConfig:
    token_prob: float = 0.2
    mask_frac: float = 0.5
    replace_frac: float = 0.1
    delete_frac: float = 0.4
    mask_token_id: int = 1
    vocab_size: int = 128
    reserved_ids: tuple = (0, 1)  # never sampled as replacement words

    def __post_init__(self):
        if not 0.0 <= self.token_prob <= 1.0:
            raise ContractError(f"token_prob={self.token_prob} outside [0, 1]")
        if abs(self.mask_frac + self.replace_frac + self.delete_frac - 1.0) > 1e-9:
            raise ContractError("mask_frac + replace_frac + delete_frac must equal 1")


def derive_seed(global_seed, sample_id, view_id=0):
    """Stable per-(sample, view) seed so parallel augmentation order does
    not matter."""
    return int(np.random.SeedSequence([int(global_seed), int(sample_id), int(view_id)])
               .generate_state(1)[0])


def _draw_visual_decisions(rng, config: VisualAugConfig, h, w):
    """Sample every stochastic choice of the visual pipeline up front."""
    s1 = rng.uniform(config.crop_scale_min, config.crop_scale_max)
    s2 = rng.uniform(config.crop_scale_min, config.crop_scale_max)
    ch = max(1, int(round(s1 * h)))
    cw = max(1, int(round(s2 * w)))
    d = {
        "crop": (int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)), ch, cw),
        "flip": bool(rng.uniform() < config.flip_prob),
        "noise": bool(rng.uniform() < config.noise_prob),
        "jitter": bool(rng.uniform() < config.jitter_prob),
        "gray": bool(rng.uniform() < config.gray_prob),
    }
    if d["jitter"]:
        d["jitter_gain"] = rng.uniform(*config.jitter_gain, size=3)
        d["jitter_bias"] = rng.uniform(*config.jitter_bias, size=3)
    return d


def _bilinear_resize(img, out_h, out_w):
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def augment_image(image, config: VisualAugConfig, seed):
    """Apply the seeded visual pipeline; output shape is always
    ``config.output_size`` regardless of the sampled crop."""
    rng = np.random.default_rng(seed)
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    d = _draw_visual_decisions(rng, config, h, w)

    oy, ox, ch, cw = d["crop"]
    img = img[oy:oy + ch, ox:ox + cw]
    if d["flip"]:
        img = img[:, ::-1]
    if d["noise"]:
        img = img + rng.normal(0.0, config.noise_std, size=img.shape)
    if d["jitter"]:
        img = img * d["jitter_gain"] + d["jitter_bias"]
    if d["gray"]:
        img = np.repeat(img.mean(axis=2, keepdims=True), 3, axis=2)

    img = np.clip(img, 0.0, 1.0)
    out_h, out_w = config.output_size
    return _bilinear_resize(img, out_h, out_w).astype(np.float32)


_KEEP, _MASK, _REPLACE, _DELETE = 0, 1, 2, 3


def _draw_text_decision(rng, config: TextAugConfig):
    if rng.uniform() >= config.token_prob:
        return _KEEP
    r = rng.uniform()
    if r < config.mask_frac:
        return _MASK
    if r < config.mask_frac + config.replace_frac:
        return _REPLACE
    return _DELETE


def augment_text(tokens, config: TextAugConfig, seed):
    """Apply the seeded token pipeline. Relative order of survivors is
    preserved; at least one token always survives."""
    tokens = list(tokens)
    if not tokens:
        raise ContractError("augment_text: empty token sequence")
    rng = np.random.default_rng(seed)
    out = []
    for tok in tokens:
        action = _draw_text_decision(rng, config)
        if action == _KEEP:
            out.append(int(tok))
        elif action == _MASK:
            out.append(config.mask_token_id)
        elif action == _REPLACE:
            candidates = [i for i in range(config.vocab_size) if i not in config.reserved_ids]
            out.append(int(candidates[rng.integers(0, len(candidates))]))
        # _DELETE drops the token
    if not out:
        out = [int(tokens[0])]
    return out


def augment_batch_views(images, config, base_seed):
    """Two independently augmented views per image."""
    v1 = [augment_image(img, config, derive_seed(base_seed, i, 0)) for i, img in enumerate(images)]
    v2 = [augment_image(img, config, derive_seed(base_seed, i, 1)) for i, img in enumerate(images)]
    return np.stack(v1), np.stack(v2)


def augment_text_batch_views(token_lists, config, base_seed):
    """Two independently augmented views per caption."""
    v1 = [augment_text(t, config, derive_seed(base_seed, i, 0)) for i, t in enumerate(token_lists)]
    v2 = [augment_text(t, config, derive_seed(base_seed, i, 1)) for i, t in enumerate(token_lists)]
    return v1, v2


def augmentation_stats(n_trials, visual_config: VisualAugConfig,
                       text_config: TextAugConfig, seed, tokens_per_trial=10):
    """Empirical per-operation application rates with standard errors.

    Uses the same decision-sampling code as the pipelines themselves, so
    the reported rates are exactly what augment_image/augment_text apply.
    """
    if n_trials < 1000:
        raise ContractError(f"augmentation_stats needs >= 1000 trials, got {n_trials}")
    counts = {"flip": 0, "noise": 0, "jitter": 0, "gray": 0}
    oh, ow = visual_config.output_size
    for i in range(n_trials):
        rng = np.random.default_rng(derive_seed(seed, i, 0))
        d = _draw_visual_decisions(rng, visual_config, oh, ow)
        for op in counts:
            counts[op] += d[op]

    text_counts = {_MASK: 0, _REPLACE: 0, _DELETE: 0}
    total_tokens = n_trials * tokens_per_trial
    for i in range(n_trials):
        rng = np.random.default_rng(derive_seed(seed, i, 1))
        for _ in range(tokens_per_trial):
            action = _draw_text_decision(rng, text_config)
            if action in text_counts:
                text_counts[action] += 1
            if action == _REPLACE:
                rng.integers(0, text_config.vocab_size)

    def rate(count, n):
        p = count / n
        return {"rate": p, "stderr": float(np.sqrt(max(p * (1 - p), 1e-12) / n))}

    report = {"n_trials": n_trials}
    for op, c in counts.items():
        report[op] = rate(c, n_trials)
    report["text_masked"] = rate(text_counts[_MASK], total_tokens)
    report["text_replaced"] = rate(text_counts[_REPLACE], total_tokens)
    report["text_deleted"] = rate(text_counts[_DELETE], total_tokens)
    return report
