"""Run configuration: JSON file -> validated, normalized RunConfig.

Validation collects *every* failing field before raising, so a bad config
is fixable in one pass. Precedence is CLI flags > config file > defaults;
the normalized result is echoed next to the outputs for provenance.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import augment as A
from . import encoders as E
from . import train as TR
from .errors import ConfigError

DEFAULT_BENCH_SIZES = [64, 128, 256, 512]


@dataclass
class RunConfig:
    encoder: E.EncoderConfig
    train: TR.TrainConfig
    visual_aug: A.VisualAugConfig
    text_aug: A.TextAugConfig
    seed: int = 1
    out_dir: str = "runs"
    data_dir: str = "data"
    n_samples: int = 2000
    eval_split: str = "test"
    sts_pairs: int = 200
    bench_sizes: list = field(default_factory=lambda: list(DEFAULT_BENCH_SIZES))
    bench_repeats: int = 5

    def to_dict(self):
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d


_SECTIONS = {"encoder": E.EncoderConfig, "train": TR.TrainConfig,
             "visual_aug": A.VisualAugConfig, "text_aug": A.TextAugConfig}
_SCALARS = {"seed": int, "out_dir": str, "data_dir": str, "n_samples": int,
            "eval_split": str, "sts_pairs": int, "bench_sizes": list,
            "bench_repeats": int}


def _build_section(cls, raw, section, errors):
    """Construct one config dataclass, recording every bad field."""
    defaults = cls()
    known = set(defaults.__dict__)
    values = {}
    for key, value in raw.items():
        if key not in known:
            errors.append(f"{section}.{key}: unknown field")
            continue
        values[key] = tuple(value) if isinstance(value, list) and \
            isinstance(getattr(defaults, key), tuple) else value
    # probe each field individually so one bad value does not hide another
    for key, value in list(values.items()):
        probe = {**{k: getattr(defaults, k) for k in known}, key: value}
        try:
            cls(**probe)
        except Exception as exc:  # noqa: BLE001 - report and continue collecting
            errors.append(f"{section}.{key}: {exc}")
            del values[key]
    try:
        return cls(**values)
    except Exception as exc:  # cross-field failure after all single fields pass
        errors.append(f"{section}: {exc}")
        return defaults


def normalize_config(raw: dict) -> RunConfig:
    """Fill defaults and validate a raw config dict."""
    errors = []
    sections = {}
    for name, cls in _SECTIONS.items():
        part = raw.get(name, {})
        if not isinstance(part, dict):
            errors.append(f"{name}: expected an object")
            part = {}
        sections[name] = _build_section(cls, part, name, errors)
    scalars = {}
    for name, typ in _SCALARS.items():
        if name in raw:
            value = raw[name]
            if not isinstance(value, typ) or isinstance(value, bool):
                errors.append(f"{name}: expected {typ.__name__}, got {value!r}")
            else:
                scalars[name] = value
    for key in raw:
        if key not in _SECTIONS and key not in _SCALARS:
            errors.append(f"{key}: unknown field")
    cfg = RunConfig(**sections, **scalars)
    if cfg.n_samples < 1:
        errors.append(f"n_samples: must be >= 1, got {cfg.n_samples}")
    if cfg.eval_split not in ("train", "val", "test", "all"):
        errors.append(f"eval_split: unknown split {cfg.eval_split!r}")
    if cfg.bench_repeats < 5:
        errors.append(f"bench_repeats: must be >= 5, got {cfg.bench_repeats}")
    if cfg.bench_sizes != sorted(set(cfg.bench_sizes)) or \
            any(not isinstance(n, int) or n < 2 for n in cfg.bench_sizes):
        errors.append(f"bench_sizes: must be ascending integers >= 2, got {cfg.bench_sizes}")
    if cfg.encoder.image_size != cfg.visual_aug.output_size[0] or \
            cfg.visual_aug.output_size[0] != cfg.visual_aug.output_size[1]:
        errors.append(
            f"visual_aug.output_size: {cfg.visual_aug.output_size} must match encoder "
            f"image_size {cfg.encoder.image_size}")
    if cfg.text_aug.vocab_size != cfg.encoder.vocab_size:
        errors.append(
            f"text_aug.vocab_size: {cfg.text_aug.vocab_size} must match encoder "
            f"vocab_size {cfg.encoder.vocab_size}")
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(sorted(errors)))
    return cfg


def validate_config(path=None, overrides=None) -> RunConfig:
    """Load a JSON config file (missing/empty file = all defaults), apply
    flag overrides, and return the normalized RunConfig."""
    raw = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8").strip()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        if text:
            try:
                raw = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file is not valid JSON: {exc}") from exc
            if not isinstance(raw, dict):
                raise ConfigError("config file must hold a JSON object")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if "." in key:
            section, fld = key.split(".", 1)
            raw.setdefault(section, {})[fld] = value
        else:
            raw[key] = value
    return normalize_config(raw)


def echo_config(cfg: RunConfig, out_dir, extra=None):
    """Write the normalized provenance record next to the run outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = cfg.to_dict()
    record.update(extra or {})
    path = out_dir / "config-echo.json"
    path.write_text(json.dumps(record, indent=2, default=list), encoding="utf-8")
    return path
