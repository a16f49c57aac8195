"""Training drivers: AdamW, warm-up/decay schedule, the two-stage
pre-training loop, triplet fine-tuning, and checkpoint persistence.

The learning-rate schedule warms up linearly from zero over the first
``warmup`` fraction of steps, holds the base rate, then divides it by 10
at the halfway step. Stage 1 optimizes only the two cross-modal terms;
stage 2 adds the single-modal contrastive terms with unit weights.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment as A
from . import data as D
from . import encoders as E
from . import evaluate as V
from . import objectives as O
from . import tensor as T
from .errors import CheckpointError, ContractError, TrainingError

CHECKPOINT_MAGIC = b"CKPT"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Toy-scale schedule; the reference configuration this is scaled down
    from used 30+10 epochs, batches of 576/288 and a base rate of 2e-5."""

    stage1_epochs: int = 15
    stage2_epochs: int = 5
    finetune_epochs: int = 5
    batch_size: int = 32
    lr: float = 4e-3
    warmup: float = 0.1
    weight_decay: float = 1e-4
    clip_norm: float = 5.0
    tau: float = 0.07
    alpha: float = 0.2
    seed: int = 1
    strategy: str = "max"
    split: str = "train"

    def __post_init__(self):
        for name in ("stage1_epochs", "stage2_epochs", "finetune_epochs"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        if self.batch_size < 2:
            raise ContractError(f"batch_size must be >= 2, got {self.batch_size}")
        if not 0.0 <= self.warmup < 1.0:
            raise ContractError(f"warmup proportion {self.warmup} outside [0, 1)")
        if self.lr <= 0:
            raise ContractError(f"lr must be positive, got {self.lr}")
        if self.tau <= 0:
            raise ContractError(f"tau must be positive, got {self.tau}")
        if self.alpha < 0:
            raise ContractError(f"alpha must be >= 0, got {self.alpha}")
        if self.clip_norm <= 0:
            raise ContractError(f"clip_norm must be positive, got {self.clip_norm}")


@dataclass
class OptimState:
    lr: float
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state: OptimState):
    """One decoupled-weight-decay AdamW update, in place on params.

    ``params`` is a name -> Parameter mapping; ``grads`` a name -> array
    mapping from backward(). Weight decay is applied directly to the
    parameter, outside the adaptive term.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        p = params[name]
        g = g.astype(np.float64)
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1 ** state.step)
        v_hat = state.v[name] / (1 - b2 ** state.step)
        update = m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p.data
        p.data = (p.data - state.lr * update).astype(p.data.dtype)
    return state


def lr_schedule(step, total_steps, base_lr, warmup=0.1):
    """Linear warm-up, constant plateau, then base/10 from the halfway step."""
    if step < 0 or total_steps < 1:
        raise ContractError(f"bad schedule query: step={step}, total={total_steps}")
    warmup_steps = int(round(warmup * total_steps))
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if step >= total_steps // 2:
        return base_lr / 10.0
    return base_lr


def clip_gradients(grads, max_norm):
    """Scale the whole gradient set so its global L2 norm is <= max_norm."""
    total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads, total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total


def save_checkpoint(params: E.EncoderParams, state, meta, path):
    """Binary layout: magic, version u32, length-prefixed JSON metadata,
    then named little-endian tensor blobs."""
    meta = dict(meta)
    meta["encoder_config"] = params.config.to_dict()
    if state is not None:
        meta["optim"] = {"lr": state.lr, "weight_decay": state.weight_decay,
                         "beta1": state.beta1, "beta2": state.beta2,
                         "eps": state.eps, "step": state.step}
    tensors = [(name, p.data) for name, p in sorted(params.as_dict().items())]
    if state is not None:
        for name in sorted(state.m):
            tensors.append((f"optim.m.{name}", state.m[name]))
            tensors.append((f"optim.v.{name}", state.v[name]))
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    meta_bytes = json.dumps(meta).encode("utf-8")
    blob += struct.pack("<I", len(meta_bytes)) + meta_bytes
    blob += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        arr = np.asarray(arr)
        name_b = name.encode("utf-8")
        dtype_b = arr.dtype.str.encode("utf-8")  # e.g. '<f4'
        blob += struct.pack("<I", len(name_b)) + name_b
        blob += struct.pack("<I", len(dtype_b)) + dtype_b
        blob += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
        blob += struct.pack("<Q", len(payload)) + payload
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(blob))
    tmp.replace(path)


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint: {self.path}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]


def _load_tensors(r):
    tensors = {}
    count = r.u32()
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        try:
            dtype = np.dtype(r.take(r.u32()).decode("utf-8"))
        except TypeError as exc:
            raise CheckpointError(f"bad dtype tag for tensor {name!r}: {exc}") from exc
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        payload = r.take(r.u64())
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return tensors


def load_checkpoint(path, reset_optimizer=False):
    """Returns (params, optimizer state or None, metadata). With
    ``reset_optimizer`` the stored moments and step counter are discarded."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic bytes in {path}")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata block: {exc}") from exc
    tensors = _load_tensors(r)
    try:
        config = E.EncoderConfig(**meta["encoder_config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"invalid encoder config in checkpoint: {exc}") from exc
    model = {name: T.Parameter(name, arr) for name, arr in tensors.items()
             if not name.startswith("optim.")}
    params = E.EncoderParams(config, model)
    state = None
    if "optim" in meta and not reset_optimizer:
        o = meta["optim"]
        state = OptimState(lr=o["lr"], weight_decay=o["weight_decay"], beta1=o["beta1"],
                           beta2=o["beta2"], eps=o["eps"], step=o["step"])
        for name, arr in tensors.items():
            if name.startswith("optim.m."):
                state.m[name[len("optim.m."):]] = arr
            elif name.startswith("optim.v."):
                state.v[name[len("optim.v."):]] = arr
    return params, state, meta


def _write_log(log_file, record):
    if log_file is not None:
        log_file.write(json.dumps(record) + "\n")
        log_file.flush()


def _validation_rsum(params, manifest, strategy):
    val_ids = D.split_ids(manifest, "val")
    if len(val_ids) < 2:
        return None
    image_emb, caption_emb, _ = V.encode_corpus(params, manifest, "val", strategy)
    report, _ = V.retrieval_report(image_emb, caption_emb)
    return report["rsum"]


def _run_epochs(params, manifest, config, out_dir, stages, loss_fn, log_name):
    """Shared epoch loop: schedule, clipping, AdamW, JSONL logging, and
    best-by-validation-Rsum checkpointing.

    ``stages`` is a list of (stage_tag, n_epochs); ``loss_fn(batch, stage,
    seed)`` returns (loss Tensor, components dict). On a non-finite loss
    the run aborts with the last completed epoch's checkpoint retained.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_train = len(D.split_ids(manifest, config.split))
    steps_per_epoch = n_train // config.batch_size
    if steps_per_epoch < 1:
        raise TrainingError(
            f"split {config.split!r} has {n_train} samples; too few for batch size "
            f"{config.batch_size}")
    total_epochs = sum(n for _, n in stages)
    total_steps = max(1, total_epochs * steps_per_epoch)
    state = OptimState(lr=config.lr, weight_decay=config.weight_decay)
    model = params.as_dict()
    last_path = out_dir / "last.ckpt"
    best_path = out_dir / "best.ckpt"
    best_rsum, step, epoch_index = -1.0, 0, 0
    history = []
    with open(out_dir / f"{log_name}.jsonl", "w", encoding="utf-8") as log_file:
        for stage, n_epochs in stages:
            for _ in range(n_epochs):
                t0 = time.perf_counter()
                sums, n_batches = {}, 0
                epoch_seed = D.derive_sample_seed(config.seed, epoch_index)
                batches = D.batch_iter(manifest, config.batch_size, epoch_seed,
                                       config.split, params.config.max_words)
                for b, batch in enumerate(batches):
                    state.lr = lr_schedule(step, total_steps, config.lr, config.warmup)
                    loss, components = loss_fn(batch, stage, D.derive_sample_seed(epoch_seed, b))
                    if not np.isfinite(float(loss.data)):
                        raise TrainingError(
                            f"non-finite loss at epoch {epoch_index}, step {step}; "
                            f"last good checkpoint: {last_path}")
                    grads = T.backward(loss, model)
                    grads, _ = clip_gradients(grads, config.clip_norm)
                    adamw_step(model, grads, state)
                    for k, v in components.items():
                        sums[k] = sums.get(k, 0.0) + v
                    n_batches += 1
                    step += 1
                record = {"epoch": epoch_index, "stage": stage,
                          "lr": state.lr, "wall_time": time.perf_counter() - t0}
                for k, v in sums.items():
                    record[f"loss_{k}"] = v / max(n_batches, 1)
                record["loss_total"] = sum(sums.values()) / max(n_batches, 1)
                val_rsum = _validation_rsum(params, manifest, config.strategy)
                if val_rsum is not None:
                    record["val_rsum"] = val_rsum
                _write_log(log_file, record)
                history.append(record)
                meta = {"epoch": epoch_index, "stage": stage, "seed": config.seed}
                save_checkpoint(params, state, meta, last_path)
                if val_rsum is None or val_rsum >= best_rsum:
                    best_rsum = val_rsum if val_rsum is not None else best_rsum
                    save_checkpoint(params, state, meta, best_path)
                epoch_index += 1
    return params, history, last_path


def run_pretrain(config: TrainConfig, manifest, encoder_config=None, out_dir="runs/pretrain",
                 params=None, visual_aug=None, text_aug=None):
    """Two-stage pre-training: cross-modal terms only, then the full
    four-term objective. Returns (params, per-epoch history, checkpoint path)."""
    if params is None:
        params = E.init_params(encoder_config or E.EncoderConfig(), seed=config.seed)
    vis = visual_aug or A.VisualAugConfig(
        output_size=(params.config.image_size, params.config.image_size))
    txt = text_aug or A.TextAugConfig(vocab_size=params.config.vocab_size)

    def loss_fn(batch, stage, seed):
        images, tok_ids, mask, caps, _ = batch
        return O.pretrain_loss(images, tok_ids, mask, caps, params, stage,
                               tau=config.tau, visual_aug=vis, text_aug=txt,
                               seed=seed, strategy=config.strategy)

    stages = [(1, config.stage1_epochs), (2, config.stage2_epochs)]
    return _run_epochs(params, manifest, config, out_dir, stages, loss_fn, "pretrain")


def run_finetune(config: TrainConfig, manifest, params, out_dir="runs/finetune"):
    """Hard-triplet fine-tuning with MAX pooling from existing parameters.
    Returns (params, per-epoch history, checkpoint path)."""

    def loss_fn(batch, stage, seed):
        images, tok_ids, mask, _, _ = batch
        image_emb = E.encode_images(images, params, "max")
        text_emb = E.encode_texts(tok_ids, mask, params, "max")
        loss = O.hard_triplet_loss(image_emb, text_emb, config.alpha)
        return loss, {"triplet": float(loss.data)}

    stages = [("finetune", config.finetune_epochs)]
    return _run_epochs(params, manifest, config, out_dir, stages, loss_fn, "finetune")
