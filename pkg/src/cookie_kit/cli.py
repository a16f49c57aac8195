"""Command-line entry point.

Subcommands: gen-data, pretrain, finetune, eval, attn, bench. Exit codes:
0 success, 2 configuration/usage error, 1 runtime error. All outputs land
under ``--out``; every run echoes its normalized config for provenance.
The ``COOKIE_KIT_THREADS`` environment variable caps BLAS/OpenMP
parallelism (set before heavy work starts).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from .errors import ConfigError, CookieKitError

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS")


def _apply_thread_cap():
    cap = os.environ.get("COOKIE_KIT_THREADS")
    if not cap:
        return
    if not cap.isdigit() or int(cap) < 1:
        raise ConfigError(f"COOKIE_KIT_THREADS must be a positive integer, got {cap!r}")
    for var in _THREAD_VARS:
        os.environ.setdefault(var, cap)
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(int(cap))
    except ImportError:
        pass  # env vars above still cap libraries loaded later


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cookie-kit",
        description="Dual-stream contrastive pre-training toolkit: corpus "
                    "generation, two-stage training, retrieval evaluation and "
                    "inference-cost benchmarking.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration file")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--out", default="runs", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="build a synthetic corpus")
    p.add_argument("--n", type=int, help="number of image-caption groups")

    p = sub.add_parser("pretrain", parents=[common], help="two-stage pre-training")
    p.add_argument("--data", default=None, help="corpus directory (overrides config)")
    p.add_argument("--stage", type=int, choices=(1, 2),
                   help="run only this stage (default: both)")
    p.add_argument("--ckpt", help="resume from this checkpoint")

    p = sub.add_parser("finetune", parents=[common], help="triplet fine-tuning")
    p.add_argument("--data", default=None)
    p.add_argument("--ckpt", required=True, help="pre-trained checkpoint to start from")

    p = sub.add_parser("eval", parents=[common], help="retrieval + matching evaluation")
    p.add_argument("--data", default=None)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"))

    p = sub.add_parser("attn", parents=[common], help="dump shared-encoder attention ranks")
    p.add_argument("--data", default=None)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"))
    p.add_argument("--n", type=int, default=8, help="number of samples to dump")

    p = sub.add_parser("bench", parents=[common], help="double- vs one-stream timing")
    p.add_argument("--sizes", help="comma-separated ascending gallery sizes")
    p.add_argument("--repeats", type=int, help="timing repeats per size (>= 5)")
    return parser


def _load_run_config(args):
    from . import config as C

    overrides = {"out_dir": args.out}
    if args.seed is not None:
        overrides["seed"] = args.seed
        overrides["train.seed"] = args.seed
    if getattr(args, "n", None) is not None and args.command == "gen-data":
        overrides["n_samples"] = args.n
    if getattr(args, "split", None) is not None:
        overrides["eval_split"] = args.split
    if getattr(args, "data", None) is not None:
        overrides["data_dir"] = args.data
    if getattr(args, "repeats", None) is not None:
        overrides["bench_repeats"] = args.repeats
    if getattr(args, "sizes", None) is not None:
        try:
            overrides["bench_sizes"] = [int(s) for s in args.sizes.split(",")]
        except ValueError as exc:
            raise ConfigError(f"--sizes must be comma-separated integers: {exc}") from exc
    return C.validate_config(args.config, overrides)


def _echo(cfg, out, command):
    from . import config as C

    C.echo_config(cfg, out, {"command": command})


def _load_params(path, reset_optimizer=True):
    from . import train as TR

    params, state, meta = TR.load_checkpoint(path, reset_optimizer=reset_optimizer)
    return params, state, meta


def cmd_gen_data(args, cfg):
    from . import data as D

    out = Path(args.out)
    manifest = D.build_corpus(cfg.n_samples, cfg.seed, out)
    _echo(cfg, out, "gen-data")
    print(f"wrote {len(manifest)} samples to {out}")
    return 0


def cmd_pretrain(args, cfg):
    from . import data as D
    from . import plotting as P
    from . import train as TR

    manifest = D.load_corpus(cfg.data_dir)
    train_cfg = cfg.train
    if args.stage == 1:
        train_cfg = TR.TrainConfig(**{**train_cfg.__dict__, "stage2_epochs": 0})
    elif args.stage == 2:
        train_cfg = TR.TrainConfig(**{**train_cfg.__dict__, "stage1_epochs": 0})
    params = None
    if args.ckpt:
        params, _, _ = _load_params(args.ckpt)
    out = Path(args.out)
    _, history, ckpt = TR.run_pretrain(train_cfg, manifest, encoder_config=cfg.encoder,
                                       out_dir=out, params=params,
                                       visual_aug=cfg.visual_aug, text_aug=cfg.text_aug)
    P.plot_loss_curves(history, out / "loss-curves.png")
    _echo(cfg, out, "pretrain")
    print(f"pre-training done; checkpoint at {ckpt}")
    return 0


def cmd_finetune(args, cfg):
    from . import data as D
    from . import plotting as P
    from . import train as TR

    manifest = D.load_corpus(cfg.data_dir)
    params, _, _ = _load_params(args.ckpt)
    out = Path(args.out)
    _, history, ckpt = TR.run_finetune(cfg.train, manifest, params, out)
    P.plot_loss_curves(history, out / "loss-curves.png")
    _echo(cfg, out, "finetune")
    print(f"fine-tuning done; checkpoint at {ckpt}")
    return 0


def cmd_eval(args, cfg):
    from . import data as D
    from . import evaluate as V
    from . import plotting as P

    manifest = D.load_corpus(cfg.data_dir)
    params, _, _ = _load_params(args.ckpt)
    report, extras = V.eval_retrieval(params, manifest, cfg.eval_split,
                                      sts_pairs=cfg.sts_pairs, sts_seed=cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    (out / "ranks.json").write_text(json.dumps(
        {"ids": extras["ids"], "ranks_i2t": extras["ranks_i2t"],
         "ranks_t2i": extras["ranks_t2i"]}), encoding="utf-8")
    P.plot_recall_bars(report, out / "recall-bars.png")
    P.plot_similarity_heatmap(extras["sims"], out / "similarity-heatmap.png")
    _echo(cfg, out, "eval")
    print(json.dumps(report, indent=2))
    return 0


def cmd_attn(args, cfg):
    from . import data as D
    from . import encoders as E
    from . import evaluate as V

    manifest = D.load_corpus(cfg.data_dir)
    params, _, _ = _load_params(args.ckpt)
    ids = D.split_ids(manifest, cfg.eval_split)[:args.n]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "attention.csv"
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["sample-id", "token-index", "token-label", "score", "rank"])
        for sid in ids:
            image = manifest.load_image(sid)[None]
            tokens = E.ws_token_outputs(images=image, params=params)
            pooled = E.encode_images(image, params)
            labels = [f"patch-{i}" for i in range(tokens.shape[1])]
            for idx, label, score, rank, _ in V.attention_rank(
                    tokens.data[0], pooled.data[0], labels):
                writer.writerow([sid, idx, label, f"{score:.6f}", rank])
            cap = manifest.records[sid]["captions"][0]
            tok_ids, mask = D.pad_tokens([cap], params.config.max_words)
            tokens = E.ws_token_outputs(token_ids=tok_ids, pad_mask=mask, params=params)
            pooled = E.encode_texts(tok_ids, mask, params)
            words = D.detokenize(cap)
            for idx, label, score, rank, _ in V.attention_rank(
                    tokens.data[0, :len(cap)], pooled.data[0], words):
                writer.writerow([sid, idx, label, f"{score:.6f}", rank])
    _echo(cfg, out, "attn")
    print(f"attention ranking written to {path}")
    return 0


def cmd_bench(args, cfg):
    from . import bench as B
    from . import plotting as P

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = [B.bench_retrieval(mode, cfg.bench_sizes, cfg.bench_repeats, seed=cfg.seed)
               for mode in ("double-stream", "one-stream-sim")]
    B.write_csv(records, out / "bench.csv")
    summary = B.write_summary(records, out / "bench-summary.json")
    P.plot_scaling(records, out / "scaling.png")
    _echo(cfg, out, "bench")
    for mode, stats in summary.items():
        print(f"{mode}: slope {stats['slope']:.2f} ± {stats['slope_stderr']:.2f}")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "eval": cmd_eval, "attn": cmd_attn, "bench": cmd_bench}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_thread_cap()
        cfg = _load_run_config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (CookieKitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
