"""Command-line interface.

Subcommands::

    mmrec gen-data   --config C --out DIR [--seed S]
    mmrec train      --config C --data DIR --out DIR
    mmrec eval       --checkpoint DIR --data DIR --report PATH [--split S]
    mmrec grad-check --config C [--seed S] [--tol T]
    mmrec ablate     --config C --variants a,b,c --report PATH
                     [--data DIR] [--seeds 0,1,...] [--out DIR]

Exit codes: 0 success, 1 validation/usage error (bad flags, malformed
config or data, a failed check), 2 runtime failure (unexpected crash).
Every command that produces artifacts writes the fully resolved config
beside them, so an output directory is self-describing.

``MMREC_THREADS`` caps the numerical thread pools (default: machine cores).
It is applied to the BLAS environment variables before numpy loads when the
process starts from this module, and via ``threadpoolctl`` otherwise.
"""

from __future__ import annotations

import os
import sys

_raw_threads = os.environ.get("MMREC_THREADS")
if _raw_threads and _raw_threads.isdigit() and int(_raw_threads) > 0:
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ.setdefault(_var, _raw_threads)

import argparse
import json
import traceback
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .ablation import ablate
from .config import ConfigError, ExperimentConfig
from .data import (
    DataFormatError,
    NewsRecord,
    NewsTable,
    Vocabulary,
    load_behaviors,
    load_news,
)
from .encoder import EncoderConfig
from .metrics import aggregate_runs, evaluate_model, format_table
from .model import MMRecModel
from .synthetic import generate_synthetic
from .training import (
    CheckpointError,
    TrainingError,
    TrainingSample,
    _assemble_batch,
    load_checkpoint,
    nce_loss,
    train,
)

__all__ = ["main"]

RESOLVED_CONFIG = "resolved_config.json"

# Dimension caps used by grad-check. Central differences cost two forward
# passes per scalar, so the configured architecture is shrunk to a copy that
# keeps its layer structure (and therefore every parameter kind) while
# staying in the tens-of-seconds range.
_CHECK_CAPS = dict(d=16, d_img=8, d_a=8, heads=2, m_max=6, k_max=2, ffn_mult=2)
_CHECK_VOCAB = 24


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the CLI contract reserves 2 for crashes."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="mmrec", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override data_seed")

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="dataset directory (gen-data output)")
    p.add_argument("--out", required=True, help="run directory for logs/checkpoints")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="metrics report path (JSON)")
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))

    p = sub.add_parser(
        "grad-check",
        help="exhaustive finite-difference gradient verification",
        description="Checks every parameter of a reduced copy of the configured "
        "architecture (same layer counts and variant; dimensions capped at "
        + ", ".join(f"{k}={v}" for k, v in _CHECK_CAPS.items())
        + ") against central differences with step 1e-5.",
    )
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("ablate", help="train and compare model variants")
    p.add_argument("--config", required=True)
    p.add_argument("--variants", required=True, help="comma-separated variant names")
    p.add_argument("--report", required=True, help="markdown report path (+ .json twin)")
    p.add_argument("--data", default=None, help="dataset directory (default: config data_dir)")
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated training seeds")
    p.add_argument("--out", default=None, help="directory for per-run logs/checkpoints")
    return parser


# ---------------------------------------------------------------------------
# shared helpers


def _apply_thread_cap():
    raw = os.environ.get("MMREC_THREADS")
    if raw is None:
        return None
    if not raw.isdigit() or int(raw) < 1:
        raise ConfigError(f"MMREC_THREADS must be a positive integer, got {raw!r}")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # BLAS env vars set at import time still apply
        return None
    return threadpool_limits(limits=int(raw))


def _load_dataset(data_dir, m_max: int):
    data_dir = Path(data_dir)
    for name in ("vocab.txt", "news.jsonl", "roi.mmrf", "behaviors_train.tsv"):
        if not (data_dir / name).exists():
            raise DataFormatError(f"dataset directory {data_dir} is missing {name}")
    vocab = Vocabulary.load(data_dir / "vocab.txt")
    news = load_news(
        data_dir / "news.jsonl", data_dir / "roi.mmrf", vocab=vocab, max_title_tokens=m_max
    )
    splits = {}
    for split in ("train", "dev", "test"):
        path = data_dir / f"behaviors_{split}.tsv"
        if path.exists():
            splits[split] = load_behaviors(path)
    return vocab, news, splits


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    if args.seed is not None:
        cfg = cfg.replace(data_seed=args.seed)
    out = Path(args.out)
    data = generate_synthetic(cfg.synthetic_config(), out)
    cfg.save(out / RESOLVED_CONFIG)
    n_imps = {name: len(s) for name, s in data.splits.items()}
    print(
        f"wrote {len(data.news.ids)} news, vocab {len(data.vocab)}, "
        f"impressions {n_imps} to {out}"
    )
    return 0


def _cmd_train(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    vocab, news, splits = _load_dataset(args.data, cfg.m_max)
    model = cfg.build_model(len(vocab))
    out = Path(args.out)
    result = train(
        model,
        news,
        splits["train"],
        cfg.train_config(),
        dev_impressions=splits.get("dev"),
        out_dir=out,
        vocab_hash=vocab.content_hash(),
    )
    cfg.save(out / RESOLVED_CONFIG)
    for record in result.epochs:
        print(json.dumps(record))
    print(f"checkpoint: {result.checkpoint_dir}")
    return 0


def _cmd_eval(args) -> int:
    data_dir = Path(args.data)
    vocab_path = data_dir / "vocab.txt"
    if not vocab_path.exists():
        raise DataFormatError(f"dataset directory {data_dir} is missing vocab.txt")
    vocab = Vocabulary.load(vocab_path)
    model, manifest = load_checkpoint(args.checkpoint, expected_vocab_hash=vocab.content_hash())
    _, news, splits = _load_dataset(data_dir, model.config.m_max)
    if args.split not in splits:
        raise DataFormatError(f"dataset has no behaviors_{args.split}.tsv")
    impressions = splits[args.split]
    result = evaluate_model(model, news, impressions, history_max=50)
    counts = result.pop("counts")
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    document = {
        "checkpoint": str(args.checkpoint),
        "data": str(data_dir),
        "split": args.split,
        "model": manifest["model"],
        "step": manifest.get("step"),
        "metrics": result,
        "counts": counts,
    }
    report_path.write_text(json.dumps(document, indent=2) + "\n")
    ExperimentConfig(
        **{k: v for k, v in manifest["model"]["encoder"].items()},
        variant=manifest["model"]["variant"],
        scaled_attention=manifest["model"]["scaled_attention"],
        seed=manifest["model"]["seed"],
    ).save(report_path.parent / RESOLVED_CONFIG)
    report = aggregate_runs([result], seeds=[manifest["model"]["seed"]], n_impressions=len(impressions))
    print(format_table({manifest["model"]["variant"]: report}))
    print(f"report: {report_path}")
    return 0


def _check_encoder_config(cfg: ExperimentConfig) -> EncoderConfig:
    base = cfg.encoder_config().to_dict()
    for key, cap in _CHECK_CAPS.items():
        base[key] = min(base[key], cap)
    base["heads"] = min(base["heads"], _CHECK_CAPS["heads"])
    if base["d"] % base["heads"] != 0:
        base["heads"] = 1
    return EncoderConfig(**base)


def _probe_model_and_batch(cfg: ExperimentConfig, seed: int):
    """A reduced model plus a fixed 3-sample batch exercising every parameter."""
    enc = _check_encoder_config(cfg)
    model = MMRecModel(
        enc, vocab_size=_CHECK_VOCAB, variant=cfg.variant, seed=seed,
        scaled_attention=cfg.scaled_attention,
    )
    model.randomize_params(seed)
    rng = np.random.default_rng([seed, 11])
    records = []
    for i in range(6):
        k = 0 if i == 5 else int(rng.integers(1, enc.k_max + 1))  # one imageless news
        title_len = int(rng.integers(2, enc.m_max + 1))
        title_ids = rng.integers(2, _CHECK_VOCAB, size=title_len)
        boxes = np.tile([0.2, 0.2, 0.7, 0.7], (k, 1)) + rng.uniform(0, 0.05, size=(k, 4)) * [1, 1, 0, 0]
        records.append(
            NewsRecord(
                news_id=f"probe{i}",
                title_tokens=[f"t{t}" for t in title_ids],
                roi_features=rng.standard_normal((k, enc.d_img)).astype(np.float32),
                roi_boxes=boxes,
                has_image=k > 0,
                title_ids=title_ids.astype(np.int64),
            )
        )
    table = NewsTable(records)
    samples = [
        TrainingSample(history=["probe0", "probe1"], positive="probe2", negatives=["probe3", "probe4"]),
        TrainingSample(history=["probe5", "probe2"], positive="probe4", negatives=["probe0", "probe1"]),
        TrainingSample(history=["probe3"], positive="probe5", negatives=["probe2", "probe4"]),
    ]
    batch, hist_idx, hist_mask, cand_idx = _assemble_batch(model, table, samples, history_max=4)

    def loss_fn():
        r_t, r_p = model.encode_batch(batch)
        hist_t = ad.embedding_lookup(r_t, hist_idx) if r_t is not None else None
        hist_p = ad.embedding_lookup(r_p, hist_idx) if r_p is not None else None
        cand_t = ad.embedding_lookup(r_t, cand_idx) if r_t is not None else None
        cand_p = ad.embedding_lookup(r_p, cand_idx) if r_p is not None else None
        return nce_loss(model.score_batch(hist_t, hist_p, hist_mask, cand_t, cand_p))

    return model, loss_fn


def _cmd_grad_check(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)

    def builder(seed):
        model, loss_fn = _probe_model_and_batch(cfg, seed)
        return loss_fn, model.parameters()

    report = ad.grad_check(builder, seed=args.seed, step=1e-5, tol=args.tol)
    print(report.summary())
    return 0 if report.passed else 1


def _cmd_ablate(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}")
    data_dir = args.data if args.data is not None else cfg.data_dir
    vocab, news, splits = _load_dataset(data_dir, cfg.m_max)
    report = ablate(
        cfg, variants, seeds, news, splits, vocab,
        out_dir=args.out,
    )
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report.to_markdown())
    report_path.with_suffix(".json").write_text(report.to_json())
    cfg.save(report_path.parent / RESOLVED_CONFIG)
    print(report.table())
    print(f"report: {report_path} and {report_path.with_suffix('.json')}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "grad-check": _cmd_grad_check,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        # the returned limiter object must outlive the command; it restores
        # the previous thread caps when garbage collected
        _limit = _apply_thread_cap()
        return _COMMANDS[args.command](args)
    except (ConfigError, DataFormatError, CheckpointError, ValueError) as exc:
        print(f"mmrec {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except TrainingError as exc:
        print(f"mmrec {args.command}: training failed: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
