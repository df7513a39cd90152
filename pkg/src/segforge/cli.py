"""The `forge` command line: make-toy, train, infer, eval, rank, serve.

Flags may be preloaded from a TOML config file (--config); explicit
flags win. FORGE_SEED in the environment overrides every --seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from .errors import SegforgeError

logger = logging.getLogger(__name__)


def _load_config_defaults(argv: list[str]) -> dict:
    """Pull --config FILE out of argv early and parse it as flat TOML."""
    if "--config" not in argv:
        return {}
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    path = Path(argv[argv.index("--config") + 1])
    return tomllib.loads(path.read_text())


def _seed(args) -> int:
    env = os.environ.get("FORGE_SEED")
    if env is not None:
        return int(env)
    return args.seed


def build_parser(defaults: dict) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="forge", description=__doc__)
    parser.add_argument("--config", help="TOML file with flag defaults", default=None)
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers: dict[str, argparse.ArgumentParser] = {}

    def add(name, **kwargs):
        p = sub.add_parser(name, **kwargs)
        subparsers[name] = p
        return p

    p = add("make-toy", help="generate synthetic case bundles")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--depth", type=int, default=0, help="also emit one 3D case with this many slices")

    p = add("train", help="distill or fine-tune on a bundle directory")
    p.add_argument("--stage", choices=["distill", "finetune"], required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output weights directory")
    p.add_argument("--weights", default=None, help="initial weights (default: fresh init)")
    p.add_argument("--teacher", default=None, help="teacher weights for distillation")
    p.add_argument("--teacher-blocks", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--steps", type=int, default=None, help="hard cap on optimizer steps")
    p.add_argument("--flip-p", type=float, default=0.5)
    p.add_argument("--jitter", type=int, default=5)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--stop-loss", type=float, default=0.005)

    p = add("infer", help="segment every case bundle in a directory")
    p.add_argument("--weights", required=True)
    p.add_argument("--cases", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cache-cap", type=int, default=512)
    p.add_argument("--cold", action="store_true", help="include weight loading in per-case runtime")

    p = add("eval", help="score predictions against reference bundles")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--algorithm", default="algo")
    p.add_argument("--tau", type=float, default=None, help="override the default NSD tolerance")

    p = add("rank", help="rank-then-aggregate metric tables")
    p.add_argument("--metrics", nargs="+", required=True)
    p.add_argument("--boot", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--per-case", action="store_true", help="rank per case instead of modality means")
    p.add_argument("--wilcoxon", action="store_true", help="include pairwise DSC significance")

    p = add("serve", help="run the interactive segmentation service")
    p.add_argument("--weights", required=True)
    p.add_argument("--cases", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--cache-cap", type=int, default=512)
    p.add_argument("--ui", default=None, help="static directory for the browser client")

    # config defaults override argparse defaults once all arguments exist
    # (keys are dest names: [train] batch_size = 4)
    for name, overrides in defaults.items():
        if name in subparsers:
            subparsers[name].set_defaults(**overrides)

    return parser


def cmd_make_toy(args) -> int:
    from .bundle import save_case
    from .train import make_toy_dataset, make_toy_volume

    seed = _seed(args)
    out = Path(args.out)
    data = make_toy_dataset(args.n, seed=seed, size=args.size)
    for case in data.as_cases(prefix="toy"):
        save_case(case, out / case.id)
    if args.depth:
        case = make_toy_volume(args.depth, seed=seed, size=args.size)
        save_case(case, out / case.id)
    total = args.n + (1 if args.depth else 0)
    print(f"wrote {total} case bundles to {out}")
    return 0


def _load_bundles_as_toy(data_dir: str, size: int):
    from .bundle import load_case
    from .train import ToyDataset, ToySample

    samples = []
    for manifest in sorted(Path(data_dir).glob("*/manifest.json")):
        case = load_case(manifest.parent, auto_prompts=True)
        if case.is_3d or case.image.ndim == 3:
            continue  # training consumes 2D grayscale bundles
        samples.append(ToySample(image=case.image, mask=case.reference, boxes=case.prompts))
    if not samples:
        raise SegforgeError(f"no 2D case bundles under {data_dir}")
    return ToyDataset(samples=samples, size=size)


def cmd_train(args) -> int:
    from .model import NetConfig, PromptNet, load_weights, save_weights
    from .train import TrainConfig, distill, finetune, write_loss_csv

    seed = _seed(args)
    cfg = TrainConfig(
        stage=args.stage,
        lr=args.lr,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        patience=args.patience,
        finetune_stop_loss=args.stop_loss,
        flip_p=args.flip_p,
        jitter=args.jitter,
        seed=seed,
        max_steps=args.steps,
    )
    config = NetConfig(embed_dim=args.embed_dim, encoder_blocks=args.blocks)
    data = _load_bundles_as_toy(args.data, config.input_size)
    net = load_weights(args.weights) if args.weights else PromptNet(config, seed=seed)

    start = time.perf_counter()
    if args.stage == "distill":
        if args.teacher:
            teacher = load_weights(args.teacher)
        else:
            teacher_cfg = NetConfig(
                embed_dim=net.config.embed_dim, encoder_blocks=args.teacher_blocks
            )
            teacher = PromptNet(teacher_cfg, seed=seed + 1)
            logger.info("no --teacher given; using a seeded random teacher")
        net, history = distill(teacher, net, data, cfg)
    else:
        net, history = finetune(net, data, cfg)
    elapsed = time.perf_counter() - start

    out = Path(args.out)
    save_weights(net, out)
    write_loss_csv(history, out / f"loss_{args.stage}.csv")
    final = history[-1][1] if history else float("nan")
    print(
        f"{args.stage}: {len(history)} steps in {elapsed:.1f}s, final loss {final:.6f}; "
        f"weights -> {out}"
    )
    return 0


def cmd_infer(args) -> int:
    from .bundle import load_case
    from .infer import EmbeddingCache, run_case, save_prediction
    from .model import load_weights

    cases = sorted(Path(args.cases).glob("*/manifest.json"))
    if not cases:
        raise SegforgeError(f"no case bundles under {args.cases}")
    out = Path(args.out)
    net = None if args.cold else load_weights(args.weights)
    cache = EmbeddingCache(capacity=args.cache_cap)
    for manifest in cases:
        case = load_case(manifest.parent, auto_prompts=True)
        if args.cold:
            start = time.perf_counter()
            cold_net = load_weights(args.weights)
            record = run_case(cold_net, case, EmbeddingCache(capacity=args.cache_cap))
            record.runtime_seconds = time.perf_counter() - start
        else:
            record = run_case(net, case, cache)
        save_prediction(record, out / case.id)
        print(
            f"{case.id}: {len(record.masks)} masks, "
            f"{record.runtime_seconds:.3f}s, {record.encoder_invocations} encodes"
        )
    return 0


def cmd_eval(args) -> int:
    from .bundle import load_case
    from .infer import load_prediction
    from .metrics import evaluate_submission, write_metrics_csv

    refs = [load_case(m.parent) for m in sorted(Path(args.ref).glob("*/manifest.json"))]
    preds = {}
    for record_path in sorted(Path(args.pred).glob("*/record.json")):
        record = load_prediction(record_path.parent)
        preds[record.case_id] = record
    records = evaluate_submission(args.algorithm, preds, refs, tau_policy=args.tau)
    write_metrics_csv(records, args.out)
    if records:
        import numpy as np

        mean_dsc = float(np.mean([r.dsc for r in records]))
        mean_nsd = float(np.mean([r.nsd for r in records]))
        print(f"{len(records)} records; mean DSC {mean_dsc:.4f}, mean NSD {mean_nsd:.4f} -> {args.out}")
    return 0


def cmd_rank(args) -> int:
    from .metrics import read_metrics_csv
    from .ranking import bootstrap_stability, pairwise_wilcoxon_dsc, rank_then_aggregate

    tables = {}
    for path in args.metrics:
        for record in read_metrics_csv(path):
            tables.setdefault(record.algorithm, []).append(record)
    board = rank_then_aggregate(tables, per_case=args.per_case)
    if args.boot > 0:
        board.bootstrap = bootstrap_stability(
            tables, n_boot=args.boot, seed=_seed(args), per_case=args.per_case
        )
    if args.wilcoxon:
        board.wilcoxon_dsc_p = pairwise_wilcoxon_dsc(tables)
    Path(args.out).write_text(json.dumps(board.to_json_dict(), indent=2))
    print("final ordering:", " > ".join(board.ordering))
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    serve(
        args.weights,
        args.cases,
        host=args.host,
        port=args.port,
        cache_capacity=args.cache_cap,
        ui_dir=args.ui,
    )
    return 0


COMMANDS = {
    "make-toy": cmd_make_toy,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "rank": cmd_rank,
    "serve": cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        defaults = _load_config_defaults(argv)
        parser = build_parser(defaults)
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except SegforgeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
