"""Command-line entry point: ``benet {generate,train,eval,predict,ablate}``.

stdout carries only the JSON/CSV payload; logs go to stderr.
Exit codes: 0 ok, 2 config, 3 I/O, 4 divergence, 5 checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import torch

from .config import RunConfig
from .detector import decide
from .errors import BENetError, ConfigError, DataIOError
from .synth import FAMILIES, SPLITS, load_dataset, load_spec, read_image, write_dataset
from .training import (
    ablation_table,
    evaluate_model,
    get_arm,
    load_checkpoint,
    ordering_summary,
    run_ablation_matrix,
    save_checkpoint,
    train,
)

log = logging.getLogger("benet")


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise DataIOError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def _data_dir(path: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise DataIOError(f"data directory not found: {p}")
    return p


def cmd_generate(args) -> int:
    cfg = RunConfig.load(args.spec, args.set)
    out = Path(args.out)
    _prepare_out(out, args.force)
    write_dataset(cfg.data, out)
    n_images = sum(1 for _ in out.glob("*/images/*.png"))
    log.info("generated %d images under %s", n_images, out)
    return 0


def _load_data(args, cfg: RunConfig):
    root = _data_dir(args.data)
    spec = load_spec(root)
    if spec.image_size != cfg.model.image_size:
        raise ConfigError(
            f"model.image_size={cfg.model.image_size} does not match dataset image size {spec.image_size}"
        )
    return load_dataset(root)


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config, args.set)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.arm is not None:
        get_arm(args.arm)
        cfg = replace(cfg, train=replace(cfg.train, arm=args.arm))
    data = _load_data(args, cfg)
    out = Path(args.out)
    _prepare_out(out, args.force)
    (out / "config.resolved").write_text(cfg.dumps())
    result = train(
        cfg.model,
        cfg.loss,
        cfg.train,
        data["train"],
        data["val"],
        coverage=cfg.detector.coverage,
        out_dir=out,
        log_path=out / "train_log.jsonl",
    )
    save_checkpoint(result, out, extra={"root_seed": cfg.seed})
    log.info("trained arm %s (best epoch %d, tau %s)", result.arm, result.best_epoch, result.detector.tau)
    return 0


def cmd_eval(args) -> int:
    model, detector, manifest = load_checkpoint(args.checkpoint)
    root = _data_dir(args.data)
    if args.split not in SPLITS:
        raise ConfigError(f"unknown split {args.split!r}; expected one of {SPLITS}")
    if args.family is not None and args.family not in FAMILIES:
        raise ConfigError(f"unknown family {args.family!r}; expected one of {FAMILIES}")
    data = load_dataset(root)[args.split]
    report = evaluate_model(model, detector, data, manifest["arm"], args.family)
    payload = report.to_json_dict(
        config_hash=manifest["config_hash"],
        seed=manifest["seed"],
        split=args.split,
        family=args.family,
        arm=manifest["arm"],
    )
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_predict(args) -> int:
    model, detector, manifest = load_checkpoint(args.checkpoint)
    image = read_image(args.image, model.config.image_size)
    x = torch.from_numpy(image[None]).to(next(model.parameters()).dtype)
    with torch.no_grad():
        bundle = model(x, feed=get_arm(manifest["arm"]).feed)
    stat = 0.0 if bundle.bias is None else float(bundle.bias.double().mean())
    labels, scores, routes = decide([stat], [float(bundle.prob[0])], detector.tau)
    payload = {
        "label": "fake" if labels[0] == 1 else "real",
        "score": float(scores[0]),
        "route": str(routes[0]),
        "bias_statistic": stat,
    }
    print(json.dumps(payload))
    return 0


def cmd_ablate(args) -> int:
    cfg = RunConfig.load(args.config, args.set)
    if args.seeds < 1:
        raise ConfigError("--seeds must be at least 1")
    data = _load_data(args, cfg)
    arms = [a.strip() for a in args.arms.split(",")] if args.arms else list(
        ("no_ae", "ae_no_bias", "ae", "ae_lsa", "ae_lsa_rl", "ae_lsa_be", "ae_lsa_cd", "full")
    )
    for a in arms:
        get_arm(a)
    train_family = args.train_family or cfg.train.family or "splice"
    if train_family not in FAMILIES:
        raise ConfigError(f"unknown family {train_family!r}")
    out = Path(args.out)
    _prepare_out(out, args.force)
    (out / "config.resolved").write_text(cfg.dumps())
    seeds = [cfg.seed + i for i in range(args.seeds)]

    def progress(run):
        log.info("arm %s seed %d: intra %.4f cross %.4f (%.1fs)", run.arm, run.seed, run.intra_auc,
                 run.mean_cross, run.seconds)

    runs = run_ablation_matrix(cfg.model, cfg.loss, cfg.train, data, arms, seeds, train_family=train_family,
                               coverage=cfg.detector.coverage, progress=progress)
    rows = ablation_table(runs)
    columns = list(dict.fromkeys(k for row in rows for k in row))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    (out / "ablation.csv").write_text(buf.getvalue())
    summary = ordering_summary(runs)
    summary.update({
        "arms": arms,
        "seeds": seeds,
        "train_family": train_family,
        "runs": [
            {"arm": r.arm, "seed": r.seed, "intra_auc": r.intra_auc, "cross_auc": r.cross_auc,
             "mean_cross_auc": r.mean_cross, "seconds": r.seconds}
            for r in runs
        ],
    })
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    sys.stdout.write(buf.getvalue())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="benet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def overrides(p):
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--spec", help="key=value file with data.* settings")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    overrides(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one arm and write a checkpoint")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--arm")
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print a metrics report for one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--family")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify one PNG image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="train the ablation matrix and report orderings")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--arms", help="comma-separated arm names (default: all)")
    p.add_argument("--train-family")
    p.add_argument("--force", action="store_true")
    overrides(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except BENetError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("%s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
