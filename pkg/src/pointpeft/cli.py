"""``pointpeft`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 failed
numerical check.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint as ckpt
from . import harness as H
from .config import ConfigError, RunConfig, load_config
from .data import manifest_checksum, read_dataset, synth_dataset, write_dataset
from .peft import METHODS, PriorBank, build_prior_bank

log = logging.getLogger("pointpeft")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="run seed (overrides config)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--checkpoint", help="input checkpoint")
    p.add_argument("--method", choices=METHODS, help="PEFT method (overrides config)")
    p.add_argument("--bank", help="prior bank file")
    p.add_argument("--data", help="dataset directory (overrides config 'dataset')")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--quiet", action="store_true", help="suppress progress lines")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointpeft", description="Parameter-efficient fine-tuning for point clouds")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic dataset")
    _shared(p)
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")

    p = sub.add_parser("pretrain", help="masked-autoencoder pre-training")
    _shared(p)

    p = sub.add_parser("build-bank", help="frozen-feature prior bank over the training split")
    _shared(p)

    p = sub.add_parser("finetune", help="fine-tune with one method")
    _shared(p)

    p = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint")
    _shared(p)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--dump-responses", metavar="DIR", help="write per-point response and prompt attention CSVs")

    p = sub.add_parser("audit", help="count parameters and verify closed forms")
    _shared(p)
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")

    p = sub.add_parser("ablate", help="grid sweep of point-peft components")
    _shared(p)
    p.add_argument("--axis", action="append", default=[], metavar="NAME=V1,V2",
                   help=f"sweep axis; one of: {', '.join(H.AXES)}")

    p = sub.add_parser("gradcheck", help="finite-difference check on a tiny float64 model")
    _shared(p)
    return parser


def _config(args) -> RunConfig:
    pairs = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    for flag, key in (("seed", "seed"), ("method", "method"), ("data", "dataset"), ("out", "out")):
        val = getattr(args, flag, None)
        if val is not None:
            pairs[key] = str(val)
    return load_config(args.config, pairs)


def _dataset(cfg: RunConfig) -> dict:
    try:
        return read_dataset(cfg.run.dataset)
    except FileNotFoundError as e:
        raise H.DataError(str(e)) from None


def _backbone(args, cfg: RunConfig) -> dict:
    if not args.checkpoint:
        raise ConfigError("--checkpoint (pre-trained backbone) is required")
    state, enc = H.load_backbone_state(args.checkpoint)
    H.check_encoder(cfg.encoder, enc)
    return state


def _bank(args, cfg: RunConfig) -> PriorBank | None:
    needs = cfg.run.method == "point-peft" and cfg.peft.use_prompt and cfg.peft.use_bank
    if not args.bank:
        if needs:
            raise H.DataError("method point-peft needs a prior bank (--bank)")
        return None
    try:
        return PriorBank.load(args.bank)
    except FileNotFoundError:
        raise H.DataError(f"no such bank file: {args.bank}") from None
    except (ckpt.ContainerError, KeyError) as e:
        raise H.DataError(f"bad bank file {args.bank}: {e}") from None


def cmd_gen_data(args, cfg: RunConfig) -> int:
    r = cfg.run
    train = synth_dataset(r.train_per_class, r.points, r.seed, "train", cfg.encoder.num_classes)
    test = synth_dataset(r.test_per_class, r.points, r.seed, "test", cfg.encoder.num_classes)
    try:
        root = write_dataset(r.dataset if args.out is None else args.out, train, test, force=args.force)
    except FileExistsError as e:
        raise H.DataError(str(e)) from None
    print(json.dumps({"dataset": str(root), "train": len(train), "test": len(test),
                      "manifest_sha256": manifest_checksum(root)}))
    return EXIT_OK


def cmd_pretrain(args, cfg: RunConfig) -> int:
    data = _dataset(cfg)
    model, losses = H.pretrain(cfg, data["train"], log.info)
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    path = ckpt.save(out / "backbone.ckpt", H.backbone_container(
        model, cfg.encoder, {"seed": cfg.run.seed, "pretrain_losses": losses}))
    print(json.dumps({"checkpoint": str(path), "first_loss": losses[0] if losses else None,
                      "last_loss": losses[-1] if losses else None}))
    return EXIT_OK


def cmd_build_bank(args, cfg: RunConfig) -> int:
    state = _backbone(args, cfg)
    data = _dataset(cfg)
    base = H.frozen_backbone(state, cfg.encoder, cfg.run.seed)
    bank = build_prior_bank(base.encoder, data["train"])
    path = Path(args.bank) if args.bank else Path(cfg.run.out) / "bank.ckpt"
    path.parent.mkdir(parents=True, exist_ok=True)
    bank.save(path)
    print(json.dumps({"bank": str(path), "rows": int(bank.features.shape[0]), "fingerprint": bank.fingerprint}))
    return EXIT_OK


def cmd_finetune(args, cfg: RunConfig) -> int:
    state = _backbone(args, cfg)
    bank = _bank(args, cfg)
    data = _dataset(cfg)
    res = H.finetune(cfg, state, data, bank, cfg.run.out, log.info)
    print(json.dumps({"method": cfg.run.method, "best_accuracy": res.best_accuracy, "best_epoch": res.best_epoch,
                      "final_accuracy": res.final_accuracy, "trainable_params": res.counts["trainable"],
                      "ratio": res.counts["ratio"], "out": cfg.run.out}))
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    if not args.checkpoint:
        raise ConfigError("--checkpoint (fine-tuned) is required")
    model, run_cfg = H.load_finetuned(args.checkpoint)
    data = _dataset(cfg)
    clouds = data[args.split]
    loss, acc = H.evaluate(model, clouds, cfg.run.batch_size)
    report = {"split": args.split, "samples": len(clouds), "loss": loss, "accuracy": acc}
    if args.dump_responses:
        report.update(H.dump_responses(model, clouds, args.dump_responses, cfg.run.batch_size))
    print(json.dumps(report))
    return EXIT_OK


def cmd_audit(args, cfg: RunConfig) -> int:
    if args.preset == "paper":
        paper = H.paper_scale_config()
        cfg = RunConfig(paper.encoder, paper.peft, cfg.run)
    methods = [args.method] if args.method else ["full", "point-peft"]
    reports = [H.audit(cfg, m) for m in methods]
    for rep in reports:
        print(json.dumps(rep))
    return EXIT_OK if all(r["ok"] for r in reports) else EXIT_NUMERIC


def cmd_ablate(args, cfg: RunConfig) -> int:
    axes = H.parse_axes(args.axis)
    H.ablation_cells(cfg, axes)  # validate every cell before training anything
    state = _backbone(args, cfg)
    data = _dataset(cfg)
    bank = _bank(args, RunConfig(cfg.encoder, cfg.peft, replace(cfg.run, method="point-peft")))
    rows = H.ablate(cfg, axes, state, data, bank, cfg.run.out, log.info)
    for row in rows:
        print(json.dumps(row))
    return EXIT_OK if all(r["counts_match"] for r in rows) else EXIT_NUMERIC


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    model, x, labels = H.tiny_gradcheck_model(cfg.run.seed)
    rep = H.gradcheck(model, x, labels)
    print(json.dumps({"checked": rep["checked"], "worst_rel": rep["worst_rel"], "worst_abs": rep["worst_abs"],
                      "failures": rep["failures"][:10], "ok": rep["ok"]}))
    return EXIT_OK if rep["ok"] else EXIT_NUMERIC


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "build-bank": cmd_build_bank,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "audit": cmd_audit,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except H.DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except H.NumericalCheckError as e:
        print(f"numerical check failed: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
