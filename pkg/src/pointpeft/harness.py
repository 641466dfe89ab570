"""Training, evaluation and bookkeeping behind the command-line interface.

Everything here is deterministic given (seed, config, dataset): shuffling,
augmentation and initialisation draw from generators derived from the run
seed, and metrics are written with a fixed key order.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt
from . import geometry as G
from . import tensor as T
from .backbone import EncoderConfig, MAEDecoder, PointTransformer, backbone_param_count, mae_loss
from .config import ConfigError, RunConfig, apply_overrides, dump_config, parse_lines
from .data import PointCloud, augment
from .optim import AdamW, CosineSchedule
from .peft import (PeftConfig, PeftModel, PriorBank, attach_peft, build_prior_bank, count_trainable,
                   peft_param_formula)


class DataError(RuntimeError):
    """Missing or inconsistent data, checkpoints or banks (exit code 3)."""


class NumericalCheckError(RuntimeError):
    """A numerical self-check failed (exit code 4)."""


def _quiet(msg: str) -> None:
    pass


def stack(clouds: list[PointCloud], dtype=np.float32) -> np.ndarray:
    return np.stack([pc.coords for pc in clouds]).astype(dtype)


def batch_slices(n: int, batch_size: int):
    return [slice(lo, min(lo + batch_size, n)) for lo in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# pre-training


def pretrain(cfg: RunConfig, train: list[PointCloud], log: Callable = _quiet):
    """Masked-autoencoder pre-training. Returns (model, per-epoch mean losses)."""
    r = cfg.run
    if not train:
        raise DataError("pretrain: empty training split")
    model = PointTransformer(cfg.encoder, seed=r.seed)
    decoder = MAEDecoder(cfg.encoder, np.random.default_rng([r.seed, 21]), model.dtype)
    named = list(model.encoder.named_parameters("encoder.")) + list(decoder.named_parameters("decoder."))
    spe = math.ceil(len(train) / r.batch_size)
    sched = CosineSchedule(r.pretrain_lr, max(1, r.pretrain_epochs * spe), 0, 0.0)
    opt = AdamW(named, sched, r.weight_decay)
    order_rng = np.random.default_rng([r.seed, 22])
    aug_rng = np.random.default_rng([r.seed, 23])
    mask_rng = np.random.default_rng([r.seed, 24])
    losses = []
    for epoch in range(1, r.pretrain_epochs + 1):
        perm = order_rng.permutation(len(train))
        total = 0.0
        for sl in batch_slices(len(train), r.batch_size):
            batch = [augment(train[i], r.augmentation, aug_rng) for i in perm[sl]]
            loss = mae_loss(model, decoder, stack(batch, model.dtype), mask_rng, r.mask_ratio)
            opt.step(T.grad(loss, opt.params))
            total += float(loss.data) * len(batch)
        losses.append(total / len(train))
        log(f"pretrain epoch {epoch}/{r.pretrain_epochs} loss {losses[-1]:.5f}")
    return model, losses


def backbone_container(model: PointTransformer, cfg: EncoderConfig, fields_: dict | None = None) -> ckpt.Container:
    c = ckpt.Container()
    for name, p in model.named_parameters():
        c.add_tensor(name, p.data, False)
    c.fields["kind"] = "backbone"
    c.fields["encoder"] = json.dumps(_enc_dict(cfg), sort_keys=True)
    for k, v in (fields_ or {}).items():
        c.fields[k] = v if isinstance(v, str) else json.dumps(v)
    return c


def _enc_dict(cfg: EncoderConfig) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def load_backbone_state(path) -> tuple[dict, EncoderConfig]:
    """Encoder weights and shape from a pre-training checkpoint."""
    c = _load_container(path)
    if c.fields.get("kind") != "backbone":
        raise DataError(f"{path} is not a pre-trained backbone checkpoint")
    state = {n[len("encoder."):]: a for n, (a, _) in c.tensors.items() if n.startswith("encoder.")}
    return state, EncoderConfig(**json.loads(c.fields["encoder"]))


def _load_container(path) -> ckpt.Container:
    try:
        return ckpt.load(path)
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    except ckpt.ContainerError as e:
        raise DataError(f"{path}: {e}") from None


def check_encoder(cfg: EncoderConfig, stored: EncoderConfig) -> None:
    if cfg != stored:
        raise ConfigError(f"encoder config does not match the checkpoint: {stored}")


def frozen_backbone(state: dict, cfg: EncoderConfig, seed: int = 0) -> PointTransformer:
    base = PointTransformer(cfg, seed=seed)
    base.encoder.load_state_dict(state)
    return base


# ---------------------------------------------------------------------------
# fine-tuning and evaluation


def evaluate(model, clouds: list[PointCloud], batch_size: int = 32) -> tuple[float, float]:
    """Mean cross-entropy and accuracy; no gradients, no augmentation."""
    if not clouds:
        raise DataError("evaluate: empty split")
    loss_sum, correct = 0.0, 0
    with T.no_grad():
        for sl in batch_slices(len(clouds), batch_size):
            batch = clouds[sl]
            labels = np.array([pc.label for pc in batch])
            logits = model(stack(batch, model.dtype))
            loss_sum += float(T.cross_entropy(logits, labels).data) * len(batch)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
    return loss_sum / len(clouds), correct / len(clouds)


def build_model(cfg: RunConfig, state: dict, bank: PriorBank | None) -> PeftModel:
    base = frozen_backbone(state, cfg.encoder, cfg.run.seed)
    try:
        return attach_peft(base, cfg.run.method, cfg.peft, bank, cfg.run.seed)
    except ValueError as e:
        if "bank" in str(e):
            raise DataError(str(e)) from None
        raise ConfigError(str(e)) from None


@dataclass
class FinetuneResult:
    records: list = field(default_factory=list)
    best_accuracy: float = -1.0
    best_epoch: int = 0
    final_accuracy: float = 0.0
    counts: dict = field(default_factory=dict)
    model: PeftModel | None = None
    checkpoint: bytes = b""


def _record(epoch, split, loss, acc, lr, n_params, wall):
    return {"epoch": epoch, "split": split, "loss": float(loss), "accuracy": float(acc),
            "lr": float(lr), "trainable_params": int(n_params), "wall_seconds": float(wall)}


def finetune(cfg: RunConfig, state: dict, data: dict, bank: PriorBank | None = None,
             out_dir=None, log: Callable = _quiet) -> FinetuneResult:
    """Fine-tune ``cfg.run.method`` on ``data['train']``, testing every epoch.

    Writes ``metrics.jsonl`` and ``best.ckpt`` under ``out_dir`` when given.
    """
    r = cfg.run
    train, test = data["train"], data["test"]
    if not train or not test:
        raise DataError("finetune needs non-empty train and test splits")
    model = build_model(cfg, state, bank)
    counts = count_trainable(model)
    n_params = counts["trainable"]
    spe = math.ceil(len(train) / r.batch_size)
    sched = CosineSchedule(r.lr, r.epochs * spe, r.warmup_epochs * spe, r.min_lr)
    opt = AdamW(model.named_parameters(), sched, r.weight_decay)
    order_rng = np.random.default_rng([r.seed, 101])
    aug_rng = np.random.default_rng([r.seed, 102])
    start_rng = np.random.default_rng([r.seed, 103])
    result = FinetuneResult(counts=counts, model=model)
    meta = {"method": r.method, "config": dump_config(cfg)}

    out = Path(out_dir) if out_dir is not None else None
    metrics = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(meta["config"])
        metrics = open(out / "metrics.jsonl", "w", encoding="utf-8", newline="\n")
    try:
        for epoch in range(1, r.epochs + 1):
            t0 = time.perf_counter()
            perm = order_rng.permutation(len(train))
            loss_sum, correct, lr = 0.0, 0, opt.lr
            for sl in batch_slices(len(train), r.batch_size):
                batch = [augment(train[i], r.augmentation, aug_rng) for i in perm[sl]]
                labels = np.array([pc.label for pc in batch])
                x = stack(batch, model.dtype)
                # random FPS start in training only; evaluation always starts at 0
                logits = model(x, start_rng.integers(0, x.shape[1], size=len(batch)))
                loss = T.cross_entropy(logits, labels)
                lr = opt.step(T.grad(loss, opt.params))
                loss_sum += float(loss.data) * len(batch)
                correct += int((logits.data.argmax(axis=1) == labels).sum())
            train_wall = time.perf_counter() - t0 if r.record_wall_time else 0.0
            test_loss, test_acc = evaluate(model, test, r.batch_size)
            test_wall = time.perf_counter() - t0 if r.record_wall_time else 0.0
            recs = [_record(epoch, "train", loss_sum / len(train), correct / len(train), lr, n_params, train_wall),
                    _record(epoch, "test", test_loss, test_acc, lr, n_params, test_wall)]
            result.records.extend(recs)
            if metrics is not None:
                for rec in recs:
                    metrics.write(json.dumps(rec) + "\n")
                metrics.flush()
            if test_acc > result.best_accuracy:
                result.best_accuracy, result.best_epoch = test_acc, epoch
                fields_ = dict(meta, kind="finetuned", epoch=epoch, test_accuracy=test_acc)
                result.checkpoint = ckpt.dumps(model.to_container(fields_))
                if out is not None:
                    (out / "best.ckpt").write_bytes(result.checkpoint)
            log(f"{r.method} epoch {epoch}/{r.epochs} train_loss {recs[0]['loss']:.4f} "
                f"train_acc {recs[0]['accuracy']:.3f} test_acc {test_acc:.3f}")
        result.final_accuracy = result.records[-1]["accuracy"]
    finally:
        if metrics is not None:
            metrics.close()
    return result


def load_finetuned(path) -> tuple[PeftModel, RunConfig]:
    """Rebuild a fine-tuned model: frozen encoder, bank check, then parameters."""
    c = _load_container(path)
    if c.fields.get("kind") != "finetuned":
        raise DataError(f"{path} is not a fine-tuned checkpoint")
    cfg = apply_overrides(RunConfig(), parse_lines(c.fields["config"]))
    frozen = {n[len("frozen.encoder."):]: a for n, (a, _) in c.tensors.items() if n.startswith("frozen.encoder.")}
    bank = PriorBank.from_container(c) if "bank.features" in c.tensors else None
    model = build_model(cfg, frozen, bank)
    model.load_container(c)
    return model, cfg


# ---------------------------------------------------------------------------
# response dumps


def dump_responses(model: PeftModel, clouds: list[PointCloud], out_dir, batch_size: int = 32) -> dict:
    """Per-point final-block response CSV and prompt-to-token attention CSV.

    A point's response is the L2 norm of the final-block token features
    interpolated onto it from the token centers (inverse distance, 3 nearest).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_points = n_att = 0
    with open(out / "responses.csv", "w", newline="") as fr, open(out / "prompt_attention.csv", "w", newline="") as fa:
        wr, wa = csv.writer(fr, lineterminator="\n"), csv.writer(fa, lineterminator="\n")
        wr.writerow(["sample", "point", "x", "y", "z", "response"])
        M = model.enc_cfg.tokens
        wa.writerow(["sample", "prompt_row"] + [f"token_{j}" for j in range(M)])
        with T.no_grad():
            for sl in batch_slices(len(clouds), batch_size):
                batch = clouds[sl]
                pts = stack(batch, model.dtype)
                model.features(pts)
                feats = G.batch_propagate(model.last_coords, model.last_tokens, pts).data
                norms = np.sqrt((feats.astype(np.float64) ** 2).sum(axis=-1))
                att = model.last_prompt_attention
                for b, pc in enumerate(batch):
                    for i, (x, y, z) in enumerate(pc.coords):
                        wr.writerow([pc.id, i, f"{x:.6f}", f"{y:.6f}", f"{z:.6f}", f"{norms[b, i]:.6f}"])
                        n_points += 1
                    if att is not None:
                        for k, row in enumerate(att[b]):
                            wa.writerow([pc.id, k] + [f"{v:.6f}" for v in row])
                            n_att += 1
    return {"response_rows": n_points, "attention_rows": n_att}


# ---------------------------------------------------------------------------
# parameter audit


def audit(cfg: RunConfig, method: str | None = None) -> dict:
    """Instantiate (no training) and compare counted parameters with closed forms."""
    method = method or cfg.run.method
    base = PointTransformer(cfg.encoder, seed=cfg.run.seed)
    try:
        model = attach_peft(base, method, cfg.peft, None, cfg.run.seed, require_bank=False)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    counts = count_trainable(model)
    formula = peft_param_formula(cfg.encoder, cfg.peft, method)
    bb = backbone_param_count(cfg.encoder)
    backbone_total = sum(bb.values())
    extra = formula["prompts"] + formula["adapter"] if method != "full" else 0
    # frozen coordinates still count toward the total
    if method == "point-peft" and cfg.peft.use_prompt and not cfg.peft.learnable_coords:
        extra += 3 * cfg.peft.prompt_len * (cfg.peft.prompt_depth if cfg.peft.per_block_coords else 1)
    expected_total = backbone_total + extra
    checks = {
        "trainable_matches": counts["trainable"] == formula["total"],
        "groups_match": all(counts["trainable_by_group"][g] == formula[g] for g in counts["trainable_by_group"]),
        "total_matches": counts["total"] == expected_total,
    }
    return {"method": method, "trainable_by_group": counts["trainable_by_group"],
            "total_by_group": counts["total_by_group"], "trainable": counts["trainable"],
            "total": counts["total"], "ratio": counts["ratio"], "closed_form": formula,
            "closed_form_total": expected_total, "checks": checks, "ok": all(checks.values())}


def paper_scale_config(**peft_kw) -> RunConfig:
    """Point-MAE-sized encoder with its PEFT settings (L=6, K=10, N=64, k=16)."""
    enc = EncoderConfig.paper_scale()
    pe = dict(prompt_depth=6, prompt_len=10, adapter_centers=64, adapter_k=16,
              prompt_mlp_dim=8, adapter_mlp_in_dim=16, adapter_mlp_out_dim=16)
    pe.update(peft_kw)
    return RunConfig(enc, PeftConfig(**pe))


# ---------------------------------------------------------------------------
# ablation sweeps

AXES = {
    "prompt": "use_prompt",
    "adapter": "use_adapter",
    "bias": "tune_bias",
    "bank": "use_bank",
    "learnable_coords": "learnable_coords",
    "local_aggregation": "local_aggregation",
    "attention": "attention",
    "shared_attention": "shared_attention",
    "final_mlp": "final_mlp",
    "K": "prompt_len",
    "L": "prompt_depth",
    "position": "adapter_position",
    "adapter_depth": "adapter_depth",
    "pooling": "pooling",
}


def parse_axes(specs: list[str]) -> dict[str, list[str]]:
    """``name=v1,v2`` strings -> ordered {name: values}; names from ``AXES``."""
    axes: dict[str, list[str]] = {}
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(f"axis spec {spec!r} must look like name=v1,v2")
        name, vals = (s.strip() for s in spec.split("=", 1))
        if name not in AXES:
            raise ConfigError(f"invalid axis {name!r}; valid axes: {', '.join(AXES)}")
        values = [v.strip() for v in vals.split(",") if v.strip()]
        if not values:
            raise ConfigError(f"axis {name!r} has no values")
        axes[name] = values
    if not axes:
        raise ConfigError(f"no axes given; valid axes: {', '.join(AXES)}")
    return axes


def ablation_cells(cfg: RunConfig, axes: dict[str, list[str]]) -> list[tuple[dict, RunConfig]]:
    names = list(axes)
    cells = []
    for combo in itertools.product(*(axes[n] for n in names)):
        setting = dict(zip(names, combo))
        cell_cfg = apply_overrides(cfg, {AXES[n]: v for n, v in setting.items()})
        cell_cfg = RunConfig(cell_cfg.encoder, cell_cfg.peft, replace(cell_cfg.run, method="point-peft"))
        cells.append((setting, cell_cfg.validate()))
    return cells


def ablate(cfg: RunConfig, axes: dict[str, list[str]], state: dict, data: dict,
           bank: PriorBank | None, out_dir, log: Callable = _quiet) -> list[dict]:
    """One fine-tune per grid cell; writes ``ablation.csv`` and per-cell metrics."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    cells = ablation_cells(cfg, axes)
    for i, (setting, cell_cfg) in enumerate(cells):
        log(f"cell {i + 1}/{len(cells)}: {setting}")
        res = finetune(cell_cfg, state, data, bank, out / f"cell_{i:03d}", log)
        formula = peft_param_formula(cell_cfg.encoder, cell_cfg.peft, "point-peft")["total"]
        rows.append(dict(setting, cell=i, trainable_params=res.counts["trainable"], closed_form=formula,
                         counts_match=res.counts["trainable"] == formula,
                         best_accuracy=res.best_accuracy, final_accuracy=res.final_accuracy))
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


# ---------------------------------------------------------------------------
# finite-difference gradient check


def tiny_gradcheck_model(seed: int = 0, points: int = 24):
    """Float64 point-peft model with depth 2, D=8, M=6, K=3, N=4, k=3, bank of 8."""
    enc = EncoderConfig(depth=2, dim=8, heads=2, ffn_ratio=2, tokens=6, patch_size=4, num_classes=3,
                        tokenizer_hidden=4, tokenizer_width=8, pos_hidden=4, head_hidden=8)
    pcfg = PeftConfig(prompt_depth=2, prompt_len=3, adapter_centers=4, adapter_k=3,
                      prompt_mlp_dim=4, adapter_mlp_in_dim=4, adapter_mlp_out_dim=4)
    rng = np.random.default_rng([seed, 31])
    clouds = [PointCloud(G.normalize_unit_sphere(rng.standard_normal((points, 3))), i % 3, f"g{i}")
              for i in range(8)]
    base = PointTransformer(enc, seed=seed, dtype=np.float64)
    bank = build_prior_bank(base.encoder, clouds)
    model = attach_peft(base, "point-peft", pcfg, bank, seed)
    # move every zero-initialised tensor off zero so no path is trivially dead
    for _, p in model.named_parameters():
        if p.trainable and not np.any(p.data):
            p.data = rng.normal(0, 0.1, p.shape)
    x = np.stack([pc.coords for pc in clouds[:2]])
    labels = np.array([0, 1])
    return model, x, labels


def gradcheck(model, x, labels, h: float = 1e-5, rel_tol: float = 1e-4, abs_floor: float = 1e-7) -> dict:
    """Compare autodiff with central differences for every trainable scalar."""

    def loss_value():
        with T.no_grad():
            return float(T.cross_entropy(model(x), labels).data)

    named = [(n, p) for n, p in model.named_parameters() if p.trainable]
    loss = T.cross_entropy(model(x), labels)
    grads = T.grad(loss, named)
    worst, worst_abs, failures, checked = 0.0, 0.0, [], 0
    for name, p in named:
        flat = p.data.reshape(-1)
        g = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_value()
            flat[i] = orig - h
            down = loss_value()
            flat[i] = orig
            num = (up - down) / (2 * h)
            diff = abs(num - g[i])
            rel = diff / max(abs(num), abs(g[i]), 1e-300)
            checked += 1
            worst, worst_abs = max(worst, rel), max(worst_abs, diff)
            if diff > abs_floor and rel >= rel_tol:
                failures.append((f"{name}[{i}]", float(g[i]), float(num)))
    return {"checked": checked, "worst_rel": worst, "worst_abs": worst_abs, "failures": failures,
            "ok": not failures}
