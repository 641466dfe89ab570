import json

import numpy as np
import pytest

from pointpeft import harness as H
from pointpeft import tensor as T
from pointpeft.config import ConfigError, RunConfig, apply_overrides
from pointpeft.data import synth_dataset
from pointpeft.nn import Module, Parameter
from pointpeft.peft import build_prior_bank

TINY = {"depth": "2", "dim": "8", "heads": "2", "ffn_ratio": "2", "tokens": "8", "patch_size": "8",
        "num_classes": "3", "tokenizer_hidden": "4", "tokenizer_width": "8", "pos_hidden": "4",
        "head_hidden": "8", "prompt_depth": "1", "prompt_len": "4", "adapter_centers": "4", "adapter_k": "3",
        "epochs": "2", "batch_size": "4", "pretrain_epochs": "3"}


@pytest.fixture(scope="module")
def setup():
    cfg = apply_overrides(RunConfig(), TINY).validate()
    data = {"train": synth_dataset(3, 32, 0, "train", 3), "test": synth_dataset(2, 32, 0, "test", 3)}
    model, losses = H.pretrain(cfg, data["train"])
    bank = build_prior_bank(H.frozen_backbone(model.encoder.state_dict(), cfg.encoder).encoder, data["train"])
    return cfg, data, model.encoder.state_dict(), bank, losses


def test_pretrain_losses(setup):
    losses = setup[4]
    assert len(losses) == 3 and all(v >= 0 for v in losses)


def test_finetune_result_and_reload(setup, tmp_path):
    cfg, data, state, bank, _ = setup
    res = H.finetune(cfg, state, data, bank, tmp_path)
    assert len(res.records) == 4 and res.best_epoch in (1, 2)
    assert res.best_accuracy == max(r["accuracy"] for r in res.records if r["split"] == "test")
    assert all(r["wall_seconds"] == 0.0 for r in res.records)
    model, back_cfg = H.load_finetuned(tmp_path / "best.ckpt")
    assert back_cfg.encoder == cfg.encoder and back_cfg.peft == cfg.peft
    _, acc = H.evaluate(model, data["test"])
    assert acc == res.best_accuracy


def test_wall_time_recorded_when_enabled(setup):
    cfg, data, state, bank, _ = setup
    cfg = apply_overrides(cfg, {"record_wall_time": "true", "epochs": "1"})
    res = H.finetune(cfg, state, data, bank)
    assert all(r["wall_seconds"] > 0 for r in res.records)


def test_training_uses_varied_fps_starts(setup, monkeypatch):
    cfg, data, state, bank, _ = setup
    seen = []
    real = H.PeftModel.__call__

    def spy(self, points, start=0):
        seen.append(np.array(start, copy=True))
        return real(self, points, start)

    monkeypatch.setattr(H.PeftModel, "__call__", spy)
    H.finetune(apply_overrides(cfg, {"epochs": "1"}), state, data, bank)
    train_starts = [s for s in seen if s.ndim == 1]
    assert train_starts and len({int(v) for s in train_starts for v in s}) > 1


def test_checkpoint_kind_checked(setup, tmp_path):
    cfg, data, state, bank, _ = setup
    from pointpeft import checkpoint as ckpt
    from pointpeft.backbone import PointTransformer
    path = ckpt.save(tmp_path / "b.ckpt", H.backbone_container(PointTransformer(cfg.encoder), cfg.encoder))
    with pytest.raises(H.DataError):
        H.load_finetuned(path)
    state2, enc = H.load_backbone_state(path)
    assert enc == cfg.encoder and "blocks.0.attn.q.weight" in state2
    with pytest.raises(ConfigError):
        H.check_encoder(apply_overrides(cfg, {"dim": "16"}).encoder, enc)


def test_full_scale_audit():
    rep = H.audit(H.paper_scale_config(), "point-peft")
    assert rep["ok"] and 20e6 <= rep["total"] <= 23e6 and rep["ratio"] <= 0.05
    full = H.audit(H.paper_scale_config(), "full")
    assert full["ok"] and full["ratio"] == 1.0


def test_axes_parsing():
    axes = H.parse_axes(["prompt=true,false", "K=3,5"])
    assert axes == {"prompt": ["true", "false"], "K": ["3", "5"]}
    with pytest.raises(ConfigError, match="valid axes"):
        H.parse_axes(["colour=red"])
    with pytest.raises(ConfigError):
        H.parse_axes(["prompt"])
    with pytest.raises(ConfigError):
        H.parse_axes([])


def test_ablation_cells_force_point_peft(setup):
    cfg = apply_overrides(setup[0], {"method": "linear"})
    cells = H.ablation_cells(cfg, {"prompt": ["true", "false"], "adapter": ["true", "false"]})
    assert len(cells) == 4
    assert all(c.run.method == "point-peft" for _, c in cells)
    assert cells[3][1].peft.use_prompt is False and cells[3][1].peft.use_adapter is False


class _BrokenGrad(Module):
    """A one-parameter model whose custom op reports twice the true gradient."""

    def __init__(self):
        self.w = Parameter(np.array([[0.3, -0.2], [0.1, 0.4]]))

    def __call__(self, x):
        val = x @ self.w.data
        return T.custom_op(val, (self.w,), lambda g: (2.0 * x.T @ g,))


def test_gradcheck_flags_wrong_gradient():
    x = np.array([[1.0, 2.0], [-1.0, 0.5]])
    rep = H.gradcheck(_BrokenGrad(), x, np.array([0, 1]))
    assert not rep["ok"] and rep["checked"] == 4 and rep["failures"]


def test_gradcheck_tiny_model_passes():
    model, x, y = H.tiny_gradcheck_model(1)
    cfg = model.cfg
    assert (model.enc_cfg.depth, model.enc_cfg.dim, model.enc_cfg.tokens) == (2, 8, 6)
    assert (cfg.prompt_len, cfg.adapter_centers, cfg.adapter_k, model._bank.features.shape[0]) == (3, 4, 3, 8)
    rep = H.gradcheck(model, x, y)
    assert rep["ok"], json.dumps(rep["failures"][:5])


def test_overfit_subset_then_eval_train_split(tmp_path):
    over = {**TINY, "dim": "16", "tokenizer_hidden": "8", "tokenizer_width": "16", "pos_hidden": "8",
            "head_hidden": "32", "num_classes": "4", "batch_size": "16", "method": "full", "lr": "3e-3",
            "epochs": "300", "augmentation": "none", "weight_decay": "0"}
    cfg = apply_overrides(RunConfig(), over).validate()
    train = synth_dataset(4, 32, 0, "train", 4)
    assert len(train) == 16
    from pointpeft.backbone import PointTransformer
    state = PointTransformer(cfg.encoder).encoder.state_dict()
    H.finetune(cfg, state, {"train": train, "test": train}, None, tmp_path)
    model, _ = H.load_finetuned(tmp_path / "best.ckpt")
    first = H.evaluate(model, train)
    assert first[1] == 1.0
    assert H.evaluate(model, train) == first


def test_ablation_grid_sizes_and_isolation():
    cfg = H.paper_scale_config()
    cells = H.ablation_cells(cfg, H.parse_axes(["K=5,10,15", "L=3,6,12"]))
    assert len(cells) == 9
    assert {(c.peft.prompt_len, c.peft.prompt_depth) for _, c in cells} == {
        (k, l) for k in (5, 10, 15) for l in (3, 6, 12)}
    on, off = H.ablation_cells(cfg, {"bank": ["true", "false"]})
    a_on, a_off = H.audit(on[1]), H.audit(off[1])
    assert a_on["trainable_by_group"]["adapter"] == a_off["trainable_by_group"]["adapter"]
    assert a_on["trainable_by_group"]["prompts"] != a_off["trainable_by_group"]["prompts"]
    assert a_on["ok"] and a_off["ok"]


def test_default_ablation_cell_matches_finetune(setup, tmp_path):
    cfg, data, state, bank, _ = setup
    rows = H.ablate(cfg, {"position": ["after"], "adapter_depth": ["0"]}, state, data, bank, tmp_path / "abl")
    H.finetune(cfg, state, data, bank, tmp_path / "ft")
    assert (tmp_path / "abl" / "cell_000" / "metrics.jsonl").read_bytes() == (tmp_path / "ft" / "metrics.jsonl").read_bytes()
    assert (tmp_path / "abl" / "cell_000" / "best.ckpt").read_bytes() == (tmp_path / "ft" / "best.ckpt").read_bytes()
    assert rows[0]["counts_match"]
