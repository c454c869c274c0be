from __future__ import annotations

import numpy as np
import pytest

from fedmim.config import emit_config, load_config, parse_config, validate_config, write_config
from fedmim.errors import ConfigError


def _diag_fields(text):
    cfg, diags = parse_config(text)
    assert cfg is None
    return {d.field: d for d in diags}


def test_tiny_config_normalizes(tiny_config_text):
    cfg, diags = parse_config(tiny_config_text)
    assert diags == []
    assert cfg.partition.seed == 3
    assert cfg.pretrain.mask_strategy == "random"
    assert cfg.federation.clients_per_round == 2
    assert cfg.model.mlp_ratio == 4.0
    assert cfg.dtype == np.float64
    assert cfg.image_geometry().num_patches == 4
    assert cfg.model_dims().decoder_dim == 8


def test_emit_then_parse_is_idempotent(tiny_config_text):
    cfg, _ = parse_config(tiny_config_text)
    again, diags = parse_config(emit_config(cfg))
    assert diags == []
    assert again == cfg
    assert emit_config(again) == emit_config(cfg)


def test_fed_config_per_stage(tiny_config_text):
    cfg, _ = parse_config(tiny_config_text)
    pre = cfg.fed_config("pretrain")
    ft = cfg.fed_config("finetune")
    assert (pre.stage, pre.method, pre.rounds) == ("pretrain", "mae", 2)
    assert (ft.stage, ft.method) == ("finetune", "supervised")
    assert pre.seed == ft.seed == 3
    assert ft.weight_decay == 0.05


def test_beit_defaults_to_block_masks(tiny_config_text):
    cfg, diags = parse_config(tiny_config_text.replace("method: mae", "method: beit"))
    assert diags == []
    assert cfg.pretrain.mask_strategy == "block"


def test_missing_required_keys():
    fields = _diag_fields("geometry:\n  height: 8\n")
    for key in ("geometry.width", "geometry.patch", "data.classes", "partition.num_clients", "pretrain.method"):
        assert key in fields


def test_unknown_key_has_line_number(tiny_config_text):
    text = tiny_config_text.replace("  dim: 8\n", "  dim: 8\n  dimm: 3\n")
    fields = _diag_fields(text)
    assert fields["model.dimm"].line == 12
    assert "desconhecida" in fields["model.dimm"].message


def test_unknown_section(tiny_config_text):
    fields = _diag_fields(tiny_config_text + "extras:\n  x: 1\n")
    assert "extras" in fields


def test_type_errors(tiny_config_text):
    fields = _diag_fields(tiny_config_text.replace("  seed: 3\n", "  seed: 3\n  threads: true\n"))
    assert "inteiro" in fields["run.threads"].message
    fields = _diag_fields(tiny_config_text.replace("alpha: 1.0", "alpha: muito"))
    assert "partition.alpha" in fields


def test_float_with_exponent_is_accepted(tiny_config_text):
    cfg, diags = parse_config(tiny_config_text.replace("finetune:\n", "finetune:\n  lr: 5e-4\n"))
    assert diags == []
    assert cfg.finetune.lr == pytest.approx(5e-4)


def test_choice_and_range_errors(tiny_config_text):
    fields = _diag_fields(tiny_config_text.replace("method: mae", "method: simclr"))
    assert "pretrain.method" in fields
    fields = _diag_fields(tiny_config_text.replace("mask_ratio: 0.5", "mask_ratio: 1.5"))
    assert "pretrain.mask_ratio" in fields
    fields = _diag_fields(tiny_config_text.replace("alpha: 1.0", "alpha: 0"))
    assert "partition.alpha" in fields


def test_cross_field_errors(tiny_config_text):
    fields = _diag_fields(tiny_config_text.replace("patch: 4", "patch: 3"))
    assert "geometry.patch" in fields
    fields = _diag_fields(tiny_config_text.replace("mask_ratio: 0.5", "mask_ratio: 0.1"))
    assert "degenerada" in fields["pretrain.mask_ratio"].message
    fields = _diag_fields(tiny_config_text.replace("federation:\n", "federation:\n  clients_per_round: 5\n"))
    assert "federation.clients_per_round" in fields
    fields = _diag_fields(tiny_config_text.replace("  heads: 2\n", "  heads: 3\n"))
    assert "model.heads" in fields


def test_yaml_syntax_error():
    cfg, diags = parse_config("run: [unclosed\n")
    assert cfg is None
    assert diags[0].field == "<yaml>"


def test_load_and_write(tmp_path, tiny_config_path):
    cfg = load_config(tiny_config_path)
    out = write_config(cfg, tmp_path / "out" / "config.yaml")
    again, diags = validate_config(out)
    assert diags == [] and again == cfg

    bad = tmp_path / "bad.yaml"
    bad.write_text("geometry: 3\n", encoding="utf-8")
    with pytest.raises(ConfigError) as info:
        load_config(bad)
    assert info.value.diagnostics


def test_overrides(tiny_config_text):
    cfg, _ = parse_config(tiny_config_text)
    changed = cfg.with_overrides(seed=9, out="elsewhere", precision=None)
    assert (changed.run.seed, changed.run.out, changed.run.precision) == (9, "elsewhere", 64)
    assert cfg.with_overrides() is cfg
    assert cfg.replace("partition", alpha=0.5).partition.alpha == 0.5
