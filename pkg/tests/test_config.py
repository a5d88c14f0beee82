import json

import pytest

from gatedcnn.config import (ConfigError, bundled_config_names, layer_plan, parse_config,
                             resolve_config, serialize_config, stage_output_sizes)


class TestParsing:
    def test_bundled_clevr_layout(self):
        cfg = resolve_config("clevr_table4")
        assert cfg.stem.kernel == 3 and cfg.stem.out == 64 and cfg.stem.stride == 2
        assert cfg.stem.maxpool
        assert len(cfg.stages) == 3
        for stage in cfg.stages:
            assert (stage.out, stage.cardinality, stage.width) == (48, 12, 4)
            assert stage.gated
        assert cfg.final_conv is not None and cfg.final_conv.out == 24
        assert cfg.k == 12

    def test_bundled_vqa_layout(self):
        cfg = resolve_config("vqa_table3")
        assert [s.blocks for s in cfg.stages] == [3, 4, 23, 3]
        assert all(s.cardinality == 32 for s in cfg.stages)
        assert [s.out for s in cfg.stages] == [256, 512, 1024, 2048]
        # mid widths are cardinality * width: 128/256/512/1024
        assert [s.cardinality * s.width for s in cfg.stages] == [128, 256, 512, 1024]

    def test_k_exceeds_cardinality(self):
        doc = json.loads(serialize_config(resolve_config("vqa_table3")))
        doc["k"] = 40
        with pytest.raises(ConfigError, match="k exceeds cardinality"):
            parse_config(json.dumps(doc))

    def test_unknown_field_with_path(self):
        doc = json.loads(serialize_config(resolve_config("toy_small")))
        doc["stages"][0]["cardnality"] = 8
        with pytest.raises(ConfigError, match=r"stages\[0\].cardnality: unknown field"):
            parse_config(json.dumps(doc))

    def test_all_violations_reported(self):
        doc = json.loads(serialize_config(resolve_config("toy_small")))
        doc["k"] = 99
        doc["bogus"] = 1
        doc["stem"]["kernel"] = 0
        with pytest.raises(ConfigError) as err:
            parse_config(json.dumps(doc))
        text = str(err.value)
        assert "bogus" in text and "stem.kernel" in text and "k exceeds" in text

    def test_round_trip(self):
        for name in bundled_config_names():
            cfg = resolve_config(name)
            assert parse_config(serialize_config(cfg)) == cfg

    def test_resolve_accepts_path_style_names(self):
        assert resolve_config("configs/toy_small.json").name == "toy_small"

    def test_missing_config_errors(self):
        with pytest.raises(FileNotFoundError):
            resolve_config("no_such_config")


class TestGeometry:
    def test_clevr_stage_output_sizes(self):
        cfg = resolve_config("clevr_table4")
        assert stage_output_sizes(cfg) == [64, 32, 16, 8, 8]

    def test_vqa_stage_output_sizes(self):
        cfg = resolve_config("vqa_table3")
        assert stage_output_sizes(cfg) == [112, 56, 28, 14, 7]

    def test_slim_variant_keeps_vqa_geometry(self):
        cfg = resolve_config("vqa_table3_slim")
        assert stage_output_sizes(cfg) == [112, 56, 28, 14, 7]
        assert [s.blocks for s in cfg.stages] == [3, 4, 23, 3]

    def test_plan_channel_chaining(self):
        cfg = resolve_config("clevr_table4")
        plan = layer_plan(cfg)
        c = None
        for spec in plan:
            if spec.kind == "conv":
                if c is not None:
                    assert spec.c_in == c
                c = spec.c_out
            elif spec.kind == "block":
                assert spec.c_in == c
                c = spec.c_out
            elif spec.kind == "linear":
                assert spec.d_in == c

    def test_shortcut_projection_detection(self):
        cfg = resolve_config("clevr_table4")
        blocks = [s for s in layer_plan(cfg) if s.kind == "block"]
        # 64->48 needs a projection; the stride-2 blocks do as well
        assert [b.has_proj for b in blocks] == [True, True, True]

    def test_coords_add_two_stem_channels(self):
        cfg = resolve_config("toy_small")
        stem = layer_plan(cfg)[0]
        assert stem.c_in == 5
