import json

import numpy as np
import pytest

from mmrag.fusion import FusionConfig
from mmrag.gateway import Gateway, GatewayConfig, GatewayError, StubModels
from mmrag.kb import (
    KbBuildConfig,
    RawSection,
    SectionClass,
    build_kb,
    classify_section,
    parse_sections,
    section_text_for,
    write_sidecar,
)


def section(**kw):
    base = dict(article_id="A1", article_title="Tower", article_abstract="A tall tower.",
                section_id="s1", section_title="History", text=" ".join(["word"] * 100),
                image_ref="img://a1/s1", entity_id="E1")
    base.update(kw)
    return base


def line(**kw):
    return json.dumps(section(**kw))


@pytest.fixture
def gateway():
    return Gateway(GatewayConfig(stub_seed=0), text_dim=16, image_dim=16)


FCFG = FusionConfig(d_vis=16, d_text=16)


@pytest.mark.parametrize("kw, expected", [
    ({}, SectionClass.PASSTHROUGH),
    ({"text": "short text"}, SectionClass.SUBSTITUTE_ABSTRACT),
    ({"section_title": "References"}, SectionClass.SUBSTITUTE_ABSTRACT),
    ({"section_title": " See Also "}, SectionClass.SUBSTITUTE_ABSTRACT),
    ({"text": " ".join(["w"] * 513)}, SectionClass.SUMMARIZE),
    ({"text": " ".join(["w"] * 512)}, SectionClass.PASSTHROUGH),
    ({"text": " ".join(["w"] * 30)}, SectionClass.PASSTHROUGH),
    ({"text": " ".join(["w"] * 29)}, SectionClass.SUBSTITUTE_ABSTRACT),
])
def test_classification_thresholds(kw, expected):
    assert classify_section(RawSection(**section(**kw)), KbBuildConfig()) is expected


def test_section_text_routes(gateway):
    cfg = KbBuildConfig()
    assert section_text_for(RawSection(**section(text="tiny")), cfg, gateway) == "A tall tower."
    long = RawSection(**section(text=" ".join(f"t{i}" for i in range(600))))
    summary = section_text_for(long, cfg, gateway)
    assert summary.startswith("Summary: t0 t1")
    plain = RawSection(**section())
    assert section_text_for(plain, cfg, gateway) == plain.text


def test_config_validation():
    with pytest.raises(ValueError):
        KbBuildConfig(summary_threshold_tokens=10, low_info_min_tokens=20)
    assert "references" in KbBuildConfig(blocklist_titles={"  REFERENCES "}).blocklist_titles


def test_parse_reports_malformed_lines():
    lines = [line(), "{not json", json.dumps({"article_id": "A"}), "", line(section_id=7), line(section_id="s2")]
    parsed, diags = parse_sections(lines)
    assert [n for n, _ in parsed] == [1, 6]
    assert [d.line for d in diags] == [2, 3, 5]


def test_build_sorts_and_numbers_entries(gateway):
    lines = [line(article_id="B", section_id="s1", image_ref="i1"),
             line(article_id="A1", section_id="s2", image_ref="i2"),
             "garbage",
             line(article_id="A1", section_id="s1", image_ref="i3")]
    entries, diags = build_kb(lines, KbBuildConfig(), gateway, FCFG)
    assert [(e.entry_id, e.article_id, e.section_id) for e in entries] == [
        (0, "A1", "s1"), (1, "A1", "s2"), (2, "B", "s1")]
    assert [d.line for d in diags] == [3]
    for e in entries:
        assert e.vector.shape == (32,)
        assert np.linalg.norm(e.vector[:16]) == pytest.approx(1.0)


def test_build_is_deterministic(gateway):
    lines = [line(section_id=f"s{i}", image_ref=f"img://{i}") for i in range(5)]
    a, _ = build_kb(lines, KbBuildConfig(), gateway, FCFG)
    b, _ = build_kb(lines, KbBuildConfig(), Gateway(GatewayConfig(stub_seed=0), text_dim=16, image_dim=16), FCFG)
    assert all(np.array_equal(x.vector, y.vector) for x, y in zip(a, b))


class FlakyGateway(Gateway):
    def embed_image(self, image_ref):
        if "bad" in image_ref:
            raise GatewayError("image encoder down", 3)
        return super().embed_image(image_ref)


def test_gateway_failure_skips_section():
    gw = FlakyGateway(GatewayConfig(), text_dim=16, image_dim=16)
    lines = [line(section_id="s1"), line(section_id="s2", image_ref="img://bad")]
    entries, diags = build_kb(lines, KbBuildConfig(), gw, FCFG)
    assert [e.section_id for e in entries] == ["s1"]
    assert diags[0].line == 2 and "image encoder down" in diags[0].message


def test_sidecar(tmp_path, gateway):
    entries, _ = build_kb([line()], KbBuildConfig(), gateway, FCFG)
    write_sidecar(entries, tmp_path / "side.jsonl")
    row = json.loads((tmp_path / "side.jsonl").read_text())
    assert row["entry_id"] == 0 and row["entity_id"] == "E1"
