from dataclasses import dataclass
from typing import Optional

import pytest

from facedetkit.anchors import AnchorConfig
from facedetkit.config import (
    ConfigError,
    apply_overrides,
    config_hash,
    dump_config,
    from_mapping,
    load_sections,
    read_config,
)


@dataclass(frozen=True)
class Demo:
    n: int = 3
    rate: float = 0.5
    flag: bool = False
    name: str = "x"
    sizes: tuple[int, ...] = (1, 2)
    pair: tuple[float, float] = (0.0, 1.0)
    limit: Optional[float] = None


SCHEMA = {"demo": Demo, "anchors": AnchorConfig}


def test_parse_literals():
    raw = read_config(
        "[demo]\nn = 7\nrate = 1e-3\nflag = yes\nname = runs/a\nsizes = 4, 8\npair = (2, 3.5)\nlimit = 2\n",
        is_text=True,
    )
    d = from_mapping(Demo, raw["demo"], "demo")
    assert d == Demo(7, 1e-3, True, "runs/a", (4, 8), (2.0, 3.5), 2.0)
    assert isinstance(d.pair[0], float)


def test_single_element_tuple():
    d = from_mapping(Demo, {"sizes": "4,"}, "demo")
    assert d.sizes == (4,)
    d = from_mapping(Demo, {"sizes": "4"}, "demo")
    assert d.sizes == (4,)


def test_unknown_key_names_section_and_key():
    with pytest.raises(ConfigError, match=r"demo\.nope"):
        from_mapping(Demo, {"nope": "1"}, "demo")


def test_unknown_section_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        load_sections({"bogus": {}}, SCHEMA)


def test_type_errors_carry_key():
    with pytest.raises(ConfigError, match=r"demo\.n"):
        from_mapping(Demo, {"n": "2.5"}, "demo")
    with pytest.raises(ConfigError, match=r"demo\.flag"):
        from_mapping(Demo, {"flag": "maybe"}, "demo")
    with pytest.raises(ConfigError, match=r"demo\.pair"):
        from_mapping(Demo, {"pair": "1, 2, 3"}, "demo")


def test_validation_errors_become_config_errors():
    with pytest.raises(ConfigError, match="anchors"):
        from_mapping(AnchorConfig, {"strides": "8, 4"}, "anchors")


def test_overrides_and_defaults():
    raw = apply_overrides({"demo": {"n": "1"}}, ["demo.n=5", "anchors.octave_scales=2"])
    out = load_sections(raw, SCHEMA, defaults={"demo": Demo(rate=0.25)})
    assert out["demo"] == Demo(n=5, rate=0.25)
    assert out["anchors"].octave_scales == 2
    with pytest.raises(ConfigError):
        apply_overrides({}, ["noequals"])


def test_dump_roundtrip_and_hash():
    sections = {"demo": Demo(n=9, flag=True, sizes=(5,)), "anchors": AnchorConfig()}
    text = dump_config(sections)
    back = load_sections(read_config(text, is_text=True), SCHEMA)
    assert back == sections
    assert config_hash(back) == config_hash(sections)
    assert len(config_hash(sections)) == 16
    other = dict(sections, demo=Demo(n=10))
    assert config_hash(other) != config_hash(sections)


def test_anchor_config_file(tmp_path):
    p = tmp_path / "a.ini"
    p.write_text("[anchors]\nstrides = 8, 16\naspect_ratios = 1.25,\n")
    cfg = AnchorConfig.from_file(str(p))
    assert cfg.strides == (8, 16) and cfg.aspect_ratios == (1.25,)


def test_malformed_file():
    with pytest.raises(ConfigError):
        read_config("no section header\n", is_text=True)
