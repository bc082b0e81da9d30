import pydantic
import pytest

from config import CaseConfig, FamilyConfig, SolverSettings, emit_case_config, load_case_config, parse_case_config
from errors import ValidationError


def test_family_degrees():
    sgg = FamilyConfig(family="sgg", k=2)
    assert sgg.family == "SGG"
    assert sgg.label == "SGG2"
    assert (sgg.displacement_degree, sgg.rotation_degree, sgg.neumann_degree, sgg.post_degree) == (1, 2, 2, 3)
    assert sgg.has_bubbles

    afw = FamilyConfig(family="AFW", k=3)
    assert (afw.displacement_degree, afw.rotation_degree, afw.neumann_degree, afw.post_degree) == (2, 2, 3, 3)

    rafw = FamilyConfig(family="RAFW", k=2)
    assert rafw.neumann_degree == 1
    assert not rafw.has_bubbles


@pytest.mark.parametrize("family,k", [("XYZ", 2), ("RAFW", 1), ("AFW", 7)])
def test_family_rejects_bad_input(family, k):
    with pytest.raises(pydantic.ValidationError):
        FamilyConfig(family=family, k=k)


def test_case_name_and_defaults():
    cfg = CaseConfig()
    assert cfg.geometry == "lshape"
    assert cfg.max_dofs == 200000
    assert cfg.case_name == "lshape_SGG2_nu0.3_eta"
    assert CaseConfig(geometry="cook", uniform=True, nu=0.4999).case_name == "cook_SGG2_nu0.4999_uniform"


def test_case_validation():
    with pytest.raises(pydantic.ValidationError):
        CaseConfig(nu=0.5)
    with pytest.raises(pydantic.ValidationError):
        CaseConfig(geometry="lshape", mode="plane_stress")
    with pytest.raises(pydantic.ValidationError):
        CaseConfig(max_dofs=None, max_iters=None)
    with pytest.raises(pydantic.ValidationError):
        CaseConfig(geometry="disk")


def test_parse_toml_with_overrides():
    text = """
[case]
geometry = "cook"
family = "afw"
k = 3
nu = 0.4
"""
    cfg = parse_case_config(text, fmt="toml", overrides={"nu": 0.25, "k": None})
    assert cfg.family == "AFW"
    assert cfg.k == 3
    assert cfg.nu == 0.25


def test_load_case_roundtrip(tmp_path):
    cfg = CaseConfig(geometry="unit_square", family="RAFW", k=2, max_iters=3)
    path = tmp_path / "case.json"
    path.write_text(emit_case_config(cfg))
    assert load_case_config(path) == cfg


def test_load_case_errors(tmp_path):
    with pytest.raises(ValidationError):
        load_case_config(tmp_path / "missing.toml")
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ValidationError):
        load_case_config(broken)
    with pytest.raises(ValidationError):
        parse_case_config("{}", fmt="yaml")


def test_settings_from_environment(monkeypatch):
    monkeypatch.setenv("WEAKSYM_BOUNDARY_QUAD_ORDER", "12")
    monkeypatch.setenv("WEAKSYM_LOG_LEVEL", "debug")
    settings = SolverSettings()
    assert settings.boundary_quad_order == 12
    assert settings.log_level == "DEBUG"
