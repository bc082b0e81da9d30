import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from errors import ValidationError

FAMILIES = ("AFW", "RAFW", "SGG")
# smallest admissible k of each family, and the degrees this code implements
MIN_DEGREE = {"AFW": 1, "RAFW": 2, "SGG": 1}
IMPLEMENTED_DEGREES = {"AFW": (2, 3), "RAFW": (2, 3), "SGG": (2, 3)}

GEOMETRIES = ("lshape", "cook", "unit_square")


class FamilyConfig(BaseModel):
    """Element family and degree index k, with the degrees of every space derived from them."""

    model_config = ConfigDict(frozen=True)

    family: str
    k: int

    @field_validator("family", mode="before")
    @classmethod
    def validate_family(cls, v):
        name = str(v).upper()
        if name not in FAMILIES:
            raise ValueError(f"Unknown element family '{v}', expected one of {FAMILIES}")
        return name

    @model_validator(mode="after")
    def validate_degree(self):
        if self.k < MIN_DEGREE[self.family]:
            raise ValueError(f"{self.family} requires k >= {MIN_DEGREE[self.family]}, got k={self.k}")
        if self.k not in IMPLEMENTED_DEGREES[self.family]:
            raise ValueError(f"{self.family} is implemented for k in {IMPLEMENTED_DEGREES[self.family]}, got k={self.k}")
        return self

    @property
    def label(self) -> str:
        return f"{self.family}{self.k}"

    @property
    def displacement_degree(self) -> int:
        return self.k - 1

    @property
    def rotation_degree(self) -> int:
        return self.k if self.family == "SGG" else self.k - 1

    @property
    def neumann_degree(self) -> int:
        """Degree l of the edge projection Q_E; equals the degree of the edge moments."""
        return self.k - 1 if self.family == "RAFW" else self.k

    @property
    def post_degree(self) -> int:
        return self.k + 1 if self.family == "SGG" else self.k

    @property
    def has_bubbles(self) -> bool:
        return self.family == "SGG"

    @property
    def quad_order(self) -> int:
        # covers products of two degree k+2 stresses
        return 2 * self.k + 6


class CaseConfig(BaseModel):
    """One benchmark case: geometry, discretization, material, study type and outputs."""

    model_config = ConfigDict(frozen=True)

    name: Optional[str] = None
    geometry: str = "lshape"
    resolution: int = 1
    family: str = "SGG"
    k: int = 2
    E: float = 1.0
    nu: float = 0.3
    mode: Literal["plane_strain", "plane_stress"] = "plane_strain"
    estimator: Literal["eta", "eta_inc"] = "eta"
    marking_fraction: float = 0.25
    uniform: bool = False
    max_dofs: Optional[int] = 200000
    max_iters: Optional[int] = None
    out_dir: str = "out"
    record_timings: bool = False
    grading_levels: int = 4
    cook_load: float = 1e-3

    @field_validator("geometry")
    @classmethod
    def validate_geometry(cls, v):
        if v not in GEOMETRIES:
            raise ValueError(f"Unknown geometry '{v}', expected one of {GEOMETRIES}")
        return v

    @field_validator("family", mode="before")
    @classmethod
    def validate_family(cls, v):
        return str(v).upper()

    @field_validator("resolution")
    @classmethod
    def validate_resolution(cls, v):
        if v < 1:
            raise ValueError("resolution must be >= 1")
        return v

    @field_validator("marking_fraction")
    @classmethod
    def validate_marking_fraction(cls, v):
        if not 0 < v <= 1:
            raise ValueError("marking_fraction must be in (0, 1]")
        return v

    @field_validator("E")
    @classmethod
    def validate_young(cls, v):
        if v <= 0:
            raise ValueError("Young modulus E must be positive")
        return v

    @field_validator("nu")
    @classmethod
    def validate_poisson(cls, v):
        if not 0 <= v < 0.5:
            raise ValueError("Poisson ratio nu must satisfy 0 <= nu < 0.5")
        return v

    @model_validator(mode="after")
    def validate_case(self):
        try:
            FamilyConfig(family=self.family, k=self.k)
        except ValueError as e:
            raise ValueError(f"invalid family/degree: {e}")
        if self.max_dofs is None and self.max_iters is None:
            raise ValueError("one of max_dofs or max_iters is required")
        if self.max_dofs is not None and self.max_dofs <= 0:
            raise ValueError("max_dofs must be positive")
        if self.max_iters is not None and self.max_iters <= 0:
            raise ValueError("max_iters must be positive")
        if self.geometry == "lshape" and self.mode != "plane_strain":
            raise ValueError("the L-shape exact solution is a plane strain solution")
        return self

    @property
    def family_config(self) -> FamilyConfig:
        return FamilyConfig(family=self.family, k=self.k)

    @property
    def case_name(self) -> str:
        if self.name:
            return self.name
        study = "uniform" if self.uniform else self.estimator
        return f"{self.geometry}_{self.family}{self.k}_nu{self.nu:g}_{study}"


class SolverSettings(BaseSettings):
    """Process-wide numerical knobs; read from WEAKSYM_* environment variables or a .env file."""

    model_config = SettingsConfigDict(env_prefix="WEAKSYM_", env_file=".env", extra="ignore")

    log_level: str = "INFO"
    boundary_quad_order: int = 30
    residual_tol: float = 1e-10
    compatibility_tol: float = 1e-8
    traction_free_tol: float = 1e-8

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v):
        level = v.upper()
        if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"Invalid log level '{v}'")
        return level


@lru_cache(maxsize=1)
def get_settings() -> SolverSettings:
    return SolverSettings()


def parse_case_config(text: str, fmt: str = "json", overrides: Optional[Dict[str, Any]] = None) -> CaseConfig:
    """Parse a case from TOML or JSON text; non-None overrides (CLI flags) win over file values."""
    if fmt == "toml":
        data = tomllib.loads(text)
    elif fmt == "json":
        data = json.loads(text)
    else:
        raise ValidationError(f"Unsupported config format '{fmt}'")
    if "case" in data and isinstance(data["case"], dict):
        data = data["case"]
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return CaseConfig(**data)


def load_case_config(path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None) -> CaseConfig:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"Case file not found: {path}")
    fmt = "toml" if path.suffix.lower() == ".toml" else "json"
    try:
        return parse_case_config(path.read_text(), fmt=fmt, overrides=overrides)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ValidationError(f"Could not parse case file {path}: {e}")


def emit_case_config(cfg: CaseConfig) -> str:
    return cfg.model_dump_json(indent=2)
