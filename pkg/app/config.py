import logging
from pathlib import Path
from typing import List, Literal, Optional

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings

from app.errors import ConfigInvalid

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    LOG_DIR: str = "logs"
    LOG_LEVEL: str = "INFO"
    OUTPUT_DIR: str = "runs"
    JOBS: int = 1
    GROUP_SIZE_CAP: int = 10_000
    SUBGROUP_CAP: int = 256

    class Config:
        env_file = ".env"
        env_file_encoding = "utf-8"
        extra = "ignore"


settings = Settings()


PRESET_NAMES = (
    "T2_Z2",
    "T2_Z3",
    "T2_Z4",
    "T2_Z6",
    "T4_Z2",
    "C2_Z2xZ2_chart",
    "C1_Zm_chart",
)


class ScheduleParams(BaseModel):
    p: int = 3
    eta0: float = 0.5
    R: float = 1.0
    D_max: int = 400
    D_values: List[float] = Field(default_factory=lambda: [5.0, 10.0, 20.0])


class LatticeParams(BaseModel):
    D: float = 5.0
    R: float = 1.0
    grid_step: float = 0.25


class GridParams(BaseModel):
    certify_spacing: float = 0.25
    zero_resolution: float = 0.25
    profile_spacing: float = 0.1
    local_sample_spacing: Optional[float] = None
    max_refine: int = 6
    tube_radius: Optional[float] = None


class ScenarioConfig(BaseModel):
    preset: str = "T2_Z2"
    chart_order: int = 2
    generators: Optional[List[List[List[List[float]]]]] = None
    k: int = 40
    k_list: List[int] = Field(default_factory=lambda: [25, 50, 100, 200])
    mode: Literal["cutoff", "periodized"] = "periodized"
    initial: Literal["zero", "lattice_phases"] = "lattice_phases"
    schedule: ScheduleParams = Field(default_factory=ScheduleParams)
    lattice: LatticeParams = Field(default_factory=LatticeParams)
    grids: GridParams = Field(default_factory=GridParams)
    chart_radius: float = 0.5
    seed: int = 0
    out: Optional[str] = None
    jobs: Optional[int] = None

    @field_validator("preset")
    @classmethod
    def _known_preset(cls, value: str) -> str:
        if value not in PRESET_NAMES:
            raise ValueError(f"unknown preset '{value}', expected one of {', '.join(PRESET_NAMES)}")
        return value

    @model_validator(mode="after")
    def _positive_numbers(self):
        numbers = {
            "k": self.k,
            "chart_order": self.chart_order,
            "schedule.p": self.schedule.p,
            "schedule.eta0": self.schedule.eta0,
            "schedule.R": self.schedule.R,
            "schedule.D_max": self.schedule.D_max,
            "lattice.D": self.lattice.D,
            "lattice.R": self.lattice.R,
            "lattice.grid_step": self.lattice.grid_step,
            "chart_radius": self.chart_radius,
            "grids.certify_spacing": self.grids.certify_spacing,
            "grids.zero_resolution": self.grids.zero_resolution,
            "grids.profile_spacing": self.grids.profile_spacing,
        }
        numbers.update({f"k_list[{i}]": v for i, v in enumerate(self.k_list)})
        numbers.update({f"schedule.D_values[{i}]": v for i, v in enumerate(self.schedule.D_values)})
        bad = [name for name, value in numbers.items() if not value > 0]
        if bad:
            raise ValueError(f"fields must be positive: {', '.join(bad)}")
        if not self.k_list:
            raise ValueError("k_list must not be empty")
        return self

    def output_dir(self) -> Path:
        return Path(self.out or settings.OUTPUT_DIR)


def load_scenario(path: str | Path, overrides: Optional[dict] = None) -> ScenarioConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    except FileNotFoundError as e:
        raise ConfigInvalid(f"Config file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigInvalid(f"Config file {path} is not valid YAML: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigInvalid(f"Config file {path} must contain a mapping")
    raw.update({key: value for key, value in (overrides or {}).items() if value is not None})
    try:
        config = ScenarioConfig(**raw)
    except ValidationError as e:
        raise ConfigInvalid(f"Config file {path} failed validation: {e}") from e
    logger.info(f"Loaded scenario config from {path} (preset={config.preset}, k={config.k})")
    return config
