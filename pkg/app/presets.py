import logging
import math
from dataclasses import dataclass
from typing import Callable, Literal, Optional

import numpy as np

from app.config import ScenarioConfig
from app.errors import ConfigInvalid, LatticeNotPreserved
from app.geometry.bundle_sections import Domain, ModelChart, TorusQuotient
from app.geometry.group_rep import FiniteUnitaryAction, build_group

logger = logging.getLogger(__name__)

HEX_SIDE = math.sqrt(2.0 / math.sqrt(3.0))


def square_basis(n: int) -> np.ndarray:
    return np.eye(2 * n)


def hexagonal_basis() -> np.ndarray:
    """Unit-covolume hexagonal periods 1 and e^{i pi/3}, columns in (Re, Im) coordinates."""
    return HEX_SIDE * np.array([[1.0, 0.5], [0.0, math.sqrt(3.0) / 2.0]])


def _root(order: int) -> np.ndarray:
    return np.array([[np.exp(2j * math.pi / order)]])


@dataclass(frozen=True)
class Preset:
    name: str
    kind: Literal["torus", "chart"]
    n: int
    generators: Callable[[int], list]
    period_basis: Optional[Callable[[], np.ndarray]] = None


PRESETS = {
    "T2_Z2": Preset("T2_Z2", "torus", 1, lambda m: [_root(2)], lambda: square_basis(1)),
    "T2_Z3": Preset("T2_Z3", "torus", 1, lambda m: [_root(3)], hexagonal_basis),
    "T2_Z4": Preset("T2_Z4", "torus", 1, lambda m: [_root(4)], lambda: square_basis(1)),
    "T2_Z6": Preset("T2_Z6", "torus", 1, lambda m: [_root(6)], hexagonal_basis),
    "T4_Z2": Preset("T4_Z2", "torus", 2, lambda m: [-np.eye(2, dtype=complex)], lambda: square_basis(2)),
    "C2_Z2xZ2_chart": Preset(
        "C2_Z2xZ2_chart",
        "chart",
        2,
        lambda m: [np.diag([-1.0 + 0j, 1.0]), np.diag([1.0 + 0j, -1.0])],
    ),
    "C1_Zm_chart": Preset("C1_Zm_chart", "chart", 1, lambda m: [_root(m)]),
}


def _custom_generators(config: ScenarioConfig, n: int) -> list:
    mats = []
    for raw in config.generators:
        mat = np.array([[complex(re, im) for re, im in row] for row in raw], dtype=complex)
        if mat.shape != (n, n):
            raise ConfigInvalid(f"Generator of shape {mat.shape} does not act on C^{n}")
        mats.append(mat)
    return mats


def preset_action(config: ScenarioConfig) -> FiniteUnitaryAction:
    preset = PRESETS[config.preset]
    if config.generators:
        generators = _custom_generators(config, preset.n)
    else:
        generators = preset.generators(config.chart_order)
    return build_group(generators, dimension=preset.n)


def build_domain(config: ScenarioConfig, k: Optional[int] = None) -> Domain:
    """Chart or torus quotient for the scenario, with the group built from the preset."""
    preset = PRESETS[config.preset]
    action = preset_action(config)
    k = k or config.k
    if preset.kind == "chart":
        logger.info(f"Preset {preset.name}: chart H x C^{preset.n}, |H| = {action.order}")
        return ModelChart(preset.n, k, action)
    quotient = TorusQuotient(preset.n, action, preset.period_basis(), name=preset.name)
    if not quotient.preserves_lattice():
        raise LatticeNotPreserved(f"Generators of {preset.name} do not preserve the period lattice")
    logger.info(f"Preset {preset.name}: T^{2 * preset.n} / G, |G| = {action.order}")
    return quotient


def section_mode(config: ScenarioConfig, domain: Domain) -> str:
    """Periodized sections only exist on tori; charts use bare Gaussians instead."""
    if isinstance(domain, ModelChart) and config.mode == "periodized":
        return "gaussian"
    if isinstance(domain, TorusQuotient):
        return "periodized"
    return config.mode
