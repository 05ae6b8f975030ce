import numpy as np
import pytest

from app.config import ScenarioConfig
from app.geometry.bundle_sections import ModelChart
from app.geometry.group_rep import build_group
from app.presets import build_domain


def cyclic(order: int):
    return build_group([np.array([[np.exp(2j * np.pi / order)]])])


@pytest.fixture
def z2_line():
    return cyclic(2)


@pytest.fixture
def z2_plane():
    return build_group([-np.eye(2, dtype=complex)])


@pytest.fixture
def klein_plane():
    return build_group([np.diag([-1.0 + 0j, 1.0]), np.diag([1.0 + 0j, -1.0])])


@pytest.fixture
def trivial_line():
    return build_group([], dimension=1)


@pytest.fixture
def t2_z2():
    return build_domain(ScenarioConfig(preset="T2_Z2", k=40))


@pytest.fixture
def t4_z2():
    return build_domain(ScenarioConfig(preset="T4_Z2", k=10))


@pytest.fixture
def plain_chart(trivial_line):
    return ModelChart(1, 20, trivial_line)


@pytest.fixture
def scenario(tmp_path):
    def make(**fields) -> ScenarioConfig:
        fields.setdefault("out", str(tmp_path / "run"))
        return ScenarioConfig(**fields)

    return make
