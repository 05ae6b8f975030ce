import json

import pytest
import yaml

import main
from app.config import load_scenario, settings
from app.errors import ConfigInvalid, MissingUpstreamArtifact
from app.handlers.build import cmd_build
from app.handlers.lattice import cmd_lattice
from app.handlers.profile import cmd_profile
from app.handlers.report import cmd_report
from app.handlers.strata import cmd_strata


@pytest.fixture(autouse=True)
def quiet_logs(tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "LOG_DIR", str(tmp_path / "logs"))


def write_config(tmp_path, **fields):
    path = tmp_path / "scenario.yaml"
    path.write_text(yaml.safe_dump(fields), encoding="utf-8")
    return str(path)


def read(out, name):
    return json.loads((out / name).read_text(encoding="utf-8"))


def test_strata_of_t4(scenario):
    config = scenario(preset="T4_Z2", k=10)
    cmd_strata(config)
    data = read(config.output_dir(), "strata.json")
    assert len(data["strata"]) == 17
    assert (config.output_dir() / "strata.dot").read_text().startswith("digraph strata")


def test_report_needs_strata(scenario):
    with pytest.raises(MissingUpstreamArtifact):
        cmd_report(scenario())


def test_report_after_strata_only(scenario):
    config = scenario()
    cmd_strata(config)
    report = cmd_report(config)
    assert report["strata"]["count"] == 5
    assert report["certificate"] is None
    assert (config.output_dir() / "report.txt").exists()


def test_lattices_cover_t2(scenario):
    data = cmd_lattice(scenario())
    assert data["all_ok"]
    assert [e["stratum"] for e in data["lattices"]] == list(range(5))


def test_build_is_deterministic(scenario, tmp_path):
    first = cmd_build(scenario(out=str(tmp_path / "a")))
    second = cmd_build(scenario(out=str(tmp_path / "b")))
    assert first["terms"] == second["terms"]
    assert first["summary"]["equivariance_defect"] < 1e-8


def test_zero_initial_section_is_empty(scenario):
    data = cmd_build(scenario(initial="zero"))
    assert data["summary"]["terms"] == 0


def test_profile_rows(scenario):
    data = cmd_profile(scenario(preset="C1_Zm_chart", chart_order=3, mode="cutoff", k=100))
    assert [row["k"] for row in data["rows"]] == [25, 50, 100, 200]
    assert (data["exponents"]["dbar"] or 0.0) < 0


def test_config_overrides(tmp_path):
    path = write_config(tmp_path, preset="T2_Z3", k=12)
    config = load_scenario(path, {"out": str(tmp_path / "x"), "jobs": None})
    assert config.k == 12
    assert config.jobs is None
    assert str(config.output_dir()) == str(tmp_path / "x")


@pytest.mark.parametrize(
    "fields",
    [{"k": -1}, {"preset": "T6_Z7"}, {"schedule": {"eta0": 0}}, {"k_list": []}],
)
def test_invalid_configs_exit_with_2(tmp_path, fields):
    path = write_config(tmp_path, **fields)
    with pytest.raises(ConfigInvalid):
        load_scenario(path)
    assert main.main(["--config", path, "--out", str(tmp_path / "run"), "strata"]) == 2


def test_missing_config_file(tmp_path):
    assert main.main(["--config", str(tmp_path / "nope.yaml"), "strata"]) == 2


def test_analyze_without_perturb_fails(tmp_path):
    path = write_config(tmp_path, preset="T2_Z2", out=str(tmp_path / "run"))
    assert main.main(["--config", path, "strata"]) == 0
    assert main.main(["--config", path, "analyze"]) == 4


@pytest.mark.slow
def test_t2_pipeline_end_to_end(tmp_path):
    path = write_config(tmp_path, preset="T2_Z2", k=40, out=str(tmp_path / "run"))
    for verb in ("strata", "lattice", "build"):
        assert main.main(["--config", path, verb]) == 0
    assert main.main(["--config", path, "perturb"]) == 0
    out = tmp_path / "run"
    certificate = read(out, "certificate.json")
    assert certificate["status"] == "certified"
    assert certificate["eta"] > 0
    assert main.main(["--config", path, "analyze"]) == 0
    zeros = read(out, "analysis.json")["zero_set"]
    assert zeros["winding_count"] == zeros["count"] == 40
    assert zeros["invariance_defect"] < 1e-6
    assert main.main(["--config", path, "report"]) == 0
    report = read(out, "report.json")
    assert report["schedule"]["p"] == 3
    assert report["certificate"]["status"] == certificate["status"]
