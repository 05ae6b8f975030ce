import logging
import platform
import time

import numpy as np
import scipy

from app import __version__
from app.config import ScenarioConfig
from app.handlers import Router
from app.lexicon.lexicon import LEXICON_MSG
from app.storage.artifacts import exists, load_json, save_columns, save_json, save_text
from app.storage.schemas import validate_report

logger = logging.getLogger(__name__)


def _optional(out, name: str):
    return load_json(out, name) if exists(out, name) else None


def _strata_summary(strata: dict) -> dict:
    heights = [s["height"] for s in strata["strata"]]
    return {"artifact": "strata.json", "count": len(heights), "heights": heights, "max_index": strata["max_index"]}


def _lattice_summary(lattices: dict) -> dict:
    entries = lattices["lattices"]
    return {
        "artifact": "lattices.json",
        "sizes": [e["lattice"]["size"] if e["lattice"] else 0 for e in entries],
        "families": [e["lattice"]["family_count"] if e["lattice"] else 0 for e in entries],
        "property_p_ok": lattices["all_ok"],
        "point_files": [e["artifact"] for e in entries if e["artifact"]],
    }


def _schedule_summary(schedule: dict) -> dict:
    last = [s["log10_eta"][-1] for s in schedule["strata"]]
    return {
        "artifact": "schedule.json",
        "p": schedule["p"],
        "strata": [
            {"stratum": s["stratum"], "height": s["height"], "R": s["R"], "D": s["D"], "steps": s["steps"]}
            for s in schedule["strata"]
        ],
        "final_log10_eta": min(last),
        "sweep_constant": schedule["sweep"]["constant"],
    }


def _plot_files(out, schedule: dict | None, profile: dict | None) -> list[str]:
    plots = []
    if schedule is not None:
        stratum, step, log10_eta = [], [], []
        for s in schedule["strata"]:
            for i, value in enumerate(s["log10_eta"]):
                stratum.append(s["stratum"])
                step.append(i)
                log10_eta.append(value)
        save_columns(out, "schedule.dat", ["stratum", "step", "log10_eta"], [stratum, step, log10_eta])
        rows = schedule["sweep"]["rows"]
        save_columns(out, "sweep.dat", ["D", "scaled"], [[r["D"] for r in rows], [r["scaled"] for r in rows]])
        plots += ["schedule.dat", "sweep.dat"]
    if profile is not None:
        rows = profile["rows"]
        names = ["s", "grad", "dbar", "grad_dbar"]
        save_columns(out, "profile.dat", ["k", *names], [[r["k"] for r in rows]] + [[r[n] for r in rows] for n in names])
        plots.append("profile.dat")
    return plots


def _text(report: dict) -> str:
    scenario = report["scenario"]
    strata = report["strata"]
    lines = [
        LEXICON_MSG["report_header"].format(**scenario),
        LEXICON_MSG["strata_line"].format(count=strata["count"], heights=sorted(set(strata["heights"])), artifact=strata["artifact"]),
    ]
    lattices = report["lattices"]
    if lattices:
        status = LEXICON_MSG["ok"] if lattices["property_p_ok"] else LEXICON_MSG["failed"]
        lines.append(LEXICON_MSG["lattices_line"].format(sizes=lattices["sizes"], status=status, artifact=lattices["artifact"]))
    else:
        lines.append(LEXICON_MSG["missing_line"].format(section="Lattices"))
    schedule = report["schedule"]
    if schedule:
        lines.append(
            LEXICON_MSG["schedule_line"].format(p=schedule["p"], log10_eta=schedule["final_log10_eta"], artifact=schedule["artifact"])
        )
    else:
        lines.append(LEXICON_MSG["missing_line"].format(section="Schedule"))
    certificate = report["certificate"]
    if certificate:
        lines.append(LEXICON_MSG["certificate_line"].format(**certificate))
    else:
        lines.append(LEXICON_MSG["missing_line"].format(section="Certificate"))
    zeros = report["zero_set"]
    if zeros:
        lines.append(LEXICON_MSG["zero_set_line"].format(**zeros))
        if zeros["winding"] is not None:
            lines.append(LEXICON_MSG["winding_line"].format(**zeros))
        status = LEXICON_MSG["ok"] if zeros["symplectic_ok"] else LEXICON_MSG["failed"]
        lines.append(LEXICON_MSG["symplectic_line"].format(status=status, margin=float(zeros["symplectic_margin"])))
    else:
        lines.append(LEXICON_MSG["missing_line"].format(section="Zero set"))
    morse = report["morse"]
    if morse:
        status = LEXICON_MSG["ok"] if morse["index_bound_ok"] else LEXICON_MSG["failed"]
        lines.append(LEXICON_MSG["morse_line"].format(count=morse["count"], indices=morse["indices"], status=status))
    profile = report["profile"]
    if profile:
        lines.append(
            LEXICON_MSG["profile_line"].format(ks=profile["k_list"], exponent=profile["dbar_exponent"], artifact=profile["artifact"])
        )
    lines.append("Timings:")
    lines.extend(LEXICON_MSG["timing_line"].format(name=k, seconds=v) for k, v in sorted(report["timings"].items()))
    return "\n".join(lines) + "\n"


def cmd_report(config: ScenarioConfig) -> dict:
    started = time.perf_counter()
    out = config.output_dir()
    strata = load_json(out, "strata.json")
    lattices = _optional(out, "lattices.json")
    schedule = _optional(out, "schedule.json")
    certificate = _optional(out, "certificate.json")
    analysis = _optional(out, "analysis.json")
    profile = _optional(out, "profile.json")
    section = _optional(out, "section_initial.json")

    timings = {}
    for name, data in (
        ("strata", strata),
        ("lattice", lattices),
        ("build", section),
        ("perturb", _optional(out, "perturb.json")),
        ("analyze", analysis),
        ("profile", profile),
    ):
        if data is not None:
            timings[name] = float(sum(data.get("timings", {}).values()))

    report = {
        "scenario": {"preset": config.preset, "k": config.k, "mode": section["mode"] if section else config.mode},
        "strata": _strata_summary(strata),
        "lattices": _lattice_summary(lattices) if lattices else None,
        "schedule": _schedule_summary(schedule) if schedule else None,
        "certificate": {"artifact": "certificate.json", "status": certificate["status"], "eta": certificate["eta"]} if certificate else None,
        "zero_set": None,
        "morse": None,
        "profile": None,
        "timings": timings,
        "versions": {
            "app": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    if analysis:
        zeros = analysis["zero_set"]
        report["zero_set"] = {
            "artifact": "zeros.csv",
            "points": zeros["count"],
            "components": zeros["connected_components"],
            "orbits": zeros["orbit_count"],
            "winding": zeros["winding_count"],
            "invariance_defect": zeros["invariance_defect"],
            "symplectic_ok": analysis["symplectic"]["ok"],
            "symplectic_margin": analysis["symplectic"]["min_margin"],
        }
        morse = analysis["morse"]
        report["morse"] = {
            "artifact": "analysis.json",
            "count": morse["count"],
            "indices": sorted({c["index"] for c in morse["critical_points"] if not c["degenerate"]}),
            "index_bound_ok": morse["index_bound_ok"],
            "tube_radius": morse["tube_radius"],
        }
    if profile:
        report["profile"] = {
            "artifact": "profile.csv",
            "k_list": profile["k_list"],
            "exponents": profile["exponents"],
            "dbar_exponent": profile["exponents"]["dbar"],
        }
    report["plots"] = _plot_files(out, schedule, profile)
    report["timings"]["report"] = time.perf_counter() - started
    validate_report(report)
    save_json(out, "report.json", report)
    save_text(out, "report.txt", _text(report))
    return report


report_router = Router("report", cmd_report)
