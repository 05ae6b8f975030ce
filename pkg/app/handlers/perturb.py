import logging
import time

from app.config import ScenarioConfig, settings
from app.errors import TransversalityNotAchieved
from app.geometry.transversality import (
    GlobalizeResult,
    globalize,
    lattice_family_count,
    schedule_violations,
    xalpha_sweep,
)
from app.handlers import Router
from app.storage.artifacts import load_json, save_csv, save_json
from app.utils.scenario import (
    scenario_domain,
    scenario_plan,
    section_from_payload,
    section_payload,
)

logger = logging.getLogger(__name__)


def _save_outcome(out, result: GlobalizeResult, timings: dict) -> dict:
    save_csv(out, "steps.csv", [record.csv_row() for record in result.log])
    save_json(out, "certificate.json", result.certificate.to_json())
    data = result.to_json()
    data["timings"] = timings
    save_json(out, "perturb.json", data)
    return data


def cmd_perturb(config: ScenarioConfig) -> dict:
    started = time.perf_counter()
    out = config.output_dir()
    initial_data = load_json(out, "section_initial.json")
    domain, poset = scenario_domain(config)
    initial = section_from_payload(initial_data, domain)

    schedule, lattices = scenario_plan(config, domain, poset)
    sweep = xalpha_sweep(
        p=config.schedule.p,
        D_values=config.schedule.D_values,
        eta0=config.schedule.eta0,
        R=config.schedule.R,
    )
    save_json(
        out,
        "schedule.json",
        {
            **schedule.to_json(),
            "families": [lattice_family_count(lattice) for lattice in lattices],
            "sweep": sweep,
            "violations": schedule_violations(schedule, poset),
        },
    )
    prepared = time.perf_counter()

    jobs = config.jobs or settings.JOBS
    try:
        result = globalize(
            initial,
            lattices,
            schedule,
            poset,
            local_sample_spacing=config.grids.local_sample_spacing,
            certify_spacing=config.grids.certify_spacing,
            max_refine=config.grids.max_refine,
            jobs=jobs,
        )
    except TransversalityNotAchieved as e:
        partial = getattr(e, "result", None)
        if partial is not None:
            timings = {"prepare": prepared - started, "globalize": time.perf_counter() - prepared}
            _save_outcome(out, partial, timings)
            logger.warning(f"Partial perturbation artifacts saved to {out}")
        raise

    final = section_payload(result.section)
    save_json(out, "section_final.json", final)
    timings = {"prepare": prepared - started, "globalize": time.perf_counter() - prepared}
    return _save_outcome(out, result, timings)


perturb_router = Router("perturb", cmd_perturb)
