import logging
import time

from app.config import ScenarioConfig
from app.handlers import Router
from app.storage.artifacts import save_json, save_text
from app.utils.scenario import scenario_domain

logger = logging.getLogger(__name__)


def cmd_strata(config: ScenarioConfig) -> dict:
    started = time.perf_counter()
    out = config.output_dir()
    _, poset = scenario_domain(config)
    data = poset.to_json()
    data["timings"] = {"strata": time.perf_counter() - started}
    save_json(out, "strata.json", data)
    save_text(out, "strata.dot", poset.to_dot())
    logger.info(f"Strata: {len(poset)} strata, heights {sorted(set(poset.heights()))}")
    return data


strata_router = Router("strata", cmd_strata)
