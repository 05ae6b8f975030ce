import logging
import time

from app.config import ScenarioConfig
from app.geometry.lattice import verify_property_p
from app.handlers import Router
from app.storage.artifacts import save_csv, save_json
from app.utils.scenario import scenario_domain, scenario_lattices

logger = logging.getLogger(__name__)


def cmd_lattice(config: ScenarioConfig) -> dict:
    started = time.perf_counter()
    out = config.output_dir()
    domain, poset = scenario_domain(config)
    lattices = scenario_lattices(config, domain, poset)
    built = time.perf_counter()

    entries = []
    for i, lattice in enumerate(lattices):
        if lattice is None:
            entries.append({"stratum": i, "lattice": None, "property_p": None, "artifact": None})
            continue
        name = f"lattice_{i}.csv"
        save_csv(out, name, lattice.csv_rows())
        report = verify_property_p(lattice, grid_step=config.lattice.grid_step, seed=config.seed)
        if not report.ok:
            logger.warning(
                f"Stratum {i}: property (P) fails ({report.violations} violations, {report.uncovered} uncovered)"
            )
        entries.append({"stratum": i, "lattice": lattice.to_json(), "property_p": report.to_json(), "artifact": name})

    data = {
        "D": config.lattice.D,
        "R": config.lattice.R,
        "k": config.k,
        "lattices": entries,
        "all_ok": all(e["property_p"]["covering_ok"] and e["property_p"]["separation_ok"] for e in entries if e["property_p"]),
        "timings": {"build": built - started, "verify": time.perf_counter() - built},
    }
    save_json(out, "lattices.json", data)
    return data


lattice_router = Router("lattice", cmd_lattice)
