import logging
import time

import numpy as np

from app.config import ScenarioConfig
from app.geometry.bundle_sections import asymptotic_profile, cutoff_gradient_bound, peak_bounds, peak_section
from app.handlers import Router
from app.presets import build_domain, section_mode
from app.storage.artifacts import save_csv, save_json

logger = logging.getLogger(__name__)


def cmd_profile(config: ScenarioConfig) -> dict:
    started = time.perf_counter()
    out = config.output_dir()
    base = build_domain(config)
    mode = section_mode(config, base)
    origin = np.zeros(base.n, dtype=complex)

    def builder(k: int):
        return peak_section(build_domain(config, k), origin, k, mode)

    profile = asymptotic_profile(builder, config.k_list, spacing=config.grids.profile_spacing)
    bounds = peak_bounds(builder(config.k), origin)
    save_csv(out, "profile.csv", profile["rows"])
    data = {
        "mode": mode,
        "k_list": list(config.k_list),
        "rows": profile["rows"],
        "exponents": profile["exponents"],
        "peak_bounds": {"k": config.k, **bounds},
        "grad_bounds": {str(k): cutoff_gradient_bound(k) for k in config.k_list} if mode == "cutoff" else None,
        "artifact": "profile.csv",
        "timings": {"profile": time.perf_counter() - started},
    }
    save_json(out, "profile.json", data)
    logger.info(f"Profile over k={config.k_list}: dbar exponent {profile['exponents']['dbar']}")
    return data


profile_router = Router("profile", cmd_profile)
