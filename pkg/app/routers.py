import argparse

from app.handlers import Router
from app.handlers.analyze import analyze_router
from app.handlers.build import build_router
from app.handlers.lattice import lattice_router
from app.handlers.perturb import perturb_router
from app.handlers.profile import profile_router
from app.handlers.report import report_router
from app.handlers.strata import strata_router

ROUTERS = (
    strata_router,
    lattice_router,
    build_router,
    perturb_router,
    analyze_router,
    profile_router,
    report_router,
)


def setup_routers(subparsers: argparse._SubParsersAction) -> dict[str, Router]:
    routes = {}
    for router in ROUTERS:
        parser = subparsers.add_parser(router.name, help=router.help)
        parser.set_defaults(verb=router.name)
        routes[router.name] = router
    return routes
