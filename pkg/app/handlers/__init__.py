import logging
import time
from dataclasses import dataclass
from typing import Callable

from app.config import ScenarioConfig
from app.lexicon.lexicon import LEXICON_HELP, LEXICON_MSG

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Router:
    """A CLI verb bound to its command handler."""

    name: str
    handler: Callable[[ScenarioConfig], dict]

    @property
    def help(self) -> str:
        return LEXICON_HELP[self.name]

    def __call__(self, config: ScenarioConfig) -> dict:
        started = time.perf_counter()
        try:
            result = self.handler(config)
        except Exception as e:
            logger.error(LEXICON_MSG["error"].format(verb=self.name, error=e), exc_info=True)
            raise
        logger.info(
            LEXICON_MSG["done"].format(
                verb=self.name, seconds=time.perf_counter() - started, out=config.output_dir()
            )
        )
        return result
