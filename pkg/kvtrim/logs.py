import logging

from rich.console import Console
from rich.logging import RichHandler

stderr_console = Console(stderr=True)


def configure_logging(level: str = "INFO") -> None:
    """
    Route every kvtrim logger through a single rich handler on stderr. Calling it again only
    changes the level.
    """
    logger = logging.getLogger("kvtrim")
    logger.setLevel(level)
    if not any(isinstance(handler, RichHandler) for handler in logger.handlers):
        logger.addHandler(
            RichHandler(console=stderr_console, show_path=False, rich_tracebacks=False)
        )
    logger.propagate = False
