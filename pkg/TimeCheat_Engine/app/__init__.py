import logging

from config import Config

logger = logging.getLogger("app")


def create_cli():
    # ensure logger prints the configured level to the console
    level = getattr(logging, str(Config.LOG_LEVEL).upper(), logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logger.setLevel(level)
    logger.debug("create_cli() initializing")

    from app.tensor import set_default_dtype

    set_default_dtype(Config.DTYPE)

    # Import and register commands
    from .routes_cli import cli

    return cli
