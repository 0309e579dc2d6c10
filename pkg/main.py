import logging
import sys

from src.commands import run_command
from src.config_manager import parse_cli
from src.errors import EmulatorError

logging.basicConfig(format="%(asctime)s - %(levelname)s - %(message)s", level=logging.INFO)
logger = logging.getLogger(name="Main")


def main(argv=None) -> int:
    try:
        command, config = parse_cli(argv, "config.yaml")
        logger.info(f"Running '{command}'")
        return run_command(command, config)
    except EmulatorError as e:
        logger.error(f"{type(e).__name__}: {e}")
        diagnostics = getattr(e, "diagnostics", None)
        if diagnostics:
            logger.error(f"Diagnostics: {diagnostics}")
        return e.exit_code
    except KeyboardInterrupt:
        logger.info("Interrupted")
        return 130


if __name__ == "__main__":
    sys.exit(main())
