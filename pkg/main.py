import logging
import sys

from config import LOG_LEVEL
from cli import ClusterRobustCLI

# Configure logging; stdout is reserved for reports
logging.basicConfig(
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    level=getattr(logging, LOG_LEVEL, logging.INFO),
    stream=sys.stderr,
)

logger = logging.getLogger(__name__)


def main(argv=None) -> int:
    return ClusterRobustCLI().run(argv)


if __name__ == "__main__":
    sys.exit(main())
