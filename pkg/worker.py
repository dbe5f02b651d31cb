#!/usr/bin/env python3
"""
RQ worker for what-if cells enqueued by twin.what_if.
"""
import logging
import sys
from pathlib import Path

from dotenv import load_dotenv
from rq import Worker

sys.path.insert(0, str(Path(__file__).parent))

from redis_conn import default_queue_name, get_redis_conn_or_raise  # noqa: E402

logger = logging.getLogger(__name__)


def run_worker(queue_names=None, burst: bool = False, url: str | None = None) -> bool:
    """
    Serve the given queues until stopped, or until they are empty when burst is set.
    Returns whatever rq reports (True if at least one job was processed).
    """
    queue_names = list(queue_names or [default_queue_name()])
    connection = get_redis_conn_or_raise(url)
    worker = Worker(queue_names, connection=connection)
    logger.info("Starting worker on %s (burst=%s)", ", ".join(queue_names), burst)
    try:
        return bool(worker.work(burst=burst, with_scheduler=False))
    except KeyboardInterrupt:
        logger.info("Worker stopped by user")
        return False


if __name__ == "__main__":
    load_dotenv()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    run_worker(sys.argv[1:] or None)
