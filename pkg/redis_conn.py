# redis_conn.py
"""
Redis + RQ helpers for fanning what-if cells out to workers.
Exports:
  - get_redis_url()
  - get_redis_conn_or_raise()
  - get_queue(name)
  - queue_or_none(name)   (None when Redis is not configured or unreachable)
"""

import logging
import os

from redis import RedisError, from_url
from rq import Queue

logger = logging.getLogger(__name__)

DEFAULT_QUEUE = "whatif"


def get_redis_url():
    """Return the REDIS_URL env var (None if missing)."""
    url = os.getenv("REDIS_URL")
    return url.strip() if url else None


def default_queue_name() -> str:
    return os.getenv("AQUAMESH_QUEUE", DEFAULT_QUEUE).strip() or DEFAULT_QUEUE


def get_redis_conn_or_raise(url: str | None = None):
    """Create and return a verified Redis connection."""
    url = url or get_redis_url()
    if not url:
        raise RuntimeError("REDIS_URL not set in environment.")
    try:
        r = from_url(url, decode_responses=False)
        r.ping()
        logger.info("Connected to Redis at %s", url)
        return r
    except RedisError as e:
        logger.error("Redis connection failed: %s", e)
        raise


def get_queue(name: str | None = None, url: str | None = None) -> Queue:
    """Return an RQ Queue bound to a verified Redis connection."""
    return Queue(name or default_queue_name(), connection=get_redis_conn_or_raise(url))


def queue_or_none(name: str | None = None, url: str | None = None) -> Queue | None:
    """Like get_queue, but falls back to None so callers can evaluate in-process."""
    if not (url or get_redis_url()):
        return None
    try:
        return get_queue(name, url)
    except (RuntimeError, RedisError) as e:
        logger.warning("Redis unavailable, evaluating in-process: %s", e)
        return None
