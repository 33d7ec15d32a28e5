import logging
import os

import psutil

logger = logging.getLogger(__name__)


def get_process_metrics():
    """
    Returns resident memory and thread figures of the running experiment using psutil
    """
    try:
        process = psutil.Process(os.getpid())
        memory = process.memory_info()
        return {
            "rss_mb": round(memory.rss / (1024 * 1024), 2),
            "threads": process.num_threads(),
            "cpu_count": psutil.cpu_count(logical=True) or 1,
        }
    except psutil.Error as e:
        logger.warning("could not read process metrics: %s", e)
        return {"rss_mb": 0.0, "threads": 0, "cpu_count": 1}


def rss_mb():
    return get_process_metrics()["rss_mb"]


def worker_count(requested=None):
    """Worker processes for a run fan-out: `requested`, else every logical CPU."""
    if requested is not None and requested > 0:
        return int(requested)
    return get_process_metrics()["cpu_count"]
