import heapq
import logging
import threading
import time
from collections import namedtuple
from concurrent.futures import ProcessPoolExecutor

from hlq import deterministic_mode
from hlq.utils.sysmetrics import worker_count

logger = logging.getLogger(__name__)

# Runs with the same priority keep their insertion order
Run = namedtuple('Run', ['priority', 'order', 'name', 'function', 'args'])


def _timed(function, *args):
    """Runs in the worker so the duration excludes time spent waiting in the pool."""
    started = time.perf_counter()
    result = function(*args)
    return result, time.perf_counter() - started


class RunQueue:
    """Independent experiment runs (one seed of one ablation cell, say), executed in priority order.

    Every run owns its seed, so results do not depend on whether the queue runs
    sequentially or fans out to worker processes.
    """

    def __init__(self, workers=1):
        self.queue = []  # Priority queue
        self.lock = threading.Lock()
        self.workers = workers
        self.status = {}  # name -> pending / running / done / failed
        self.durations = {}
        self._order = 0

    def add_run(self, name, function, *args, priority=0):
        """Queue `function(*args)`; `function` must be importable when running in worker processes."""
        with self.lock:
            if name in self.status:
                raise ValueError(f"run {name!r} is already queued")
            heapq.heappush(self.queue, Run(priority, self._order, name, function, args))
            self._order += 1
            self.status[name] = "pending"
        logger.debug("queued run %s (priority %d)", name, priority)

    def _mark(self, name, state, seconds=None):
        with self.lock:
            self.status[name] = state
            if seconds is not None:
                self.durations[name] = seconds

    def _drain(self):
        with self.lock:
            runs = []
            while self.queue:
                runs.append(heapq.heappop(self.queue))
        return runs

    def sequential(self):
        return self.workers is None or self.workers <= 1 or deterministic_mode()

    def run(self):
        """Execute every queued run; returns {name: result} in execution order."""
        runs = self._drain()
        results = {}
        if self.sequential():
            for run in runs:
                results[run.name] = self._execute(run)
            return results

        workers = worker_count(self.workers)
        logger.info("running %d runs on %d worker processes", len(runs), workers)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = []
            for run in runs:
                futures.append((run, pool.submit(_timed, run.function, *run.args)))
                self._mark(run.name, "running")
            for run, future in futures:
                try:
                    results[run.name], seconds = future.result()
                except Exception:
                    self._mark(run.name, "failed")
                    logger.error("run %s failed", run.name)
                    raise
                self._mark(run.name, "done", seconds)
                logger.info("finished run %s in %.1fs", run.name, seconds)
        return results

    def _execute(self, run):
        self._mark(run.name, "running")
        try:
            result, seconds = _timed(run.function, *run.args)
        except Exception:
            self._mark(run.name, "failed")
            logger.error("run %s failed", run.name)
            raise
        self._mark(run.name, "done", seconds)
        logger.info("finished run %s in %.1fs", run.name, seconds)
        return result

    def get_run_status(self):
        """Return status information about all known runs"""
        with self.lock:
            return [
                {"name": name, "status": state, "seconds": self.durations.get(name)}
                for name, state in self.status.items()
            ]
