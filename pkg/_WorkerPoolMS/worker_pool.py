import concurrent.futures
import logging
import logging.handlers
import multiprocessing as mp
from typing import Any, Callable, Iterable, List, Optional

# ==============================================================================
# CONFIGURATION
# ==============================================================================
DEFAULT_WORKERS = 1
logging.basicConfig(level=logging.INFO, format='%(asctime)s [%(levelname)s] %(message)s')
log = logging.getLogger("WorkerPool")
# ==============================================================================


# ==============================================================================
# WORKER SETUP (Runs in Child Process)
# ==============================================================================
def _init_worker(log_queue: mp.Queue, level: int):
    """Routes every record of the child to the parent through the queue."""
    root = logging.getLogger()
    for h in root.handlers[:]:
        root.removeHandler(h)
    root.addHandler(logging.handlers.QueueHandler(log_queue))
    root.setLevel(level)
    logging.getLogger("PoolWorker").debug(f"Worker PID {mp.current_process().pid} ready.")


# ==============================================================================
# PARENT CONTROLLER (Runs in Main Process)
# ==============================================================================
class WorkerPoolMS:
    """
    The Foreman: runs per-image jobs in a bounded pool of spawned processes
    and hands results back in input order, whatever order they finish in.
    One worker means plain in-process execution.
    """

    def __init__(self, max_workers: int = DEFAULT_WORKERS, timeout_seconds: Optional[float] = None):
        if max_workers < 1:
            raise ValueError(f"max_workers must be at least 1, got {max_workers}")
        self.max_workers = max_workers
        self.timeout = timeout_seconds

    def map(self, fn: Callable[[Any], Any], items: Iterable[Any]) -> List[Any]:
        """fn must be a module-level function so spawned workers can import it."""
        items = list(items)
        if self.max_workers == 1 or len(items) <= 1:
            return [fn(item) for item in items]

        ctx = mp.get_context("spawn")
        log_queue = ctx.Queue()
        listener = logging.handlers.QueueListener(log_queue, *logging.getLogger().handlers,
                                                  respect_handler_level=True)
        listener.start()
        workers = min(self.max_workers, len(items))
        log.info(f"🚀 Spawning {workers} workers for {len(items)} jobs...")
        try:
            with concurrent.futures.ProcessPoolExecutor(
                max_workers=workers, mp_context=ctx,
                initializer=_init_worker, initargs=(log_queue, logging.getLogger().level),
            ) as pool:
                futures = [pool.submit(fn, item) for item in items]
                try:
                    return [f.result(timeout=self.timeout) for f in futures]
                except concurrent.futures.TimeoutError:
                    log.error("⏳ Job timed out! Cancelling the rest...")
                    for f in futures:
                        f.cancel()
                    raise TimeoutError(f"Job exceeded {self.timeout}s limit.")
        finally:
            listener.stop()


def _square(x: int) -> int:
    logging.getLogger("PoolWorker").info(f"squaring {x}")
    return x * x


# --- Independent Test Block ---
if __name__ == "__main__":
    pool = WorkerPoolMS(max_workers=2)
    print(f"Results in input order: {pool.map(_square, [3, 1, 2])}")
