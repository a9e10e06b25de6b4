"""
Bounded worker pool for per-query processing.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Generic, List, Optional, Sequence, TypeVar

from app.core.exceptions import ReformulationError
from app.schemas.schemas import ProcessingStatus

logger = logging.getLogger(__name__)

ItemT = TypeVar("ItemT")
ResultT = TypeVar("ResultT")


@dataclass(frozen=True)
class TaskResult(Generic[ItemT, ResultT]):
    item: ItemT
    status: ProcessingStatus
    value: Optional[ResultT] = None
    error: Optional[Exception] = None
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == ProcessingStatus.COMPLETED


def _run_one(fn: Callable[[ItemT], ResultT], item: ItemT, label: str) -> TaskResult:
    started = time.perf_counter()
    try:
        value = fn(item)
    except ReformulationError as e:
        logger.error(f"Task {label} failed: {e.detail}")
        return TaskResult(item, ProcessingStatus.FAILED, error=e, seconds=time.perf_counter() - started)
    except Exception as e:
        logger.exception(f"Task {label} failed unexpectedly: {e}")
        return TaskResult(item, ProcessingStatus.FAILED, error=e, seconds=time.perf_counter() - started)
    return TaskResult(item, ProcessingStatus.COMPLETED, value=value, seconds=time.perf_counter() - started)


def map_ordered(
    fn: Callable[[ItemT], ResultT],
    items: Sequence[ItemT],
    parallelism: int = 1,
    label: Callable[[ItemT], str] = str,
) -> List[TaskResult]:
    """
    Apply `fn` to every item on at most `parallelism` threads.

    A failing item never stops the others; results come back in input order.
    """
    if parallelism <= 1 or len(items) <= 1:
        return [_run_one(fn, item, label(item)) for item in items]
    with ThreadPoolExecutor(max_workers=parallelism, thread_name_prefix="query") as pool:
        futures = [pool.submit(_run_one, fn, item, label(item)) for item in items]
        return [future.result() for future in futures]
