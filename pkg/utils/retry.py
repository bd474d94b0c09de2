import logging
from typing import Callable, Tuple, Type
from tenacity import (
    before_sleep_log,
    retry,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

logger = logging.getLogger(__name__)

# Transient OS conditions on slow or network-mounted filesystems
TRANSIENT_IO_ERRORS: Tuple[Type[BaseException], ...] = (
    BlockingIOError,
    InterruptedError,
    TimeoutError,
)


def with_retry(
    max_attempts: int = 3,
    initial_delay: float = 0.1,
    max_delay: float = 2.0,
    exceptions: Tuple[Type[BaseException], ...] = TRANSIENT_IO_ERRORS,
) -> Callable[[Callable], Callable]:
    """
    Retry a synchronous file operation with exponential backoff.

    Only ``exceptions`` are retried; anything else, including malformed
    file contents, propagates on the first attempt. After the last attempt
    the original exception is re-raised.

    Example:
        @with_retry(max_attempts=3)
        def read_bytes(path):
            ...
    """
    return retry(
        stop=stop_after_attempt(max_attempts),
        wait=wait_exponential(multiplier=initial_delay, max=max_delay),
        retry=retry_if_exception_type(exceptions),
        before_sleep=before_sleep_log(logger, logging.WARNING),
        reraise=True,
    )
