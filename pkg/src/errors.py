"""
Base exceptions shared by every stage of a concept extraction run
Module-specific errors subclass SpaceError where they are raised
"""
import logging
import time
from contextlib import contextmanager
from typing import Dict, Iterator, Optional

logger = logging.getLogger(__name__)


class SpaceError(Exception):
    """Base class for all concept extraction errors"""

    pass


class StageError(SpaceError):
    """Failure inside a pipeline stage, tagged with the stage name"""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


@contextmanager
def stage(name: str, timings: Optional[Dict[str, float]] = None) -> Iterator[None]:
    """Time a pipeline stage and wrap any failure in StageError"""
    logger.info("Stage '%s' started", name)
    started = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e
    finally:
        elapsed = time.perf_counter() - started
        if timings is not None:
            timings[name] = timings.get(name, 0.0) + elapsed
    logger.info("Stage '%s' finished in %.2fs", name, elapsed)
