"""Thread-count control for BLAS (and numba, when present).

``HFNN_THREADS`` sets the default; ``0`` or unset leaves libraries alone.
"""

import contextlib
import logging
import os
import warnings

from threadpoolctl import threadpool_limits

from . import _accel

log = logging.getLogger(__name__)


def env_threads() -> int:
    raw = os.environ.get("HFNN_THREADS", "").strip()
    if not raw:
        return 0
    try:
        n = int(raw)
    except ValueError:
        log.warning("ignoring non-integer HFNN_THREADS=%r", raw)
        return 0
    return max(n, 0)


@contextlib.contextmanager
def threads(n=None):
    """Limit native thread pools to ``n`` inside the block (0 = unchanged)."""
    n = env_threads() if n is None else int(n)
    if n <= 0:
        yield
        return
    prev = None
    if _accel.HAVE_NUMBA:
        import numba

        with warnings.catch_warnings():
            # first use picks a threading layer and may complain about an old TBB
            warnings.simplefilter("ignore", numba.NumbaWarning)
            prev = numba.get_num_threads()
            numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    try:
        with threadpool_limits(limits=n):
            yield
    finally:
        if prev is not None:
            import numba

            numba.set_num_threads(prev)
