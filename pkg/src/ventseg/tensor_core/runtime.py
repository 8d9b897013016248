"""Thread-count control for reproducible numeric kernels.

All FFT calls in the package route through :func:`fft_workers` so a single
setting pins them.  BLAS pools are capped via threadpoolctl when available;
on builds without it, setting the usual environment variables before process
start remains the fallback.
"""

from __future__ import annotations

_fft_workers = 1


def set_num_threads(n: int) -> None:
    """Pin FFT worker count and (best effort) BLAS thread pools to ``n``."""
    global _fft_workers
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    _fft_workers = int(n)
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        pass


def fft_workers() -> int:
    return _fft_workers
