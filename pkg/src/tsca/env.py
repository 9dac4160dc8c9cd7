"""Process-level runtime knobs read from the environment."""

import os

from tsca.errors import ConfigError


def worker_count() -> int:
    """Worker-thread cap from TSCA_THREADS. Default 1; values below 1 are errors."""
    raw = os.environ.get("TSCA_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"TSCA_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"TSCA_THREADS must be >= 1, got {n}")
    return n
