"""Process-wide runtime switches.

Debug checks are off by default; tests and the CLI can enable them via
set_debug_checks() or the SECAP_DEBUG_NAN environment variable.
"""

import os

_debug_checks = os.environ.get("SECAP_DEBUG_NAN", "") not in ("", "0")


def set_debug_checks(enabled: bool) -> None:
    """Toggle the post-op NaN/Inf scan on every forward result."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


def max_threads() -> int:
    """Worker cap for the few partitionable stages (per-query scoring).

    SECAP_THREADS caps it; unset or invalid means single-threaded.
    Results never depend on the worker count.
    """
    raw = os.environ.get("SECAP_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)
