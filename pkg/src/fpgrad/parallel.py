"""Thread-count policy: FPGRAD_THREADS caps worker threads.

0 (the default) means fully sequential execution, which is also the
reproducibility guarantee quoted in the command-line contract; anything
unparseable is treated as 0.
"""

import os


def max_workers() -> int:
    raw = os.environ.get("FPGRAD_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        return 0
    return max(n, 0)
