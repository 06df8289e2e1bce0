"""Shared test helpers."""

import numpy as np


def exact_delta_exists(a: float, b: float, span: int = 60) -> bool:
    """Whether any float v satisfies fl(a + v) == b.

    fl(a + v) is monotone in v, so scanning a bracket of candidates around
    fl(b − a) is exhaustive: if no candidate in the bracket lands on b and the
    bracket's sums straddle b, no float anywhere can.  Used to distinguish
    "extraction stored a suboptimal delta" (a bug) from "no exact delta exists"
    (a fact of ties-to-even rounding).
    """
    v = np.float64(b) - np.float64(a)
    lo = hi = v
    for _ in range(span):
        lo = np.nextafter(lo, -np.inf)
        hi = np.nextafter(hi, np.inf)
    cand = lo
    while cand <= hi:
        if a + cand == b:
            return True
        cand = np.nextafter(cand, np.inf)
    assert a + lo < b < a + hi  # sums straddle b, so the scan was exhaustive
    return False
