"""Retrieval-quality metrics (AP/MAP), paired two-tailed t-test, and
query-latency measurement.

Qrels files use the TREC format ``qid 0 docid rel`` (rel > 0 marks a
relevant document). Metric reports are emitted as line-delimited JSON.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass

from .errors import ContractError
from .retrieval import _atomic_write_text

logger = logging.getLogger(__name__)

_BETA_TOL = 1e-10
_BETA_MAX_ITER = 300


# ---- qrels ---------------------------------------------------------------


def read_qrels(path) -> dict:
    """TREC qrels file -> {query id: set of relevant doc ids}."""
    qrels = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ContractError(
                    f"{path}:{line_no}: expected 4 fields, got {len(parts)}"
                )
            qid, _, doc_id, rel = parts
            qrels.setdefault(qid, set())
            if int(rel) > 0:
                qrels[qid].add(doc_id)
    return qrels


def write_qrels(path, qrels: dict) -> None:
    """Write {query id: set of relevant doc ids} as TREC qrels lines."""
    lines = []
    for qid in sorted(qrels):
        for doc_id in sorted(qrels[qid]):
            lines.append(f"{qid} 0 {doc_id} 1")
    _atomic_write_text(path, "\n".join(lines) + "\n")


# ---- average precision ---------------------------------------------------


def average_precision(ranked_ids, relevant: set, cutoff: int = None) -> float:
    """AP = (1/|relevant|) · Σ over relevant ranks i ≤ cutoff of prec@i.

    The divisor is the total number of relevant documents, so relevant
    documents missing from the ranking (or beyond the cutoff) cost score.
    """
    if not relevant:
        raise ContractError("average_precision requires a non-empty relevant set")
    if cutoff is None:
        cutoff = len(ranked_ids)
    hits, total = 0, 0.0
    for i, doc_id in enumerate(ranked_ids[:cutoff], start=1):
        if doc_id in relevant:
            hits += 1
            total += hits / i
    return total / len(relevant)


def per_query_ap(run: dict, qrels: dict, cutoff: int = None) -> dict:
    """AP per evaluable query (those with ≥1 relevant doc), sorted by id.

    Queries with no relevant documents are skipped with a warning; queries
    absent from the run score 0.  Zero evaluable queries is an error.
    """
    aps = {}
    for qid in sorted(set(run) | set(qrels)):
        relevant = qrels.get(qid, set())
        if not relevant:
            logger.warning("query %r has no relevant documents; skipped", qid)
            continue
        aps[qid] = average_precision(run.get(qid, []), relevant, cutoff)
    if not aps:
        raise ContractError("no evaluable queries (none has relevant documents)")
    return aps


def mean_average_precision(run: dict, qrels: dict, cutoff: int = None) -> float:
    """Arithmetic mean of per-query AP over evaluable queries."""
    aps = per_query_ap(run, qrels, cutoff)
    return sum(aps.values()) / len(aps)


# ---- paired t-test -------------------------------------------------------


def _log_beta(a: float, b: float) -> float:
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


def _beta_continued_fraction(x: float, a: float, b: float) -> float:
    """Lentz's continued fraction for the incomplete beta integral."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, _BETA_MAX_ITER + 1):
        m2 = 2 * m
        # even step
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        # odd step
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETA_TOL:
            return h
    raise ContractError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(x: float, a: float, b: float) -> float:
    """I_x(a, b), accurate to ~1e-10 via Lentz's continued fraction."""
    if not 0.0 <= x <= 1.0:
        raise ContractError(f"incomplete beta requires x in [0,1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    front = math.exp(
        a * math.log(x) + b * math.log1p(-x) - _log_beta(a, b)
    )
    # the continued fraction converges fast for x below the distribution bulk
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(x, a, b) / a
    return 1.0 - front * _beta_continued_fraction(1.0 - x, b, a) / b


def t_sf_two_tailed(t: float, df: int) -> float:
    """Two-tailed tail probability of Student's t with df degrees of freedom."""
    if df < 1:
        raise ContractError(f"t-distribution requires df >= 1, got {df}")
    if t == 0.0:
        return 1.0
    x = df / (df + t * t)
    return regularized_incomplete_beta(x, df / 2.0, 0.5)


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    n: int
    degenerate: bool = False

    def __iter__(self):
        return iter((self.t, self.p))


def paired_t_test(ap_a, ap_b) -> TTestResult:
    """Paired two-tailed Student's t-test on per-query score pairs.

    All-zero differences are degenerate: t = 0, p = 1, flagged.
    """
    a, b = list(ap_a), list(ap_b)
    if len(a) != len(b):
        raise ContractError(
            f"paired test needs equal lengths, got {len(a)} and {len(b)}"
        )
    n = len(a)
    if n < 2:
        raise ContractError(f"paired test needs n >= 2 pairs, got {n}")
    diffs = [x - y for x, y in zip(a, b)]
    if all(d == 0.0 for d in diffs):
        logger.warning("paired_t_test: all differences zero; p = 1 by convention")
        return TTestResult(t=0.0, p=1.0, n=n, degenerate=True)
    mean = sum(diffs) / n
    var = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    if var == 0.0:
        # constant non-zero difference: unbounded evidence
        t = math.inf if mean > 0 else -math.inf
        return TTestResult(t=t, p=0.0, n=n)
    t = mean / math.sqrt(var / n)
    return TTestResult(t=t, p=t_sf_two_tailed(t, n - 1), n=n)


# ---- latency -------------------------------------------------------------


def measure_latency(pipeline, queries, repetitions: int = 3) -> float:
    """Mean wall-clock milliseconds per query over timed repetitions.

    One untimed warm-up pass runs first; call single-threaded for stable
    numbers.
    """
    if repetitions < 3:
        raise ContractError(f"need at least 3 repetitions, got {repetitions}")
    queries = list(queries)
    if not queries:
        raise ContractError("cannot measure latency over zero queries")
    for query in queries:  # warm-up
        pipeline(query)
    start = time.perf_counter()
    for _ in range(repetitions):
        for query in queries:
            pipeline(query)
    elapsed = time.perf_counter() - start
    return elapsed * 1000.0 / (repetitions * len(queries))


# ---- reports -------------------------------------------------------------


@dataclass
class MetricReport:
    """One evaluation record: per-query APs, their mean, optional extras."""

    label: str
    per_query: dict
    map_score: float
    t: float = None
    p: float = None
    latency_ms: float = None

    @classmethod
    def from_run(cls, label: str, run: dict, qrels: dict,
                 cutoff: int = None) -> "MetricReport":
        aps = per_query_ap(run, qrels, cutoff)
        return cls(label=label, per_query=aps,
                   map_score=sum(aps.values()) / len(aps))

    def to_record(self) -> dict:
        record = {
            "label": self.label,
            "map": self.map_score,
            "per_query": {q: self.per_query[q] for q in sorted(self.per_query)},
        }
        if self.t is not None:
            record["t"] = self.t
        if self.p is not None:
            record["p"] = self.p
        if self.latency_ms is not None:
            record["latency_ms"] = self.latency_ms
        return record


def write_reports(path, reports) -> None:
    """Line-delimited JSON, one metric report per line, keys sorted."""
    lines = [
        json.dumps(r.to_record(), sort_keys=True, separators=(",", ":"))
        for r in reports
    ]
    _atomic_write_text(path, "\n".join(lines) + "\n")
