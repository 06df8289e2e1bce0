"""Multi-stage retrieval: BM25 and bi-encoder preranking (stage 1),
cross-encoder reranking of the top k (stage 2), and rank-average ensembling.

Run files use the TREC format ``qid Q0 docid rank score tag``.
"""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tokenizer import tokenize_words

logger = logging.getLogger(__name__)

BM25_K1 = 0.9
BM25_B = 0.4

STAGES = ("R0", "R1", "ENS")


@dataclass(frozen=True)
class Query:
    query_id: str
    text: str


class Corpus:
    """Document collection: unique ids mapping to (text, language tag)."""

    def __init__(self, records):
        self._docs = {}
        for doc_id, text, lang in records:
            if doc_id in self._docs:
                raise ContractError(f"duplicate document id: {doc_id!r}")
            self._docs[doc_id] = (str(text), str(lang))

    @classmethod
    def from_jsonl(cls, path) -> "Corpus":
        """Load a JSONL file with one {"id", "text", "lang"} object per line."""
        records = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                records.append((obj["id"], obj["text"], obj.get("lang", "")))
        return cls(records)

    def to_jsonl(self, path) -> None:
        lines = [
            json.dumps({"id": i, "text": t, "lang": g}, sort_keys=True)
            for i, (t, g) in self._docs.items()
        ]
        _atomic_write_text(path, "\n".join(lines) + "\n")

    def __len__(self) -> int:
        return len(self._docs)

    def __contains__(self, doc_id) -> bool:
        return doc_id in self._docs

    def ids(self) -> list:
        return list(self._docs)

    def text(self, doc_id) -> str:
        return self._docs[doc_id][0]

    def language(self, doc_id) -> str:
        return self._docs[doc_id][1]

    def items(self):
        for doc_id, (text, lang) in self._docs.items():
            yield doc_id, text, lang


@dataclass
class InvertedIndex:
    """Term postings plus the corpus statistics BM25 needs."""

    postings: dict  # term -> list of (doc_id, term frequency)
    doc_lengths: dict  # doc_id -> token count
    avgdl: float
    n: int

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))


@dataclass
class Ranking:
    """Ordered (doc id, score) list for one query at one pipeline stage.

    ``block`` is the number of leading entries rescored at stage 2 (None
    means the whole list); ensembling uses it to tell reranked documents
    from pass-through ones.
    """

    query_id: str
    entries: list = field(default_factory=list)  # [(doc_id, score)]
    stage: str = "R0"
    block: int = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ContractError(f"unknown ranking stage: {self.stage!r}")
        ids = [d for d, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ContractError(f"duplicate doc ids in ranking for {self.query_id!r}")
        scores = [s for _, s in self.entries]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ContractError(f"scores must be non-increasing for {self.query_id!r}")

    def __len__(self) -> int:
        return len(self.entries)

    def doc_ids(self) -> list:
        return [d for d, _ in self.entries]

    def ranks(self) -> dict:
        """doc id -> 1-based position."""
        return {d: i + 1 for i, (d, _) in enumerate(self.entries)}


# ---- stage 1: preranking -------------------------------------------------


def build_index(corpus: Corpus) -> InvertedIndex:
    """Inverted index over the tokenized corpus."""
    if len(corpus) == 0:
        raise ContractError("cannot index an empty corpus")
    postings, doc_lengths = {}, {}
    for doc_id, text, _ in corpus.items():
        tokens = tokenize_words(text)
        doc_lengths[doc_id] = len(tokens)
        for term, tf in sorted(Counter(tokens).items()):
            postings.setdefault(term, []).append((doc_id, tf))
    avgdl = sum(doc_lengths.values()) / len(doc_lengths)
    return InvertedIndex(postings=postings, doc_lengths=doc_lengths,
                         avgdl=avgdl, n=len(corpus))


def _bm25_idf(n: int, df: int) -> float:
    return math.log((n - df + 0.5) / (df + 0.5) + 1.0)


def bm25_rank(query: Query, index: InvertedIndex) -> Ranking:
    """Okapi BM25 over every indexed document (k1=0.9, b=0.4).

    Each query token contributes one summand (repeated tokens count again).
    Documents sharing no term with the query score 0 and trail the list in
    ascending doc-id order.
    """
    tokens = tokenize_words(query.text)
    scores = dict.fromkeys(index.doc_lengths, 0.0)
    if not tokens:
        logger.warning("bm25_rank: query %r has no tokens; all scores zero",
                       query.query_id)
    avgdl = index.avgdl if index.avgdl > 0 else 1.0
    for term in tokens:
        idf = _bm25_idf(index.n, index.df(term))
        for doc_id, tf in index.postings.get(term, ()):
            norm = 1.0 - BM25_B + BM25_B * index.doc_lengths[doc_id] / avgdl
            scores[doc_id] += idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm)
    ordered = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return Ranking(query_id=query.query_id, entries=ordered, stage="R0")


def embed_corpus(corpus: Corpus, encoder) -> dict:
    """Embed every document once; reuse across queries via ``doc_embeds``."""
    return {doc_id: encoder.be_embed(text) for doc_id, text, _ in corpus.items()}


def biencoder_rank(query: Query, corpus: Corpus, encoder,
                   doc_embeds: dict = None) -> Ranking:
    """Cosine similarity of mean-pooled embeddings, every document scored.

    A zero-norm embedding on either side scores 0 for that pair.
    ``doc_embeds`` (from :func:`embed_corpus`) skips re-embedding the
    corpus on every call; the ranking is identical either way.
    """
    if len(corpus) == 0:
        raise ContractError("cannot rank over an empty corpus")
    q_vec = encoder.be_embed(query.text)
    q_norm = float(np.linalg.norm(q_vec))
    scores = {}
    for doc_id, text, _ in corpus.items():
        if doc_embeds is not None:
            d_vec = doc_embeds[doc_id]
        else:
            d_vec = encoder.be_embed(text)
        d_norm = float(np.linalg.norm(d_vec))
        if q_norm == 0.0 or d_norm == 0.0:
            scores[doc_id] = 0.0
        else:
            scores[doc_id] = float(q_vec @ d_vec) / (q_norm * d_norm)
    ordered = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return Ranking(query_id=query.query_id, entries=ordered, stage="R0")


# ---- stage 2: reranking and ensembling -----------------------------------


def rerank(r0: Ranking, k: int, scorer) -> Ranking:
    """Re-score the top min(k, n) documents of ``r0`` with ``scorer(doc_id)``.

    The block is re-ordered by the new scores (ties keep preranker order);
    documents beyond the block follow in their original order, carrying
    synthetic strictly-decreasing scores below the block minimum — only
    their order is meaningful.
    """
    if k < 1:
        raise ContractError(f"rerank requires k >= 1, got {k}")
    block = min(k, len(r0))
    rescored = []
    for doc_id, _ in r0.entries[:block]:
        try:
            score = float(scorer(doc_id))
        except Exception as exc:
            raise ContractError(
                f"scorer failed for query {r0.query_id!r}, "
                f"document {doc_id!r}: {exc}"
            ) from exc
        rescored.append((doc_id, score))
    order = sorted(range(block), key=lambda i: (-rescored[i][1], i))
    entries = [rescored[i] for i in order]
    tail = r0.entries[block:]
    if tail:
        floor = min((s for _, s in entries), default=0.0)
        entries.extend(
            (doc_id, floor - 1.0 - j) for j, (doc_id, _) in enumerate(tail)
        )
    return Ranking(query_id=r0.query_id, entries=entries, stage="R1", block=block)


def ensemble(r0: Ranking, r1: Ranking) -> Ranking:
    """Rank averaging of a preranking and its reranking.

    Documents in the reranked block sort by (rank_R0 + rank_R1)/2, the rest
    keep rank_R0; ties break by rank_R0, then doc id.  Output scores are the
    negated sort keys so the usual non-increasing invariant holds.
    """
    if r0.query_id != r1.query_id:
        raise ContractError(
            f"cannot ensemble rankings for different queries: "
            f"{r0.query_id!r} vs {r1.query_id!r}"
        )
    if set(r0.doc_ids()) != set(r1.doc_ids()):
        raise ContractError(
            f"rankings for {r0.query_id!r} cover different document sets"
        )
    ranks0, ranks1 = r0.ranks(), r1.ranks()
    block = len(r1) if r1.block is None else r1.block
    in_block = set(d for d, _ in r1.entries[:block])
    keys = {}
    for doc_id in ranks0:
        if doc_id in in_block:
            keys[doc_id] = (ranks0[doc_id] + ranks1[doc_id]) / 2.0
        else:
            keys[doc_id] = float(ranks0[doc_id])
    ordered = sorted(keys, key=lambda d: (keys[d], ranks0[d], d))
    entries = [(d, -keys[d]) for d in ordered]
    return Ranking(query_id=r0.query_id, entries=entries, stage="ENS")


# ---- TREC run files ------------------------------------------------------


def _atomic_write_text(path, content: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_run(path, rankings, tag: str) -> None:
    """Write rankings as TREC run lines ``qid Q0 docid rank score tag``."""
    lines = []
    for ranking in rankings:
        for rank, (doc_id, score) in enumerate(ranking.entries, start=1):
            lines.append(
                f"{ranking.query_id} Q0 {doc_id} {rank} {score:.6f} {tag}"
            )
    _atomic_write_text(path, "\n".join(lines) + "\n")


def write_queries_tsv(path, queries) -> None:
    """Write queries as tab-separated ``qid<TAB>text`` lines."""
    lines = [f"{q.query_id}\t{q.text}" for q in queries]
    _atomic_write_text(path, "\n".join(lines) + "\n")


def read_queries_tsv(path) -> list:
    """Tab-separated ``qid<TAB>text`` lines -> list of Query."""
    queries = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ContractError(f"{path}:{line_no}: expected qid<TAB>text")
            qid, text = line.split("\t", 1)
            queries.append(Query(qid, text))
    return queries


def read_run(path) -> dict:
    """Run file -> {query id: [doc ids in rank order]}."""
    per_query = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ContractError(
                    f"{path}:{line_no}: expected 6 fields, got {len(parts)}"
                )
            qid, _, doc_id, rank, _, _ = parts
            per_query.setdefault(qid, []).append((int(rank), doc_id))
    return {
        qid: [doc_id for _, doc_id in sorted(items)]
        for qid, items in per_query.items()
    }
