"""Seeded synthetic bilingual retrieval benchmark.

Documents blend words from a primary topic, an interfering neighbor topic,
and a shared common pool; a document is relevant to a query iff their
primary topics match — relevance is topical, not string overlap.

Each topic's vocabulary is split into a document-side pool and a
query-side pool.  Query-side words never appear in documents, and every
query carries a few of them alongside a couple of document-side anchor
words.  The anchors give a lexical first stage something to match; the
query-side words carry signal only for a model that has learned, from
unlabeled text, which topic they belong to.  That distributional evidence
comes from query-log-style snippets — short same-topic word groups mixing
both pools — shipped as the unlabeled corpus of each language together
with the documents.

A larger pool of training queries (disjoint ids from the evaluation
queries) supplies relevance judgments for ranking training; evaluation
queries are never trained on.

The "target language" is produced by a seeded token-substitution cipher
whose output vocabulary shares no surface form with the source, making
lexical transfer impossible by construction: any target-language
competence must come from the model, not from string overlap.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .retrieval import (
    Corpus,
    Query,
    _atomic_write_text,
    write_queries_tsv,
)
from .evaluation import write_qrels
from .tokenizer import tokenize_words

logger = logging.getLogger(__name__)

WORDS_PER_TOPIC = 40
DOC_SIDE_WORDS = 24  # per topic; the remaining 16 are query-side only
COMMON_WORDS = 80
P_PRIMARY = 0.45
P_INTERFERING = 0.20
QUERY_ANCHOR_WORDS = 2  # document-side words per query
QUERY_SEMANTIC_WORDS = 2  # query-side words per query
SNIPPET_SIDE_RANGE = (3, 6)  # words drawn per pool into one snippet

SOURCE_LANG = "src"
TARGET_LANG = "tgt"


@dataclass
class SyntheticBenchmark:
    corpus_src: Corpus
    corpus_tgt: Corpus
    queries_src: list
    queries_tgt: list
    qrels: dict
    cipher: dict  # source word -> target word (bijection)
    snippets_src: list = field(default_factory=list)
    snippets_tgt: list = field(default_factory=list)
    train_queries_src: list = field(default_factory=list)
    train_qrels: dict = field(default_factory=dict)

    def unlabeled_src(self) -> list:
        """Unlabeled source text: documents plus snippet lines."""
        return [t for _, t, _ in self.corpus_src.items()] + self.snippets_src

    def unlabeled_tgt(self) -> list:
        return [t for _, t, _ in self.corpus_tgt.items()] + self.snippets_tgt

    def write(self, out_dir) -> dict:
        """Write all benchmark files; returns {name: path}."""
        os.makedirs(out_dir, exist_ok=True)
        paths = {
            "corpus_src": os.path.join(out_dir, "corpus_src.jsonl"),
            "corpus_tgt": os.path.join(out_dir, "corpus_tgt.jsonl"),
            "queries_src": os.path.join(out_dir, "queries_src.tsv"),
            "queries_tgt": os.path.join(out_dir, "queries_tgt.tsv"),
            "qrels": os.path.join(out_dir, "qrels.txt"),
            "cipher": os.path.join(out_dir, "cipher.json"),
            "snippets_src": os.path.join(out_dir, "snippets_src.txt"),
            "snippets_tgt": os.path.join(out_dir, "snippets_tgt.txt"),
            "train_queries_src": os.path.join(out_dir, "train_queries_src.tsv"),
            "train_qrels": os.path.join(out_dir, "train_qrels.txt"),
        }
        self.corpus_src.to_jsonl(paths["corpus_src"])
        self.corpus_tgt.to_jsonl(paths["corpus_tgt"])
        write_queries_tsv(paths["queries_src"], self.queries_src)
        write_queries_tsv(paths["queries_tgt"], self.queries_tgt)
        write_qrels(paths["qrels"], self.qrels)
        _atomic_write_text(
            paths["cipher"],
            json.dumps(self.cipher, sort_keys=True, separators=(",", ":")) + "\n",
        )
        _atomic_write_text(paths["snippets_src"],
                           "".join(s + "\n" for s in self.snippets_src))
        _atomic_write_text(paths["snippets_tgt"],
                           "".join(s + "\n" for s in self.snippets_tgt))
        write_queries_tsv(paths["train_queries_src"], self.train_queries_src)
        write_qrels(paths["train_qrels"], self.train_qrels)
        return paths


def _vocabulary(n_topics: int):
    topics = [
        [f"t{k:02d}w{j:02d}" for j in range(WORDS_PER_TOPIC)]
        for k in range(n_topics)
    ]
    common = [f"common{j:02d}" for j in range(COMMON_WORDS)]
    return topics, common


def build_cipher(seed: int, n_topics: int) -> dict:
    """Seeded bijection: every generator word -> a disjoint surface form."""
    topics, common = _vocabulary(n_topics)
    words = sorted(w for group in topics for w in group) + sorted(common)
    perm = np.random.default_rng(seed + 1_000_003).permutation(len(words))
    return {w: f"z{int(p):04d}" for w, p in zip(words, perm)}


def apply_cipher(text: str, mapping: dict) -> str:
    """Token-substitute ``text`` through ``mapping``; unknown words fail."""
    out = []
    for token in tokenize_words(text):
        if token not in mapping:
            raise ContractError(f"cipher has no entry for token {token!r}")
        out.append(mapping[token])
    return " ".join(out)


def invert_cipher(mapping: dict) -> dict:
    inverse = {v: k for k, v in mapping.items()}
    if len(inverse) != len(mapping):
        raise ContractError("cipher mapping is not a bijection")
    return inverse


def generate_benchmark(seed: int, n_docs: int = 1000, n_queries: int = 50,
                       n_topics: int = 10, doc_len=(15, 30),
                       n_train_queries: int = 200,
                       n_snippets: int = 2000) -> SyntheticBenchmark:
    """Deterministic benchmark: same arguments -> identical content."""
    if n_topics < 2:
        raise ContractError(f"need at least 2 topics, got {n_topics}")
    if n_docs < n_topics:
        raise ContractError(f"need at least {n_topics} docs, got {n_docs}")
    if n_queries < 1:
        raise ContractError(f"need at least 1 query, got {n_queries}")
    rng = np.random.default_rng(seed)
    topics, common = _vocabulary(n_topics)
    doc_side = [t[:DOC_SIDE_WORDS] for t in topics]
    query_side = [t[DOC_SIDE_WORDS:] for t in topics]

    records = []
    doc_topic = {}
    for i in range(n_docs):
        topic = i % n_topics
        interfering = (topic + 1 + int(rng.integers(n_topics - 1))) % n_topics
        length = int(rng.integers(doc_len[0], doc_len[1] + 1))
        words = []
        for _ in range(length):
            u = rng.random()
            if u < P_PRIMARY:
                pool = doc_side[topic]
            elif u < P_PRIMARY + P_INTERFERING:
                pool = doc_side[interfering]
            else:
                pool = common
            words.append(pool[int(rng.integers(len(pool)))])
        doc_id = f"d{i:05d}"
        doc_topic[doc_id] = topic
        records.append((doc_id, " ".join(words), SOURCE_LANG))
    corpus_src = Corpus(records)

    def make_queries(n, prefix):
        queries, qrels = [], {}
        for i in range(n):
            topic = i % n_topics
            terms = list(rng.choice(doc_side[topic], size=QUERY_ANCHOR_WORDS,
                                    replace=False))
            terms += list(rng.choice(query_side[topic],
                                     size=QUERY_SEMANTIC_WORDS,
                                     replace=False))
            qid = f"{prefix}{i:03d}"
            queries.append(Query(qid, " ".join(terms)))
            qrels[qid] = {d for d, t in doc_topic.items() if t == topic}
        return queries, qrels

    queries, qrels = make_queries(n_queries, "q")
    train_queries, train_qrels = make_queries(n_train_queries, "t")

    lo, hi = SNIPPET_SIDE_RANGE
    snippets = []
    for i in range(n_snippets):
        topic = i % n_topics
        words = list(rng.choice(doc_side[topic],
                                size=int(rng.integers(lo, hi)),
                                replace=False))
        words += list(rng.choice(query_side[topic],
                                 size=int(rng.integers(lo, hi)),
                                 replace=False))
        order = rng.permutation(len(words))
        snippets.append(" ".join(words[j] for j in order))

    cipher = build_cipher(seed, n_topics)
    corpus_tgt = Corpus(
        (doc_id, apply_cipher(text, cipher), TARGET_LANG)
        for doc_id, text, _ in corpus_src.items()
    )
    queries_tgt = [Query(q.query_id, apply_cipher(q.text, cipher))
                   for q in queries]
    snippets_tgt = [apply_cipher(s, cipher) for s in snippets]
    logger.info("benchmark: %d docs, %d+%d queries, %d topics, %d snippets, "
                "seed %d", n_docs, n_queries, n_train_queries, n_topics,
                n_snippets, seed)
    return SyntheticBenchmark(
        corpus_src=corpus_src, corpus_tgt=corpus_tgt,
        queries_src=queries, queries_tgt=queries_tgt,
        qrels=qrels, cipher=cipher,
        snippets_src=snippets, snippets_tgt=snippets_tgt,
        train_queries_src=train_queries, train_qrels=train_qrels,
    )
