"""Synthetic bilingual benchmark: determinism, cipher bijection, topical
relevance structure, and lexical calibration of the retrieval signal."""

import numpy as np
import pytest

from xlrank.errors import ContractError
from xlrank.evaluation import mean_average_precision
from xlrank.retrieval import Query, bm25_rank, build_index
from xlrank.synthetic import (
    DOC_SIDE_WORDS,
    SOURCE_LANG,
    TARGET_LANG,
    _vocabulary,
    apply_cipher,
    build_cipher,
    generate_benchmark,
    invert_cipher,
)
from xlrank.tokenizer import tokenize_words


def small_benchmark(seed=0):
    return generate_benchmark(seed, n_docs=200, n_queries=20, n_topics=5)


class TestGenerator:
    def test_sizes_and_language_tags(self):
        bench = small_benchmark()
        assert len(bench.corpus_src) == 200
        assert len(bench.corpus_tgt) == 200
        assert len(bench.queries_src) == 20
        assert all(lang == SOURCE_LANG for _, _, lang in bench.corpus_src.items())
        assert all(lang == TARGET_LANG for _, _, lang in bench.corpus_tgt.items())

    def test_qrels_follow_topics(self):
        bench = small_benchmark()
        # 5 topics, 200 docs round-robin -> 40 relevant docs per query
        for qid, relevant in bench.qrels.items():
            assert len(relevant) == 40
            assert relevant <= set(bench.corpus_src.ids())

    def test_degenerate_sizes_rejected(self):
        with pytest.raises(ContractError, match="topics"):
            generate_benchmark(0, n_topics=1)
        with pytest.raises(ContractError, match="docs"):
            generate_benchmark(0, n_docs=3, n_topics=5)
        with pytest.raises(ContractError, match="query"):
            generate_benchmark(0, n_queries=0)

    def test_same_seed_identical_files(self, tmp_path):
        dir_a, dir_b = tmp_path / "a", tmp_path / "b"
        paths_a = generate_benchmark(7, 120, 20, 4).write(dir_a)
        paths_b = generate_benchmark(7, 120, 20, 4).write(dir_b)
        for name in paths_a:
            bytes_a = open(paths_a[name], "rb").read()
            bytes_b = open(paths_b[name], "rb").read()
            assert bytes_a == bytes_b, f"{name} differs across regenerations"

    def test_different_seeds_differ(self):
        a = generate_benchmark(1, 120, 20, 4)
        b = generate_benchmark(2, 120, 20, 4)
        texts_a = [t for _, t, _ in a.corpus_src.items()]
        texts_b = [t for _, t, _ in b.corpus_src.items()]
        assert texts_a != texts_b


class TestVocabularySplit:
    def test_query_side_words_never_in_documents(self):
        bench = small_benchmark()
        topics, _ = _vocabulary(5)
        query_side = {w for t in topics for w in t[DOC_SIDE_WORDS:]}
        doc_vocab = set()
        for _, text, _ in bench.corpus_src.items():
            doc_vocab |= set(tokenize_words(text))
        assert not doc_vocab & query_side

    def test_queries_mix_anchor_and_query_side_words(self):
        bench = small_benchmark()
        topics, _ = _vocabulary(5)
        doc_side = {w for t in topics for w in t[:DOC_SIDE_WORDS]}
        query_side = {w for t in topics for w in t[DOC_SIDE_WORDS:]}
        for q in bench.queries_src + bench.train_queries_src:
            terms = set(tokenize_words(q.text))
            assert terms & doc_side and terms & query_side

    def test_snippets_bridge_both_pools_of_one_topic(self):
        bench = small_benchmark()
        topics, _ = _vocabulary(5)
        for snippet in bench.snippets_src[:50]:
            terms = set(tokenize_words(snippet))
            owners = {k for k, t in enumerate(topics) if terms & set(t)}
            assert len(owners) == 1, f"snippet spans topics {owners}"
            (k,) = owners
            assert terms & set(topics[k][:DOC_SIDE_WORDS])
            assert terms & set(topics[k][DOC_SIDE_WORDS:])

    def test_unlabeled_corpora_inclusion_and_language(self):
        bench = small_benchmark()
        unlab = bench.unlabeled_src()
        assert len(unlab) == len(bench.corpus_src) + len(bench.snippets_src)
        inverse = invert_cipher(bench.cipher)
        for src, tgt in zip(unlab, bench.unlabeled_tgt()):
            assert apply_cipher(tgt, inverse) == src

    def test_train_and_eval_query_ids_disjoint(self):
        bench = small_benchmark()
        eval_ids = {q.query_id for q in bench.queries_src}
        train_ids = {q.query_id for q in bench.train_queries_src}
        assert not eval_ids & train_ids
        assert set(bench.train_qrels) == train_ids
        assert set(bench.qrels) == eval_ids


class TestCipher:
    def test_bijection_and_inverse_recovers_source(self):
        bench = small_benchmark()
        inverse = invert_cipher(bench.cipher)
        assert len(inverse) == len(bench.cipher)
        for _, text, _ in bench.corpus_src.items():
            assert apply_cipher(apply_cipher(text, bench.cipher), inverse) == text

    def test_zero_surface_overlap(self):
        bench = small_benchmark()
        src_vocab = set()
        for _, text, _ in bench.corpus_src.items():
            src_vocab |= set(tokenize_words(text))
        tgt_vocab = set()
        for _, text, _ in bench.corpus_tgt.items():
            tgt_vocab |= set(tokenize_words(text))
        assert not src_vocab & tgt_vocab

    def test_unknown_token_rejected(self):
        cipher = build_cipher(0, 3)
        with pytest.raises(ContractError, match="no entry"):
            apply_cipher("notaword", cipher)

    def test_cipher_preserves_corpus_statistics(self):
        bench = small_benchmark()
        index_src = build_index(bench.corpus_src)
        index_tgt = build_index(bench.corpus_tgt)
        assert index_src.avgdl == index_tgt.avgdl
        assert index_src.doc_lengths == index_tgt.doc_lengths
        # per-document tf multisets survive the renaming
        for term, plist in index_src.postings.items():
            mapped = bench.cipher[term]
            assert sorted(plist) == sorted(index_tgt.postings[mapped])


class TestCalibration:
    @pytest.mark.parametrize("language", ["src", "tgt"])
    def test_bm25_beats_random_by_margin(self, language):
        bench = small_benchmark(seed=3)
        corpus = bench.corpus_src if language == "src" else bench.corpus_tgt
        queries = bench.queries_src if language == "src" else bench.queries_tgt
        index = build_index(corpus)
        run = {q.query_id: bm25_rank(q, index).doc_ids() for q in queries}
        bm25_map = mean_average_precision(run, bench.qrels)

        rng = np.random.default_rng(0)
        doc_ids = corpus.ids()
        random_maps = []
        for _ in range(5):
            random_run = {q.query_id: list(rng.permutation(doc_ids))
                          for q in queries}
            random_maps.append(mean_average_precision(random_run, bench.qrels))
        random_map = float(np.mean(random_maps))
        assert bm25_map >= random_map + 0.2, (
            f"BM25 MAP {bm25_map:.3f} vs random {random_map:.3f}"
        )

    def test_bm25_not_saturated(self):
        # reranking needs headroom: the lexical preranker must not be perfect
        bench = small_benchmark(seed=3)
        index = build_index(bench.corpus_src)
        run = {q.query_id: bm25_rank(q, index).doc_ids()
               for q in bench.queries_src}
        assert mean_average_precision(run, bench.qrels) < 0.98
