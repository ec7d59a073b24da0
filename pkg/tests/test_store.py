import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surealm.corpus import Sentence
from surealm.encoder import EncoderConfig, SpanEncoder, encode_span
from surealm.store import (
    EmbeddingStore,
    RetrievalConfig,
    StoreFormatError,
    block_positions,
    build_store,
    load_retrieval_table,
    load_store,
    precompute_retrievals,
    save_retrieval_table,
    save_store,
    search,
    store_digest,
)

ENC = EncoderConfig(d_enc=16, seed=77)


def toy_sentences(rng, n, max_len=8, vocab=40):
    out = []
    for i in range(n):
        length = int(rng.integers(1, max_len + 1))
        out.append(Sentence(i, tuple(int(t) for t in rng.integers(4, vocab, size=length))))
    return out


def random_store(seed, n_sentences=40, d_enc=16):
    rng = np.random.default_rng(seed)
    sents = toy_sentences(rng, n_sentences)
    # make sure at least one sentence has a split
    sents[0] = Sentence(0, (4, 5, 6))
    cfg = EncoderConfig(d_enc=d_enc, seed=seed)
    return build_store(sents, cfg, RetrievalConfig(K=4)), sents


def brute_force_search(store, query, K, exclude=None):
    scores = store.prefix_embs @ query
    order = sorted(
        (i for i in range(len(store)) if exclude is None or store.sentence_ids[i] != exclude),
        key=lambda i: (-scores[i], i),
    )
    return order[:K]


def test_build_store_entry_count_and_order():
    sents = [Sentence(0, (4, 5, 6)), Sentence(1, (7,)), Sentence(2, (8, 9))]
    store = build_store(sents, ENC, RetrievalConfig())
    assert len(store) == 3  # (0,1) (0,2) (2,1)
    assert list(store.sentence_ids) == [0, 0, 2]
    assert list(store.split_positions) == [1, 2, 1]
    assert list(store.current_words) == [4, 5, 8]


def test_build_store_embeddings_match_encode_span():
    sents = [Sentence(0, (4, 5, 6, 7))]
    store = build_store(sents, ENC, RetrievalConfig(m=2))
    # entry at split_pos=3: prefix [4,5] from position 1, suffix [7] from position 4
    np.testing.assert_array_equal(store.prefix_embs[2], encode_span(ENC, [4, 5], start_pos=1))
    np.testing.assert_array_equal(store.suffix_embs[2], encode_span(ENC, [7], start_pos=4))
    # empty prefix entry is the zero vector
    assert np.all(store.prefix_embs[0] == 0.0)


def test_build_store_include_current_shifts_suffix_positions():
    sents = [Sentence(0, (4, 5, 6, 7))]
    store = build_store(sents, ENC, RetrievalConfig(m=2, include_current=True))
    # split_pos=2 stores suffix [5, 6] starting at absolute position 2
    np.testing.assert_array_equal(store.suffix_embs[1], encode_span(ENC, [5, 6], start_pos=2))


def test_build_store_rejects_unindexable_corpus():
    with pytest.raises(ValueError, match="no indexable splits"):
        build_store([Sentence(0, (4,))], ENC, RetrievalConfig())
    with pytest.raises(ValueError):
        build_store([], ENC, RetrievalConfig())


def test_search_orthogonal_prefixes():
    store, _ = random_store(0)
    # query equal to one entry's prefix embedding returns that entry first
    target = next(i for i in range(len(store)) if store.prefix_embs[i].any())
    hits = search(store, store.prefix_embs[target], K=1)
    assert hits[0].entry_id == brute_force_search(store, store.prefix_embs[target], 1)[0]


def test_search_excludes_sentence():
    store, _ = random_store(1)
    target = next(i for i in range(len(store)) if store.prefix_embs[i].any())
    sid = int(store.sentence_ids[target])
    hits = search(store, store.prefix_embs[target], K=len(store), exclude_sentence_id=sid)
    assert all(store.sentence_ids[h.entry_id] != sid for h in hits)
    assert target not in [h.entry_id for h in hits]


def test_search_validates_inputs():
    store, _ = random_store(2)
    with pytest.raises(ValueError):
        search(store, store.prefix_embs[0], K=0)
    with pytest.raises(ValueError, match="dimension"):
        search(store, np.zeros(7), K=1)


def test_search_tie_break_by_entry_id():
    # a zero query ties every entry at score 0.0 exactly
    sents = [Sentence(0, (4, 5, 6)), Sentence(1, (4, 5, 6)), Sentence(2, (4, 5, 6))]
    store = build_store(sents, ENC, RetrievalConfig())
    hits = search(store, np.zeros(store.d_enc), K=4)
    assert [h.score for h in hits] == [0.0] * 4
    assert [h.entry_id for h in hits] == [0, 1, 2, 3]


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=10_000), st.integers(min_value=1, max_value=12))
def test_search_matches_brute_force(seed, K):
    store, _ = random_store(seed % 50, n_sentences=30)
    rng = np.random.default_rng(seed)
    query = rng.normal(size=store.d_enc)
    exclude = int(rng.integers(0, 30)) if rng.random() < 0.5 else None
    hits = search(store, query, K=K, exclude_sentence_id=exclude)
    assert [h.entry_id for h in hits] == brute_force_search(store, query, K, exclude)
    scores = [h.score for h in hits]
    assert scores == sorted(scores, reverse=True)


def test_block_positions_stride():
    assert block_positions(4, 1) == [1, 2, 3]
    assert block_positions(5, 2) == [1, 3]
    assert block_positions(1, 1) == []


def test_precompute_blocks_and_exclusion():
    store, sents = random_store(5, n_sentences=25)
    cfg = RetrievalConfig(K=4, delta=2)
    table = precompute_retrievals(store, sents, cfg)
    for s in sents:
        blocks = table[s.sentence_id]
        assert len(blocks) == len(block_positions(s.length, 2))
        for ids in blocks:
            assert len(ids) <= 4
            assert all(store.sentence_ids[e] != s.sentence_id for e in ids)


def test_precompute_matches_search_oracle():
    store, sents = random_store(6, n_sentences=20)
    cfg = RetrievalConfig(K=3, delta=1)
    table = precompute_retrievals(store, sents, cfg)
    enc = SpanEncoder(store.encoder_cfg, 60)
    for s in sents[:5]:
        for bi, b in enumerate(block_positions(s.length, 1)):
            expected = search(
                store, enc.encode(s.tokens[:b], start_pos=1), 3, exclude_sentence_id=s.sentence_id
            )
            assert table[s.sentence_id][bi] == [h.entry_id for h in expected]


def test_precompute_no_exclusion_for_held_out():
    store, sents = random_store(7, n_sentences=15)
    held = [Sentence(3, (4, 5, 6, 7))]  # id collides with a store sentence on purpose
    table = precompute_retrievals(store, held, RetrievalConfig(K=50), exclude_same_sentence=False)
    all_ids = {e for b in table[3] for e in b}
    assert any(store.sentence_ids[e] == 3 for e in all_ids)


def test_precompute_deterministic():
    store, sents = random_store(8)
    t1 = precompute_retrievals(store, sents, RetrievalConfig(K=4))
    t2 = precompute_retrievals(store, sents, RetrievalConfig(K=4))
    assert t1.blocks == t2.blocks


# -------------------------- persistence --------------------------


def test_store_roundtrip_bit_exact(tmp_path):
    store, _ = random_store(9)
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_store(store, p1)
    loaded = load_store(p1)
    np.testing.assert_array_equal(loaded.prefix_embs, store.prefix_embs)
    np.testing.assert_array_equal(loaded.suffix_embs, store.suffix_embs)
    np.testing.assert_array_equal(loaded.sentence_ids, store.sentence_ids)
    assert loaded.encoder_cfg == store.encoder_cfg
    assert loaded.retrieval_cfg == store.retrieval_cfg
    save_store(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert store_digest(loaded) == store_digest(store)


SECTION_OFFSETS = [
    ("magic", 2),
    ("version", 4 + 2),
    ("encoder_config", 8 + 10),
    ("retrieval_config", 28 + 5),
    ("entry_count", 41 + 4),
    ("entries", 49 + 100),
]


@pytest.mark.parametrize("section,offset", SECTION_OFFSETS)
def test_store_truncation_names_section(tmp_path, section, offset):
    store, _ = random_store(10)
    path = tmp_path / "s.bin"
    save_store(store, path)
    data = path.read_bytes()
    assert offset < len(data)
    path.write_bytes(data[:offset])
    with pytest.raises(StoreFormatError) as exc_info:
        load_store(path)
    assert exc_info.value.section == section
    assert f"unexpected end of section: {section}" in str(exc_info.value)


def test_store_bad_magic(tmp_path):
    path = tmp_path / "s.bin"
    store, _ = random_store(11)
    save_store(store, path)
    data = bytearray(path.read_bytes())
    data[:4] = b"NOPE"
    path.write_bytes(bytes(data))
    with pytest.raises(StoreFormatError) as exc_info:
        load_store(path)
    assert exc_info.value.section == "magic"


def test_retrieval_table_roundtrip(tmp_path):
    store, sents = random_store(12)
    table = precompute_retrievals(store, sents, RetrievalConfig(K=4))
    path = tmp_path / "table.jsonl"
    save_retrieval_table(table, path)
    loaded = load_retrieval_table(path, K=4, delta=1)
    assert loaded.blocks == table.blocks
    # spec'd JSONL schema
    import json

    first = json.loads(path.read_text().splitlines()[0])
    assert set(first) == {"sentence_id", "blocks"}
