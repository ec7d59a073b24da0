import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surealm.corpus import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    UNK_ID,
    CorpusError,
    Sentence,
    Vocabulary,
    corpus_split_count,
    enumerate_splits,
    load_corpus,
)


def write_lines(tmp_path, lines, name="corpus.txt"):
    p = tmp_path / name
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return p


def test_load_dedups_identical_lines(tmp_path):
    p = write_lines(tmp_path, ["how can i help you", "how can i help you", "book a taxi"])
    res = load_corpus(p)
    assert [s.sentence_id for s in res.sentences] == [0, 1]
    assert res.dropped_duplicates == 1
    assert res.vocab.decode(list(res.sentences[0].tokens)) == "how can i help you"


def test_load_single_token_sentence(tmp_path):
    res = load_corpus(write_lines(tmp_path, ["a"]))
    assert len(res.sentences) == 1
    assert res.sentences[0].length == 1
    assert enumerate_splits(res.sentences[0]) == []


def test_load_lowercases_and_skips_blank(tmp_path):
    p = write_lines(tmp_path, ["Hello World", "   ", "HELLO world"])
    res = load_corpus(p)
    assert len(res.sentences) == 1  # case-folded duplicate dropped
    assert res.skipped_blank == 1


def test_load_empty_file_errors(tmp_path):
    p = tmp_path / "empty.txt"
    p.write_text("", encoding="utf-8")
    with pytest.raises(CorpusError, match="empty corpus"):
        load_corpus(p)


def test_apply_mode_maps_oov_to_unk(tmp_path):
    res = load_corpus(write_lines(tmp_path, ["a b c"]))
    applied = load_corpus(
        write_lines(tmp_path, ["a zzz c"], name="valid.txt"),
        vocab_mode="apply",
        existing_vocab=res.vocab,
    )
    assert applied.sentences[0].tokens[1] == UNK_ID
    assert applied.sentences[0].tokens[0] == res.vocab.token_to_id["a"]


def test_dedup_idempotence(tmp_path):
    p = write_lines(tmp_path, ["a b c", "b c d", "a b c", "e"])
    r1, r2 = load_corpus(p), load_corpus(p)
    assert r1.sentences == r2.sentences
    assert r1.vocab.id_to_token == r2.vocab.id_to_token


def test_vocab_specials_and_roundtrip(tmp_path):
    res = load_corpus(write_lines(tmp_path, ["a b c"]))
    v = res.vocab
    assert (PAD_ID, UNK_ID, BOS_ID, EOS_ID) == (0, 1, 2, 3)
    assert v.id_to_token[:4] == ["<pad>", "<unk>", "<bos>", "<eos>"]
    assert all(v.token_to_id[v.id_to_token[i]] == i for i in range(len(v)))
    v.save(tmp_path / "vocab.txt")
    loaded = Vocabulary.load(tmp_path / "vocab.txt")
    assert loaded.id_to_token == v.id_to_token
    # line number = id - 4
    lines = (tmp_path / "vocab.txt").read_text().splitlines()
    assert lines[0] == v.id_to_token[4]


def test_enumerate_splits_three_tokens():
    s = Sentence(0, (10, 11, 12))
    recs = enumerate_splits(s, m=10)
    assert len(recs) == 2
    assert (recs[0].split_pos, recs[0].prefix, recs[0].current, recs[0].suffix) == (
        1,
        (),
        10,
        (11, 12),
    )
    assert (recs[1].split_pos, recs[1].prefix, recs[1].current, recs[1].suffix) == (
        2,
        (10,),
        11,
        (12,),
    )


def test_enumerate_splits_truncation():
    s = Sentence(0, (4, 5, 6, 7, 8))
    recs = enumerate_splits(s, m=2)
    assert recs[0].suffix == (5, 6)
    assert recs[0].full_suffix_len == 4


def test_enumerate_splits_include_current():
    s = Sentence(0, (4, 5, 6))
    recs = enumerate_splits(s, m=10, include_current=True)
    assert recs[1].suffix == (5, 6)  # starts at the current word
    assert recs[1].current == 5


tokens_st = st.lists(st.integers(min_value=4, max_value=60), min_size=1, max_size=12)


@given(tokens_st, st.integers(min_value=1, max_value=12))
def test_split_reconstruction(tokens, m):
    s = Sentence(7, tuple(tokens))
    n = len(tokens)
    recs = enumerate_splits(s, m=m)
    assert len(recs) == max(n - 1, 0)
    for rec in recs:
        i = rec.split_pos
        assert 0 < i < n
        assert len(rec.prefix) == i - 1
        assert len(rec.suffix) == min(m, n - i)
        full_suffix = tuple(tokens[i:])
        assert rec.prefix + (rec.current,) + full_suffix == tuple(tokens)
        # suffix begins at absolute position i+1
        assert rec.suffix == full_suffix[:m]


@given(st.lists(tokens_st, min_size=1, max_size=20))
def test_split_count_matches_enumeration(token_lists):
    sentences = [Sentence(i, tuple(t)) for i, t in enumerate(token_lists)]
    oracle = sum(len(enumerate_splits(s, m=5)) for s in sentences)
    assert corpus_split_count(sentences) == oracle


@settings(max_examples=25)
@given(tokens_st, st.integers(min_value=1, max_value=6))
def test_include_current_shifts_suffix(tokens, m):
    s = Sentence(0, tuple(tokens))
    excl = enumerate_splits(s, m=m, include_current=False)
    incl = enumerate_splits(s, m=m, include_current=True)
    for a, b in zip(excl, incl):
        assert b.suffix[0] == a.current
        assert b.suffix[1 : 1 + len(a.suffix[: m - 1])] == a.suffix[: m - 1]
