"""Corpus loading, vocabulary, and prefix/current-word/suffix split enumeration.

Sentences are lowercased, whitespace-tokenized lines. Exact duplicate token
sequences are dropped (first occurrence kept) and sentence ids are assigned
densely in file order after dedup. Every split keeps the invariant that
``prefix + [current] + untruncated suffix`` reconstructs the sentence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

PAD_ID = 0
UNK_ID = 1
BOS_ID = 2
EOS_ID = 3
SPECIAL_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>")
NUM_SPECIALS = len(SPECIAL_TOKENS)


class CorpusError(ValueError):
    pass


@dataclass
class Vocabulary:
    """Dense token <-> id mapping with ids 0..3 reserved for specials."""

    token_to_id: dict[str, int] = field(default_factory=dict)
    id_to_token: list[str] = field(default_factory=lambda: list(SPECIAL_TOKENS))

    def __post_init__(self) -> None:
        if not self.token_to_id:
            self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def add(self, token: str) -> int:
        tid = self.token_to_id.get(token)
        if tid is None:
            tid = len(self.id_to_token)
            self.token_to_id[token] = tid
            self.id_to_token.append(token)
        return tid

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def decode(self, ids: list[int]) -> str:
        return " ".join(self.id_to_token[i] for i in ids)

    def save(self, path: str | Path) -> None:
        """One corpus token per line; line number = id - 4."""
        with open(path, "w", encoding="utf-8") as fh:
            for token in self.id_to_token[NUM_SPECIALS:]:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        vocab = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                vocab.add(line.rstrip("\n"))
        return vocab


@dataclass(frozen=True)
class Sentence:
    sentence_id: int
    tokens: tuple[int, ...]

    @property
    def length(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class SplitRecord:
    """One (prefix, current word, suffix) partition at 1-based position i.

    ``prefix`` is w_1..w_{i-1}, ``current`` is w_i, ``suffix`` is the
    truncated continuation (w_{i+1}.. by default, w_i.. when the current
    word is kept in for the ablation). ``full_suffix_len`` is the length
    before truncation.
    """

    sentence_id: int
    split_pos: int
    prefix: tuple[int, ...]
    current: int
    suffix: tuple[int, ...]
    full_suffix_len: int


@dataclass
class CorpusLoadResult:
    sentences: list[Sentence]
    vocab: Vocabulary
    skipped_blank: int
    dropped_duplicates: int


def tokenize_line(line: str) -> list[str]:
    return line.lower().split()


def load_corpus(
    path: str | Path,
    vocab_mode: str = "build",
    existing_vocab: Vocabulary | None = None,
) -> CorpusLoadResult:
    """Load one-sentence-per-line UTF-8 text into unique Sentences.

    ``vocab_mode="build"`` assigns new ids in first-occurrence order;
    ``"apply"`` maps out-of-vocabulary tokens to UNK using
    ``existing_vocab``.
    """
    if vocab_mode not in ("build", "apply"):
        raise CorpusError(f"unknown vocab_mode: {vocab_mode!r}")
    if vocab_mode == "apply" and existing_vocab is None:
        raise CorpusError("apply mode requires an existing vocabulary")
    vocab = existing_vocab if vocab_mode == "apply" else (existing_vocab or Vocabulary())

    sentences: list[Sentence] = []
    seen: set[tuple[int, ...]] = set()
    skipped_blank = 0
    dropped_duplicates = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            words = tokenize_line(line)
            if not words:
                skipped_blank += 1
                continue
            if vocab_mode == "build":
                ids = tuple(vocab.add(w) for w in words)
            else:
                ids = tuple(vocab.lookup(w) for w in words)
            if ids in seen:
                dropped_duplicates += 1
                continue
            seen.add(ids)
            sentences.append(Sentence(sentence_id=len(sentences), tokens=ids))
    if not sentences:
        raise CorpusError("empty corpus")
    return CorpusLoadResult(sentences, vocab, skipped_blank, dropped_duplicates)


def enumerate_splits(
    sentence: Sentence, m: int = 10, include_current: bool = False
) -> list[SplitRecord]:
    """All partitions at valid positions 0 < i < N, suffix truncated to m tokens."""
    if m < 1:
        raise ValueError("suffix truncation m must be >= 1")
    toks = sentence.tokens
    n = len(toks)
    records = []
    for i in range(1, n):
        if include_current:
            suffix = toks[i - 1 : i - 1 + m]
            full_len = n - i + 1
        else:
            suffix = toks[i : i + m]
            full_len = n - i
        records.append(
            SplitRecord(
                sentence_id=sentence.sentence_id,
                split_pos=i,
                prefix=toks[: i - 1],
                current=toks[i - 1],
                suffix=suffix,
                full_suffix_len=full_len,
            )
        )
    return records


def corpus_split_count(sentences: list[Sentence]) -> int:
    """Number of store entries the corpus will produce: sum of max(N-1, 0)."""
    return sum(max(s.length - 1, 0) for s in sentences)
