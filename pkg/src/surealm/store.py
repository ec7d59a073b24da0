"""Prefix-suffix embedding store: exact top-K inner-product search + persistence.

One entry per (sentence, split position): the encoded prefix is the key, the
encoded suffix the value, the current word plain metadata. Search is an exact
scan (desk scale makes ANN pointless and keeps the brute-force oracle
trivially checkable); ties break by ascending entry id. Entry ids are dense
in (sentence_id, split_pos) order, so entry_id == row index everywhere.

Binary store file, little-endian, in sections:

    magic            4 bytes  b"SURE"
    version          u32
    encoder_config   d_enc u32, seed u64, pe_base f64
    retrieval_config K u32, delta u32, m u32, include_current u8
    entry_count      u64
    entries          per entry: entry_id u64, sentence_id u64, split_pos u32,
                     current_word u32, prefix_emb d_enc x f64,
                     suffix_emb d_enc x f64

Retrieval tables persist as JSON Lines: {"sentence_id": s, "blocks": [[entry_id, ...], ...]}.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Sentence, corpus_split_count, enumerate_splits
from .encoder import EncoderConfig, SpanEncoder

MAGIC = b"SURE"
VERSION = 1


class StoreFormatError(ValueError):
    def __init__(self, message: str, section: str):
        super().__init__(message)
        self.section = section


@dataclass(frozen=True)
class RetrievalConfig:
    K: int = 8
    delta: int = 1
    m: int = 10
    include_current: bool = False

    def __post_init__(self) -> None:
        if self.K < 1 or self.delta < 1 or self.m < 1:
            raise ValueError("K, delta, m must all be >= 1")


@dataclass(frozen=True)
class StoreEntry:
    entry_id: int
    sentence_id: int
    split_pos: int
    current_word: int
    prefix_emb: np.ndarray
    suffix_emb: np.ndarray


@dataclass(frozen=True)
class Hit:
    entry_id: int
    score: float
    prefix_emb: np.ndarray
    suffix_emb: np.ndarray


@dataclass
class EmbeddingStore:
    """Immutable after build; columns are parallel arrays indexed by entry_id."""

    encoder_cfg: EncoderConfig
    retrieval_cfg: RetrievalConfig
    sentence_ids: np.ndarray  # [n] int64
    split_positions: np.ndarray  # [n] int32
    current_words: np.ndarray  # [n] int32
    prefix_embs: np.ndarray  # [n, d_enc] f64
    suffix_embs: np.ndarray  # [n, d_enc] f64

    def __len__(self) -> int:
        return self.prefix_embs.shape[0]

    @property
    def d_enc(self) -> int:
        return self.encoder_cfg.d_enc

    def entry(self, entry_id: int) -> StoreEntry:
        return StoreEntry(
            entry_id=entry_id,
            sentence_id=int(self.sentence_ids[entry_id]),
            split_pos=int(self.split_positions[entry_id]),
            current_word=int(self.current_words[entry_id]),
            prefix_emb=self.prefix_embs[entry_id],
            suffix_emb=self.suffix_embs[entry_id],
        )


@dataclass
class RetrievalTable:
    """Per-sentence retrieval blocks; block b holds entry ids for the prefix w_1..w_b."""

    K: int
    delta: int
    blocks: dict[int, list[list[int]]] = field(default_factory=dict)

    def __getitem__(self, sentence_id: int) -> list[list[int]]:
        return self.blocks[sentence_id]

    def __contains__(self, sentence_id: int) -> bool:
        return sentence_id in self.blocks


def block_positions(n_tokens: int, delta: int) -> list[int]:
    """Stride positions 1, 1+delta, ... strictly below the sentence length."""
    return list(range(1, n_tokens, delta))


def build_store(
    sentences: list[Sentence],
    encoder_cfg: EncoderConfig,
    retrieval_cfg: RetrievalConfig,
) -> EmbeddingStore:
    """Encode every split of every sentence into one store entry."""
    if not sentences:
        raise ValueError("corpus is empty")
    n = corpus_split_count(sentences)
    if n == 0:
        raise ValueError("no indexable splits")
    vocab_size = max(max(s.tokens) for s in sentences) + 1
    enc = SpanEncoder(encoder_cfg, vocab_size)
    d = encoder_cfg.d_enc

    sentence_ids = np.empty(n, dtype=np.int64)
    split_positions = np.empty(n, dtype=np.int32)
    current_words = np.empty(n, dtype=np.int32)
    prefix_embs = np.empty((n, d), dtype=np.float64)
    suffix_embs = np.empty((n, d), dtype=np.float64)

    row = 0
    for sent in sentences:
        for rec in enumerate_splits(sent, retrieval_cfg.m, retrieval_cfg.include_current):
            sentence_ids[row] = rec.sentence_id
            split_positions[row] = rec.split_pos
            current_words[row] = rec.current
            prefix_embs[row] = enc.encode(rec.prefix, start_pos=1)
            suffix_start = rec.split_pos if retrieval_cfg.include_current else rec.split_pos + 1
            suffix_embs[row] = enc.encode(rec.suffix, start_pos=suffix_start)
            row += 1
    assert row == n
    return EmbeddingStore(
        encoder_cfg=encoder_cfg,
        retrieval_cfg=retrieval_cfg,
        sentence_ids=sentence_ids,
        split_positions=split_positions,
        current_words=current_words,
        prefix_embs=prefix_embs,
        suffix_embs=suffix_embs,
    )


def _topk_ids(scores: np.ndarray, k: int) -> np.ndarray:
    """Exact top-k indices by (score desc, index asc); -inf marks excluded rows."""
    n_eligible = int(np.count_nonzero(scores != -np.inf))
    if n_eligible == 0:
        return np.empty(0, dtype=np.int64)
    if n_eligible <= k:
        cand = np.flatnonzero(scores != -np.inf)
    else:
        kth = np.partition(scores, scores.shape[0] - k)[scores.shape[0] - k]
        cand = np.flatnonzero(scores >= kth)
    order = np.argsort(-scores[cand], kind="stable")
    return cand[order[:k]].astype(np.int64)


def search(
    store: EmbeddingStore,
    query_emb: np.ndarray,
    K: int,
    exclude_sentence_id: int | None = None,
) -> list[Hit]:
    """Exact top-K hits by inner product, optionally excluding one sentence."""
    if K < 1:
        raise ValueError("K must be >= 1")
    query_emb = np.asarray(query_emb, dtype=np.float64)
    if query_emb.shape != (store.d_enc,):
        raise ValueError(f"query dimension {query_emb.shape} != ({store.d_enc},)")
    scores = store.prefix_embs @ query_emb
    if exclude_sentence_id is not None:
        scores = np.where(store.sentence_ids == exclude_sentence_id, -np.inf, scores)
    ids = _topk_ids(scores, K)
    return [
        Hit(
            entry_id=int(i),
            score=float(scores[i]),
            prefix_emb=store.prefix_embs[i],
            suffix_emb=store.suffix_embs[i],
        )
        for i in ids
    ]


def precompute_retrievals(
    store: EmbeddingStore,
    sentences: list[Sentence],
    retrieval_cfg: RetrievalConfig | None = None,
    exclude_same_sentence: bool = True,
) -> RetrievalTable:
    """Blocks of top-K hits for each stride prefix of each sentence.

    Training tables exclude hits from the queried sentence itself;
    held-out tables (sentences not in the store) pass
    ``exclude_same_sentence=False``.
    """
    cfg = retrieval_cfg or store.retrieval_cfg
    vocab_size = int(store.current_words.max(initial=0)) + 1
    if sentences:
        vocab_size = max(vocab_size, max(max(s.tokens) for s in sentences) + 1)
    enc = SpanEncoder(store.encoder_cfg, vocab_size)
    table = RetrievalTable(K=cfg.K, delta=cfg.delta)
    for sent in sentences:
        positions = block_positions(sent.length, cfg.delta)
        if not positions:
            table.blocks[sent.sentence_id] = []
            continue
        queries = np.stack([enc.encode(sent.tokens[:b], start_pos=1) for b in positions])
        scores = queries @ store.prefix_embs.T
        if exclude_same_sentence:
            scores[:, store.sentence_ids == sent.sentence_id] = -np.inf
        table.blocks[sent.sentence_id] = [
            [int(i) for i in _topk_ids(scores[q], cfg.K)] for q in range(len(positions))
        ]
    return table


def canonical_digest(obj) -> str:
    """Hex digest of the canonical JSON form; order-insensitive for dicts."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def store_digest(store: EmbeddingStore) -> str:
    """Identity of a store's configuration (not its contents)."""
    e, r = store.encoder_cfg, store.retrieval_cfg
    return canonical_digest(
        {
            "encoder": {"d_enc": e.d_enc, "seed": e.seed, "pe_base": e.pe_base},
            "retrieval": {
                "K": r.K,
                "delta": r.delta,
                "m": r.m,
                "include_current": r.include_current,
            },
            "entries": len(store),
        }
    )


# -------------------------- persistence --------------------------


def _read_exact(fh, size: int, section: str) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise StoreFormatError(f"unexpected end of section: {section}", section)
    return data


def _entry_dtype(d_enc: int) -> np.dtype:
    return np.dtype(
        [
            ("entry_id", "<u8"),
            ("sentence_id", "<u8"),
            ("split_pos", "<u4"),
            ("current_word", "<u4"),
            ("prefix_emb", "<f8", (d_enc,)),
            ("suffix_emb", "<f8", (d_enc,)),
        ]
    )


def save_store(store: EmbeddingStore, path: str | Path) -> None:
    n = len(store)
    rec = np.zeros(n, dtype=_entry_dtype(store.d_enc))
    rec["entry_id"] = np.arange(n, dtype=np.uint64)
    rec["sentence_id"] = store.sentence_ids.astype(np.uint64)
    rec["split_pos"] = store.split_positions.astype(np.uint32)
    rec["current_word"] = store.current_words.astype(np.uint32)
    rec["prefix_emb"] = store.prefix_embs
    rec["suffix_emb"] = store.suffix_embs
    ecfg, rcfg = store.encoder_cfg, store.retrieval_cfg
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<IQd", ecfg.d_enc, ecfg.seed & 0xFFFFFFFFFFFFFFFF, ecfg.pe_base))
        fh.write(struct.pack("<IIIB", rcfg.K, rcfg.delta, rcfg.m, int(rcfg.include_current)))
        fh.write(struct.pack("<Q", n))
        fh.write(rec.tobytes())


def load_store(path: str | Path) -> EmbeddingStore:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise StoreFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", "magic")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise StoreFormatError(f"unsupported version {version}", "version")
        d_enc, seed, pe_base = struct.unpack(
            "<IQd", _read_exact(fh, struct.calcsize("<IQd"), "encoder_config")
        )
        K, delta, m, include_current = struct.unpack(
            "<IIIB", _read_exact(fh, struct.calcsize("<IIIB"), "retrieval_config")
        )
        (count,) = struct.unpack("<Q", _read_exact(fh, 8, "entry_count"))
        dtype = _entry_dtype(d_enc)
        raw = _read_exact(fh, count * dtype.itemsize, "entries")
    rec = np.frombuffer(raw, dtype=dtype)
    return EmbeddingStore(
        encoder_cfg=EncoderConfig(d_enc=d_enc, seed=seed, pe_base=pe_base),
        retrieval_cfg=RetrievalConfig(K=K, delta=delta, m=m, include_current=bool(include_current)),
        sentence_ids=rec["sentence_id"].astype(np.int64),
        split_positions=rec["split_pos"].astype(np.int32),
        current_words=rec["current_word"].astype(np.int32),
        prefix_embs=np.ascontiguousarray(rec["prefix_emb"], dtype=np.float64),
        suffix_embs=np.ascontiguousarray(rec["suffix_emb"], dtype=np.float64),
    )


def save_retrieval_table(table: RetrievalTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sid in sorted(table.blocks):
            fh.write(json.dumps({"sentence_id": sid, "blocks": table.blocks[sid]}) + "\n")


def load_retrieval_table(path: str | Path, K: int, delta: int) -> RetrievalTable:
    table = RetrievalTable(K=K, delta=delta)
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            table.blocks[int(obj["sentence_id"])] = [[int(e) for e in b] for b in obj["blocks"]]
    return table
