"""Autoregressive generation with progressive retrieval, and perplexity evaluation.

Generation starts from BOS, retrieves whenever the emitted word prefix reaches
a stride position (1, 1+delta, ...), and feeds the growing concatenation of
retrieved blocks through the same visibility mask used in training. No
sentence exclusion is applied at inference. Perplexity counts EOS as a
predicted token and excludes BOS and PAD.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import BOS_ID, EOS_ID, PAD_ID, Sentence
from .encoder import SpanEncoder
from .model import ModelParams, SequenceBatch, forward
from .store import (
    EmbeddingStore,
    RetrievalConfig,
    RetrievalTable,
    canonical_digest,
    precompute_retrievals,
    search,
    store_digest,
)
from .trainer import assemble_context, context_mask, dataset_nll


@dataclass(frozen=True)
class GenerationConfig:
    strategy: str = "greedy"  # greedy | topk | temperature
    k_s: int = 10
    temperature: float = 1.0
    seed: int = 0
    max_len: int = 32

    def __post_init__(self) -> None:
        if self.strategy not in ("greedy", "topk", "temperature"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class GenerationResult:
    tokens: list[int]  # emitted word ids, prompt included, BOS/EOS excluded
    ended_with_eos: bool
    retrieval_calls: int
    blocks: list[list[int]] = field(default_factory=list)  # entry ids per block
    steps: list[dict] = field(default_factory=list)


@dataclass
class EvalReport:
    split: str
    ppl: float
    nll_sum: float
    token_count: int
    config_digest: str

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "ppl": self.ppl,
            "nll_sum": self.nll_sum,
            "token_count": self.token_count,
            "config_digest": self.config_digest,
        }


def _pick_token(logits: np.ndarray, cfg: GenerationConfig, rng: np.random.Generator) -> int:
    if cfg.strategy == "greedy":
        return int(np.argmax(logits))
    scaled = logits / cfg.temperature
    if cfg.strategy == "topk":
        cand = np.argsort(-scaled, kind="stable")[: cfg.k_s]
        scaled = scaled[cand]
    else:
        cand = np.arange(logits.shape[0])
    z = scaled - scaled.max()
    probs = np.exp(z)
    probs /= probs.sum()
    return int(cand[rng.choice(len(cand), p=probs)])


def generate(
    params: ModelParams,
    store: EmbeddingStore,
    prompt_tokens: list[int],
    gen_cfg: GenerationConfig,
    retrieval_cfg: RetrievalConfig | None = None,
) -> GenerationResult:
    """Emit tokens until EOS or max_len, retrieving at every stride position.

    Retrieval queries use the emitted word prefix only (BOS stripped); a new
    block is fetched eagerly as soon as the prefix length hits a stride
    position, mirroring the training-table schedule.
    """
    rcfg = retrieval_cfg or store.retrieval_cfg
    max_words = min(gen_cfg.max_len, params.config.max_seq_len - 1)
    if len(prompt_tokens) >= max_words:
        raise ValueError("prompt does not leave room for generation")
    enc = SpanEncoder(store.encoder_cfg, params.config.vocab_size)
    rng = np.random.default_rng(gen_cfg.seed)

    words = list(prompt_tokens)
    blocks: list[list[int]] = []
    steps: list[dict] = []
    calls = 0

    def retrieve_due() -> None:
        nonlocal calls
        while len(blocks) * rcfg.delta + 1 <= len(words):
            b = len(blocks) * rcfg.delta + 1
            hits = search(store, enc.encode(words[:b], start_pos=1), rcfg.K)
            blocks.append([h.entry_id for h in hits])
            calls += 1
            steps.append({"event": "retrieve", "prefix_len": b, "entry_ids": blocks[-1]})

    retrieve_due()  # stride positions already covered by the prompt
    ended = False
    while len(words) < max_words:
        ctx = assemble_context(blocks, store, rcfg.K, rcfg.delta)
        T = len(words) + 1
        tokens = np.asarray([[BOS_ID] + words], dtype=np.int64)
        dummy = np.zeros_like(tokens)
        batch = SequenceBatch(
            tokens=tokens,
            targets=dummy,
            pad_mask=np.ones_like(tokens, dtype=bool),
            contexts=[ctx],
            keys=ctx.keys[None],
            values=ctx.values[None],
            ret_mask=context_mask(ctx, T, ctx.J)[None],
        )
        logits = forward(params, batch)[0, -1]
        next_id = _pick_token(logits, gen_cfg, rng)
        steps.append({"event": "emit", "token_id": next_id})
        if next_id == EOS_ID:
            ended = True
            break
        words.append(next_id)
        retrieve_due()
    return GenerationResult(
        tokens=words, ended_with_eos=ended, retrieval_calls=calls, blocks=blocks, steps=steps
    )


def perplexity(
    params: ModelParams,
    store: EmbeddingStore | None,
    sentences: list[Sentence],
    retrieval_cfg: RetrievalConfig | None = None,
    table: RetrievalTable | None = None,
    batch_size: int = 64,
    baseline: bool = False,
    split: str = "eval",
) -> EvalReport:
    """exp(total NLL / predicted tokens); EOS predicted, BOS/PAD excluded.

    Held-out sentences are retrieved against with no exclusion; pass a
    precomputed table to skip the retrieval pass.
    """
    if not sentences:
        raise ValueError("empty dataset")
    if not baseline and table is None:
        if store is None:
            raise ValueError("retrieval evaluation requires a store")
        table = precompute_retrievals(
            store, sentences, retrieval_cfg or store.retrieval_cfg, exclude_same_sentence=False
        )
    nll_sum, count = dataset_nll(params, sentences, store, table, batch_size, baseline=baseline)
    digest = canonical_digest(
        {
            "store": store_digest(store) if store is not None else None,
            "model": {
                "vocab_size": params.config.vocab_size,
                "d_model": params.config.d_model,
                "n_layers": params.config.n_layers,
                "n_heads": params.config.n_heads,
            },
            "baseline": baseline,
        }
    )
    return EvalReport(
        split=split,
        ppl=math.exp(nll_sum / count),
        nll_sum=nll_sum,
        token_count=count,
        config_digest=digest,
    )
