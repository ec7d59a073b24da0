"""Mini-batch training: collation, retrieval-context assembly, AdamW, checkpoints.

Batches are fixed-composition buckets (stable sort by (length, sentence_id),
chunked) whose order is reshuffled each epoch by a seeded permutation, so runs
are deterministic given the seeds. Validation perplexity is computed every
epoch and the checkpoint with the minimum value is kept. Metrics go to JSON
Lines, one object per (epoch, split).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import BOS_ID, EOS_ID, PAD_ID, Sentence
from .model import (
    ModelConfig,
    ModelParams,
    RetrievedContext,
    SequenceBatch,
    build_retrieval_mask,
    forward,
    init_params,
    loss_and_grads,
    nll_loss,
    param_specs,
    save_checkpoint,
)
from .store import EmbeddingStore, RetrievalTable


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 100
    epochs: int = 50
    shuffle_seed: int = 0
    grad_clip: float = 1.0

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


def assemble_context(
    block_ids: list[list[int]], store: EmbeddingStore, k: int, delta: int
) -> RetrievedContext:
    """Concatenate block hits into fixed-stride key/value matrices.

    Blocks with fewer than k hits are zero-padded; the pad rows are recorded
    in hits_per_block and masked out downstream.
    """
    num_blocks = len(block_ids)
    d = store.d_enc
    keys = np.zeros((num_blocks * k, d))
    values = np.zeros((num_blocks * k, d))
    hits_per_block = []
    for b, ids in enumerate(block_ids):
        ids = ids[:k]
        hits_per_block.append(len(ids))
        if ids:
            keys[b * k : b * k + len(ids)] = store.prefix_embs[ids]
            values[b * k : b * k + len(ids)] = store.suffix_embs[ids]
    return RetrievedContext(
        keys=keys,
        values=values,
        block_size=k,
        delta=delta,
        num_blocks=num_blocks,
        hits_per_block=hits_per_block,
    )


def context_mask(ctx: RetrievedContext, T: int, width: int) -> np.ndarray:
    """[T x width] additive mask for one sequence's context, -inf padded."""
    mask = np.full((T, width), -np.inf)
    if ctx.num_blocks:
        mask[:, : ctx.J] = build_retrieval_mask(T, ctx.num_blocks, ctx.block_size, ctx.delta)
        for b, h in enumerate(ctx.hits_per_block):
            if h < ctx.block_size:
                mask[:, b * ctx.block_size + h : (b + 1) * ctx.block_size] = -np.inf
    return mask


def collate(
    sentences: list[Sentence],
    table: RetrievalTable | None,
    store: EmbeddingStore | None,
    max_seq_len: int,
    baseline: bool = False,
) -> SequenceBatch:
    """BOS/EOS-wrapped, PAD-filled batch with per-sequence retrieval context.

    Contexts are padded to the widest J in the batch, padded columns forced
    to -inf. ``baseline=True`` (or table=None) produces a no-retrieval batch.
    """
    if not sentences:
        raise ValueError("empty batch")
    truncated = 0
    word_seqs = []
    for s in sentences:
        toks = list(s.tokens)
        if len(toks) > max_seq_len - 2:
            toks = toks[: max_seq_len - 2]
            truncated += 1
        word_seqs.append(toks)
    T = max(len(t) for t in word_seqs) + 2
    bsz = len(sentences)
    tokens = np.full((bsz, T), PAD_ID, dtype=np.int64)
    targets = np.full((bsz, T), PAD_ID, dtype=np.int64)
    for r, toks in enumerate(word_seqs):
        seq = [BOS_ID] + toks + [EOS_ID]
        tokens[r, : len(seq)] = seq
        targets[r, : len(seq) - 1] = seq[1:]
    pad_mask = targets != PAD_ID

    if baseline or table is None:
        return SequenceBatch(tokens, targets, pad_mask, truncated=truncated)

    k, delta = table.K, table.delta
    contexts = []
    for s, toks in zip(sentences, word_seqs):
        blocks = table[s.sentence_id]
        usable = len(range(1, len(toks), delta))
        contexts.append(assemble_context(blocks[:usable], store, k, delta))
    j_max = max(ctx.J for ctx in contexts)
    keys = np.zeros((bsz, j_max, store.d_enc))
    values = np.zeros((bsz, j_max, store.d_enc))
    ret_mask = np.full((bsz, T, j_max), -np.inf)
    for r, ctx in enumerate(contexts):
        keys[r, : ctx.J] = ctx.keys
        values[r, : ctx.J] = ctx.values
        ret_mask[r] = context_mask(ctx, T, j_max)
    return SequenceBatch(
        tokens,
        targets,
        pad_mask,
        contexts=contexts,
        keys=keys,
        values=values,
        ret_mask=ret_mask,
        truncated=truncated,
    )


def make_batches(sentences: list[Sentence], batch_size: int) -> list[list[Sentence]]:
    """Length-bucketed fixed batches: stable sort by (length, sentence_id), chunk."""
    ordered = sorted(sentences, key=lambda s: (s.length, s.sentence_id))
    return [ordered[i : i + batch_size] for i in range(0, len(ordered), batch_size)]


def dataset_nll(
    params: ModelParams,
    sentences: list[Sentence],
    store: EmbeddingStore | None,
    table: RetrievalTable | None,
    batch_size: int = 64,
    baseline: bool = False,
) -> tuple[float, int]:
    """Total NLL and token count; mean is invariant to batch partitioning."""
    nll_sum = 0.0
    total = 0
    for chunk in make_batches(sentences, batch_size):
        batch = collate(chunk, table, store, params.config.max_seq_len, baseline=baseline)
        loss, count = nll_loss(forward(params, batch), batch.targets, batch.pad_mask)
        nll_sum += loss * count
        total += count
    if total == 0:
        raise ValueError("no target tokens in dataset")
    return nll_sum, total


class AdamW:
    """Decoupled weight decay Adam; decay applies to matrices only."""

    def __init__(self, params: ModelParams, cfg: TrainConfig):
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}

    def step(self, params: ModelParams, grads: dict[str, np.ndarray], lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        c = self.cfg
        bc1 = 1.0 - c.beta1**t
        bc2 = 1.0 - c.beta2**t
        for name, p in params.tensors.items():
            g = grads[name]
            self.m[name] = c.beta1 * self.m[name] + (1.0 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1.0 - c.beta2) * (g * g)
            update = (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + c.eps)
            if p.ndim == 2:
                update = update + c.weight_decay * p
            p -= lr * update


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to the base rate, then linear decay to zero."""
    warmup = max(1, cfg.warmup_steps)
    if step <= warmup:
        return cfg.learning_rate * step / warmup
    if total_steps <= warmup:
        return cfg.learning_rate
    return cfg.learning_rate * max(0.0, (total_steps - step) / (total_steps - warmup))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


@dataclass
class TrainResult:
    best_params: ModelParams
    best_epoch: int
    best_val_ppl: float
    metrics: list[dict] = field(default_factory=list)


def _write_metrics(path: str | Path | None, metrics: list[dict]) -> None:
    if path is None:
        return
    with open(path, "w", encoding="utf-8") as fh:
        for row in metrics:
            fh.write(json.dumps(row) + "\n")


def _save_state(
    path: str | Path, params: ModelParams, opt: AdamW, epoch: int, best: dict, metrics: list[dict]
) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, _ in param_specs(params.config):
        arrays["param:" + name] = params.tensors[name]
        arrays["m:" + name] = opt.m[name]
        arrays["v:" + name] = opt.v[name]
    arrays["step"] = np.asarray(opt.step_count, dtype=np.int64)
    arrays["epoch"] = np.asarray(epoch, dtype=np.int64)
    arrays["best_epoch"] = np.asarray(best["epoch"], dtype=np.int64)
    arrays["best_val_ppl"] = np.asarray(best["val_ppl"], dtype=np.float64)
    arrays["metrics_json"] = np.asarray(json.dumps(metrics))
    np.savez(path, **arrays)


def _load_state(path: str | Path, params: ModelParams, opt: AdamW) -> tuple[int, dict, list[dict]]:
    data = np.load(path, allow_pickle=False)
    for name, _ in param_specs(params.config):
        params.tensors[name][...] = data["param:" + name]
        opt.m[name] = data["m:" + name].copy()
        opt.v[name] = data["v:" + name].copy()
    opt.step_count = int(data["step"])
    best = {"epoch": int(data["best_epoch"]), "val_ppl": float(data["best_val_ppl"])}
    metrics = json.loads(str(data["metrics_json"]))
    return int(data["epoch"]), best, metrics


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_sentences: list[Sentence],
    val_sentences: list[Sentence],
    store: EmbeddingStore | None,
    table: RetrievalTable | None,
    val_table: RetrievalTable | None,
    baseline: bool = False,
    metrics_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    state_path: str | Path | None = None,
    resume: bool = False,
    checkpoint_meta: dict | None = None,
    log=None,
) -> TrainResult:
    """Full training loop; deterministic given config seeds.

    Keeps the minimum-validation-perplexity checkpoint. ``resume=True``
    restores parameters, optimizer state, and metrics from ``state_path``
    and continues at the next epoch.
    """
    params = init_params(model_cfg)
    opt = AdamW(params, train_cfg)
    # batch composition is fixed across epochs; collate once, shuffle order only
    batches = [
        collate(chunk, table, store, model_cfg.max_seq_len, baseline=baseline)
        for chunk in make_batches(train_sentences, train_cfg.batch_size)
    ]
    val_batches = [
        collate(chunk, val_table, store, model_cfg.max_seq_len, baseline=baseline)
        for chunk in make_batches(val_sentences, train_cfg.batch_size)
    ]
    total_steps = train_cfg.epochs * len(batches)
    best = {"epoch": -1, "val_ppl": math.inf}
    best_params = params.copy()
    metrics: list[dict] = []
    start_epoch = 0

    if resume:
        if state_path is None or not Path(state_path).exists():
            raise FileNotFoundError(f"resume requested but no state at {state_path}")
        last_epoch, best, metrics = _load_state(state_path, params, opt)
        start_epoch = last_epoch + 1
        if checkpoint_path and Path(checkpoint_path).exists():
            from .model import load_checkpoint

            best_params, _ = load_checkpoint(checkpoint_path)

    for epoch in range(start_epoch, train_cfg.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng((train_cfg.shuffle_seed, epoch))
        order = rng.permutation(len(batches))
        loss_sum = 0.0
        token_sum = 0
        for bi in order:
            batch = batches[bi]
            loss, count, grads = loss_and_grads(params, batch)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss} at epoch {epoch} step {opt.step_count + 1}"
                )
            clip_gradients(grads, train_cfg.grad_clip)
            opt.step(params, grads, lr_at(opt.step_count + 1, total_steps, train_cfg))
            loss_sum += loss * count
            token_sum += count
        train_ms = (time.perf_counter() - t0) * 1000.0
        train_loss = loss_sum / token_sum
        metrics.append(
            {
                "epoch": epoch,
                "split": "train",
                "loss": train_loss,
                "ppl": math.exp(train_loss),
                "tokens": token_sum,
                "wall_ms": train_ms,
            }
        )

        t1 = time.perf_counter()
        val_nll = 0.0
        val_tokens = 0
        for batch in val_batches:
            loss, count = nll_loss(forward(params, batch), batch.targets, batch.pad_mask)
            val_nll += loss * count
            val_tokens += count
        val_loss = val_nll / val_tokens
        val_ppl = math.exp(val_loss)
        metrics.append(
            {
                "epoch": epoch,
                "split": "valid",
                "loss": val_loss,
                "ppl": val_ppl,
                "tokens": val_tokens,
                "wall_ms": (time.perf_counter() - t1) * 1000.0,
            }
        )
        if log:
            log(
                f"epoch {epoch:3d}  train loss {train_loss:.4f}  "
                f"val ppl {val_ppl:.4f}  ({train_ms:.0f} ms)"
            )

        if val_ppl < best["val_ppl"]:
            best = {"epoch": epoch, "val_ppl": val_ppl}
            best_params = params.copy()
            if checkpoint_path:
                meta = dict(checkpoint_meta or {})
                meta.update(epoch=epoch, val_ppl=val_ppl, baseline=baseline)
                save_checkpoint(best_params, checkpoint_path, meta)
        _write_metrics(metrics_path, metrics)
        if state_path:
            _save_state(state_path, params, opt, epoch, best, metrics)

    return TrainResult(
        best_params=best_params,
        best_epoch=best["epoch"],
        best_val_ppl=best["val_ppl"],
        metrics=metrics,
    )
