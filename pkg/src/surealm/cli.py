"""Command-line pipeline driver: index, precompute, train, eval, generate, inspect.

Configuration is JSON with nested sections plus a flat override layer:
repeatable ``--set section.key=value`` flags (and a few common shorthands).
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from .corpus import CorpusError, Vocabulary, corpus_split_count, load_corpus
from .decoder_eval import GenerationConfig, generate, perplexity
from .encoder import EncoderConfig, SpanEncoder
from .model import ModelConfig, load_checkpoint
from .store import (
    RetrievalConfig,
    StoreFormatError,
    build_store,
    canonical_digest,
    load_retrieval_table,
    load_store,
    precompute_retrievals,
    save_retrieval_table,
    save_store,
    search,
    store_digest,
)
from .trainer import TrainConfig, train

DEFAULTS: dict = {
    "corpus": {"train": "data/train.txt", "valid": "data/valid.txt", "test": ""},
    "encoder": {"d_enc": 64, "seed": 0x5EED_1DE5, "pe_base": 10000.0},
    "retrieval": {"K": 8, "delta": 1, "m": 10, "include_current": False},
    "model": {
        "d_model": 64,
        "n_layers": 2,
        "n_heads": 2,
        "d_ff": 128,
        "d_enc": 64,
        "max_seq_len": 64,
        "init_seed": 0,
    },
    "train": {
        "batch_size": 64,
        "learning_rate": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "weight_decay": 0.01,
        "warmup_steps": 100,
        "epochs": 50,
        "shuffle_seed": 0,
        "grad_clip": 1.0,
    },
    "generation": {"strategy": "greedy", "k_s": 10, "temperature": 1.0, "seed": 0, "max_len": 32},
    "output_dir": "runs/default",
}


class ConfigError(ValueError):
    pass


def _coerce(value: str, like) -> object:
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"expected boolean, got {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def build_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        loaded = json.loads(path.read_text(encoding="utf-8"))
        for section, content in loaded.items():
            if isinstance(content, dict):
                cfg.setdefault(section, {}).update(content)
            else:
                cfg[section] = content
    for item in getattr(args, "set", None) or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in cfg or not isinstance(cfg[section], dict) or key not in cfg[section]:
            raise ConfigError(f"unknown config key: {dotted}")
        cfg[section][key] = _coerce(value, cfg[section][key])
    for flag, dotted in [
        ("delta", ("retrieval", "delta")),
        ("topk", ("retrieval", "K")),
        ("suffix_len", ("retrieval", "m")),
        ("epochs", ("train", "epochs")),
    ]:
        value = getattr(args, flag, None)
        if value is not None:
            cfg[dotted[0]][dotted[1]] = value
    if getattr(args, "include_current", False):
        cfg["retrieval"]["include_current"] = True
    if getattr(args, "output_dir", None):
        cfg["output_dir"] = args.output_dir
    if cfg["model"]["d_enc"] != cfg["encoder"]["d_enc"]:
        raise ConfigError(
            f"d_enc mismatch: model {cfg['model']['d_enc']} vs encoder {cfg['encoder']['d_enc']}"
        )
    return cfg


def _encoder_cfg(cfg: dict) -> EncoderConfig:
    e = cfg["encoder"]
    return EncoderConfig(d_enc=e["d_enc"], seed=e["seed"], pe_base=e["pe_base"])


def _retrieval_cfg(cfg: dict) -> RetrievalConfig:
    r = cfg["retrieval"]
    return RetrievalConfig(
        K=r["K"], delta=r["delta"], m=r["m"], include_current=r["include_current"]
    )


def _train_cfg(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"])


def _model_cfg(cfg: dict, vocab_size: int) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(vocab_size=vocab_size, **m)


def _require_file(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not str(path) or not p.exists():
        raise ConfigError(f"{what} not found: {path}")
    return p


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_split(cfg: dict, split: str, vocab: Vocabulary):
    path = _require_file(cfg["corpus"][split], f"{split} corpus")
    return load_corpus(path, vocab_mode="apply", existing_vocab=vocab).sentences


def _load_vocab(cfg: dict) -> Vocabulary:
    return Vocabulary.load(_require_file(_out_dir(cfg) / "vocab.txt", "vocabulary (run index first)"))


# -------------------------- commands --------------------------


def cmd_index(cfg: dict) -> int:
    t0 = time.perf_counter()
    train_path = _require_file(cfg["corpus"]["train"], "training corpus")
    loaded = load_corpus(train_path, vocab_mode="build")
    out = _out_dir(cfg)
    loaded.vocab.save(out / "vocab.txt")
    store = build_store(loaded.sentences, _encoder_cfg(cfg), _retrieval_cfg(cfg))
    save_store(store, out / "store.bin")
    dt = time.perf_counter() - t0
    print(
        f"indexed {len(store)} entries from {len(loaded.sentences)} sentences "
        f"(vocab {len(loaded.vocab)}, {dt:.2f}s) -> {out / 'store.bin'}"
    )
    return 0


def cmd_precompute(cfg: dict) -> int:
    out = _out_dir(cfg)
    vocab = _load_vocab(cfg)
    store = load_store(_require_file(out / "store.bin", "store (run index first)"))
    rcfg = _retrieval_cfg(cfg)
    if (rcfg.m, rcfg.include_current) != (
        store.retrieval_cfg.m,
        store.retrieval_cfg.include_current,
    ):
        raise ConfigError(
            "store was built with different suffix settings; re-run index "
            f"(store m={store.retrieval_cfg.m} include_current="
            f"{store.retrieval_cfg.include_current})"
        )
    t0 = time.perf_counter()
    train_sents = _load_split(cfg, "train", vocab)
    if corpus_split_count(train_sents) != len(store):
        raise ConfigError("store entry count does not match the training corpus; re-run index")
    table = precompute_retrievals(store, train_sents, rcfg, exclude_same_sentence=True)
    save_retrieval_table(table, out / "retrieval_train.jsonl")
    n_blocks = sum(len(b) for b in table.blocks.values())
    lines = [f"train: {n_blocks} blocks for {len(train_sents)} sentences"]
    if cfg["corpus"]["valid"]:
        valid_sents = _load_split(cfg, "valid", vocab)
        vtable = precompute_retrievals(store, valid_sents, rcfg, exclude_same_sentence=False)
        save_retrieval_table(vtable, out / "retrieval_valid.jsonl")
        lines.append(
            f"valid: {sum(len(b) for b in vtable.blocks.values())} blocks "
            f"for {len(valid_sents)} sentences"
        )
    meta = {"K": rcfg.K, "delta": rcfg.delta, "store_digest": store_digest(store)}
    (out / "retrieval_meta.json").write_text(json.dumps(meta), encoding="utf-8")
    print("; ".join(lines) + f" ({time.perf_counter() - t0:.2f}s)")
    return 0


def cmd_train(cfg: dict, baseline: bool, resume: bool) -> int:
    out = _out_dir(cfg)
    vocab = _load_vocab(cfg)
    train_sents = _load_split(cfg, "train", vocab)
    valid_sents = _load_split(cfg, "valid", vocab)
    rcfg = _retrieval_cfg(cfg)

    store = table = vtable = None
    meta: dict = {"baseline": baseline}
    if not baseline:
        store = load_store(_require_file(out / "store.bin", "store (run index first)"))
        meta_path = _require_file(out / "retrieval_meta.json", "retrieval tables (run precompute first)")
        tmeta = json.loads(meta_path.read_text(encoding="utf-8"))
        if (tmeta["K"], tmeta["delta"]) != (rcfg.K, rcfg.delta):
            raise ConfigError(
                f"retrieval tables were precomputed with K={tmeta['K']} delta={tmeta['delta']}; "
                "re-run precompute"
            )
        if tmeta["store_digest"] != store_digest(store):
            raise ConfigError("retrieval tables do not match the store; re-run precompute")
        table = load_retrieval_table(out / "retrieval_train.jsonl", rcfg.K, rcfg.delta)
        vtable = load_retrieval_table(
            _require_file(out / "retrieval_valid.jsonl", "validation table"), rcfg.K, rcfg.delta
        )
        meta["store_digest"] = store_digest(store)

    suffix = "_baseline" if baseline else ""
    model_cfg = _model_cfg(cfg, len(vocab))
    result = train(
        model_cfg,
        _train_cfg(cfg),
        train_sents,
        valid_sents,
        store,
        table,
        vtable,
        baseline=baseline,
        metrics_path=out / f"metrics{suffix}.jsonl",
        checkpoint_path=out / f"best{suffix}.ckpt",
        state_path=out / f"last_state{suffix}.npz",
        resume=resume,
        checkpoint_meta=meta,
        log=lambda msg: print(msg, flush=True),
    )
    print(
        f"best validation ppl {result.best_val_ppl:.4f} at epoch {result.best_epoch} "
        f"-> {out / f'best{suffix}.ckpt'}"
    )
    return 0


def _load_checkpoint_checked(cfg: dict, checkpoint: str):
    """Load checkpoint + store, refusing on a configuration digest mismatch."""
    params, meta = load_checkpoint(_require_file(checkpoint, "checkpoint"))
    baseline = bool(meta.get("baseline", False))
    store = None
    if not baseline:
        out = _out_dir(cfg)
        store = load_store(_require_file(out / "store.bin", "store"))
        expected = meta.get("store_digest")
        actual = store_digest(store)
        if expected != actual:
            raise ConfigError(
                f"checkpoint was trained against store digest {expected} "
                f"but {out / 'store.bin'} has digest {actual}; refusing to mix artifacts"
            )
    return params, meta, store, baseline


def cmd_eval(cfg: dict, checkpoint: str, split: str) -> int:
    out = _out_dir(cfg)
    vocab = _load_vocab(cfg)
    params, meta, store, baseline = _load_checkpoint_checked(cfg, checkpoint)
    sentences = _load_split(cfg, split, vocab)
    rcfg = _retrieval_cfg(cfg)
    table = None
    if not baseline and split == "train":
        # training data is indexed: evaluate with the same-sentence exclusion
        table_path = out / "retrieval_train.jsonl"
        if table_path.exists():
            table = load_retrieval_table(table_path, rcfg.K, rcfg.delta)
        else:
            table = precompute_retrievals(store, sentences, rcfg, exclude_same_sentence=True)
    report = perplexity(
        params,
        store,
        sentences,
        retrieval_cfg=rcfg,
        table=table,
        batch_size=cfg["train"]["batch_size"],
        baseline=baseline,
        split=split,
    )
    report_path = out / f"eval_{split}{'_baseline' if baseline else ''}.json"
    report_path.write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
    print(f"{split} ppl {report.ppl:.4f} over {report.token_count} tokens -> {report_path}")
    return 0


def cmd_generate(
    cfg: dict, checkpoint: str, prompt: str, num_samples: int, steps_jsonl: str | None
) -> int:
    vocab = _load_vocab(cfg)
    params, meta, store, baseline = _load_checkpoint_checked(cfg, checkpoint)
    if baseline:
        raise ConfigError("generation requires a retrieval checkpoint (baseline has no store)")
    g = cfg["generation"]
    prompt_ids = [vocab.lookup(t) for t in corpus_mod.tokenize_line(prompt)] if prompt else []
    steps_fh = open(steps_jsonl, "w", encoding="utf-8") if steps_jsonl else None
    try:
        for i in range(num_samples):
            gen_cfg = GenerationConfig(
                strategy=g["strategy"],
                k_s=g["k_s"],
                temperature=g["temperature"],
                seed=g["seed"] + i,
                max_len=g["max_len"],
            )
            result = generate(params, store, prompt_ids, gen_cfg, _retrieval_cfg(cfg))
            print(vocab.decode(result.tokens))
            if steps_fh:
                for step in result.steps:
                    row = dict(step, sample=i)
                    if step["event"] == "retrieve":
                        row["retrieved_words"] = [
                            vocab.id_to_token[int(store.current_words[e])]
                            for e in step["entry_ids"]
                        ]
                    steps_fh.write(json.dumps(row) + "\n")
    finally:
        if steps_fh:
            steps_fh.close()
    return 0


def cmd_inspect(cfg: dict, query: str, topk: int | None) -> int:
    out = _out_dir(cfg)
    vocab = _load_vocab(cfg)
    store = load_store(_require_file(out / "store.bin", "store"))
    train_sents = _load_split(cfg, "train", vocab)
    by_id = {s.sentence_id: s for s in train_sents}
    rcfg = store.retrieval_cfg
    enc = SpanEncoder(store.encoder_cfg, len(vocab))
    query_ids = [vocab.lookup(t) for t in corpus_mod.tokenize_line(query)]
    if not query_ids:
        raise ConfigError("empty inspect query")
    hits = search(store, enc.encode(query_ids, start_pos=1), topk or rcfg.K)
    print(f"query: {query!r}")
    print(f"{'score':>8}  {'retrieved word':<16} retrieved suffix")
    for hit in hits:
        sid = int(store.sentence_ids[hit.entry_id])
        pos = int(store.split_positions[hit.entry_id])
        word = vocab.id_to_token[int(store.current_words[hit.entry_id])]
        sent = by_id.get(sid)
        if sent is None:
            suffix = "<sentence missing>"
        else:
            start = pos - 1 if rcfg.include_current else pos
            suffix = vocab.decode(list(sent.tokens[start : start + rcfg.m]))
        print(f"{hit.score:8.4f}  {word:<16} {suffix}")
    return 0


# -------------------------- entry point --------------------------


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON config file")
    sub.add_argument("--output-dir", help="artifact directory")
    sub.add_argument(
        "--set",
        action="append",
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )
    sub.add_argument("--delta", type=int, help="retrieval stride")
    sub.add_argument("--topk", type=int, help="retrieved hits per block")
    sub.add_argument("--suffix-len", dest="suffix_len", type=int, help="suffix truncation length")
    sub.add_argument("--include-current", action="store_true", help="keep the current word in stored suffixes")
    sub.add_argument("--epochs", type=int, help="training epochs")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="surealm", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("index", help="build vocabulary and embedding store")
    _add_common(p)
    p = subs.add_parser("precompute", help="precompute retrieval tables")
    _add_common(p)
    p = subs.add_parser("train", help="train the model")
    _add_common(p)
    p.add_argument("--baseline", action="store_true", help="disable retrieval")
    p.add_argument("--resume", action="store_true", help="continue from the last epoch state")
    p = subs.add_parser("eval", help="perplexity of a checkpoint on a split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="valid", choices=["train", "valid", "test"])
    p = subs.add_parser("generate", help="sample text from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", default="")
    p.add_argument("--num-samples", type=int, default=1)
    p.add_argument("--greedy", action="store_true", help="force greedy decoding")
    p.add_argument("--steps-jsonl", help="write per-step retrieval records here")
    p = subs.add_parser("inspect", help="show top hits for a free-text prefix")
    _add_common(p)
    p.add_argument("--query", required=True)
    p.add_argument("--inspect-topk", type=int, default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = build_config(args)
        if args.command == "index":
            return cmd_index(cfg)
        if args.command == "precompute":
            return cmd_precompute(cfg)
        if args.command == "train":
            return cmd_train(cfg, baseline=args.baseline, resume=args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.split)
        if args.command == "generate":
            if args.greedy:
                cfg["generation"]["strategy"] = "greedy"
            return cmd_generate(cfg, args.checkpoint, args.prompt, args.num_samples, args.steps_jsonl)
        if args.command == "inspect":
            return cmd_inspect(cfg, args.query, args.inspect_topk)
        raise ConfigError(f"unknown command {args.command}")
    except (ConfigError, CorpusError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (StoreFormatError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
