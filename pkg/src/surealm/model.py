"""Mini transformer decoder with retrieval cross-attention, in plain numpy.

Pre-norm residual blocks; per layer: causal self-attention, cross-attention
over concatenated retrieved suffix embeddings (keys are the matching prefix
embeddings), then a GELU feed-forward. The output projection is tied to the
token embedding. All math is float64 and the backward pass is hand-derived,
checked against central finite differences.

The retrieval visibility mask makes query position i (1-based over the
BOS-prefixed input) attend to retrieved column j iff j <= k * (ceil(i/delta) - 1):
each position only sees blocks retrieved from strictly shorter prefixes, and
the position predicting the first word sees nothing. Fully masked rows yield
a zero attention output, so the residual stream passes through untouched and
a model with zero retrieval blocks reduces exactly to a plain causal LM.

Checkpoint file, little-endian, in sections:

    magic         4 bytes b"SULM"
    version       u32
    model_config  d_model u32, n_layers u32, n_heads u32, d_ff u32, d_enc u32,
                  max_seq_len u32, vocab_size u32, init_seed u64
    tensor:<name> one section per parameter tensor, f64, canonical order

plus a JSON sidecar (same path + ".json") with the config and training metadata.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

MAGIC = b"SULM"
VERSION = 1
LN_EPS = 1e-5
NEG_INF = -np.inf


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, section: str):
        super().__init__(message)
        self.section = section


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    d_enc: int = 64
    max_seq_len: int = 64
    init_seed: int = 0

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


def param_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) order; serialization and optimizers follow it."""
    d, f, e = cfg.d_model, cfg.d_ff, cfg.d_enc
    specs: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (cfg.vocab_size, d)),
        ("pos_emb", (cfg.max_seq_len, d)),
    ]
    for i in range(cfg.n_layers):
        p = f"l{i}."
        specs += [
            (p + "ln1_g", (d,)),
            (p + "ln1_b", (d,)),
            (p + "wq", (d, d)),
            (p + "wk", (d, d)),
            (p + "wv", (d, d)),
            (p + "wo", (d, d)),
            (p + "ln2_g", (d,)),
            (p + "ln2_b", (d,)),
            (p + "cwq", (d, d)),
            (p + "cwk", (e, d)),
            (p + "cwv", (e, d)),
            (p + "cwo", (d, d)),
            (p + "ln3_g", (d,)),
            (p + "ln3_b", (d,)),
            (p + "w1", (d, f)),
            (p + "b1", (f,)),
            (p + "w2", (f, d)),
            (p + "b2", (d,)),
        ]
    specs += [("lnf_g", (d,)), ("lnf_b", (d,)), ("out_bias", (cfg.vocab_size,))]
    return specs


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def init_params(cfg: ModelConfig) -> ModelParams:
    """Glorot-uniform matrices, unit gains, zero biases; seeded and reproducible."""
    rng = np.random.default_rng(cfg.init_seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_specs(cfg):
        if len(shape) == 2:
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(-a, a, size=shape)
        elif name.endswith("_g"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return ModelParams(cfg, tensors)


@dataclass
class RetrievedContext:
    """Concatenated retrieval blocks for one sequence.

    Rows (b-1)*k .. b*k-1 belong to block b; blocks with fewer than k hits
    are zero-padded and the missing rows are force-masked by collate.
    """

    keys: np.ndarray  # [J, d_enc] prefix embeddings
    values: np.ndarray  # [J, d_enc] suffix embeddings
    block_size: int
    delta: int
    num_blocks: int
    hits_per_block: list[int] = field(default_factory=list)

    @property
    def J(self) -> int:
        return self.block_size * self.num_blocks


@dataclass
class SequenceBatch:
    """Padded token batch plus assembled retrieval tensors.

    ``pad_mask`` is True where the target is a real token (loss positions).
    ``keys``/``values`` are [B, J, d_enc] and ``ret_mask`` [B, T, J] with
    0 / -inf entries; all three are None in baseline (no-retrieval) mode.
    """

    tokens: np.ndarray  # [B, T] int64
    targets: np.ndarray  # [B, T] int64
    pad_mask: np.ndarray  # [B, T] bool
    contexts: list[RetrievedContext] | None = None
    keys: np.ndarray | None = None
    values: np.ndarray | None = None
    ret_mask: np.ndarray | None = None
    truncated: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.tokens.shape


def build_retrieval_mask(T: int, num_blocks: int, k: int, delta: int) -> np.ndarray:
    """[T x k*num_blocks] additive mask: 0 where visible, -inf elsewhere.

    Row t (0-based) is query position i = t + 1; column c is retrieved row
    j = c + 1. Visible iff j <= k * (ceil(i/delta) - 1).
    """
    if k < 1 or delta < 1:
        raise ValueError("k and delta must be >= 1")
    i = np.arange(1, T + 1)[:, None]
    j = np.arange(1, k * num_blocks + 1)[None, :]
    visible = j <= k * (-(-i // delta) - 1)
    return np.where(visible, 0.0, NEG_INF)


def causal_mask(T: int) -> np.ndarray:
    i = np.arange(T)
    return np.where(i[None, :] <= i[:, None], 0.0, NEG_INF)


def _masked_softmax(scores: np.ndarray) -> np.ndarray:
    """Row softmax along the last axis; fully masked (-inf) rows become zero."""
    if scores.shape[-1] == 0:
        return np.zeros_like(scores)
    rowmax = np.max(scores, axis=-1, keepdims=True)
    e = np.exp(scores - np.where(np.isfinite(rowmax), rowmax, 0.0))
    s = np.sum(e, axis=-1, keepdims=True)
    return e / np.where(s > 0.0, s, 1.0)


def masked_attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Softmax((Q K^T + M) / sqrt(d_k)) V with zero rows where M is all -inf."""
    if Q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0]:
        raise ValueError("Q/K/V shapes do not conform")
    if M.shape != (Q.shape[0], K.shape[0]):
        raise ValueError("mask shape does not match Q x K")
    scores = (Q @ K.T + M) / np.sqrt(Q.shape[1])
    return _masked_softmax(scores) @ V


# -------------------------- layer helpers --------------------------


def _ln_forward(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv)


def _ln_backward(dy: np.ndarray, cache, g: np.ndarray):
    xhat, inv = cache
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * inv
    axes = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=axes), dy.sum(axis=axes)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / np.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dk)


def _attn_forward(qh, kh, vh, add_mask):
    """Multi-head attention cores; add_mask broadcasts over heads."""
    dk = qh.shape[-1]
    scores = (qh @ kh.transpose(0, 1, 3, 2) + add_mask) / np.sqrt(dk)
    probs = _masked_softmax(scores)
    return probs @ vh, probs


def _attn_backward(dout, probs, qh, kh, vh):
    dk = qh.shape[-1]
    dprobs = dout @ vh.transpose(0, 1, 3, 2)
    dvh = probs.transpose(0, 1, 3, 2) @ dout
    dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
    dscores = dscores / np.sqrt(dk)
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh
    return dqh, dkh, dvh


# -------------------------- forward / backward --------------------------


def _forward(params: ModelParams, batch: SequenceBatch, keep_cache: bool):
    cfg = params.config
    p = params.tensors
    tokens = batch.tokens
    bsz, T = tokens.shape
    if T > cfg.max_seq_len:
        raise ValueError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    has_ret = batch.keys is not None

    x = p["tok_emb"][tokens] + p["pos_emb"][:T]
    self_mask = causal_mask(T)[None, None]
    if has_ret:
        ret_mask = batch.ret_mask[:, None]  # broadcast over heads
    cache: dict = {"x0": x, "layers": []}

    for i in range(cfg.n_layers):
        pre = f"l{i}."
        lc: dict = {}

        a, lc["ln1"] = _ln_forward(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
        qh = _split_heads(a @ p[pre + "wq"], cfg.n_heads)
        kh = _split_heads(a @ p[pre + "wk"], cfg.n_heads)
        vh = _split_heads(a @ p[pre + "wv"], cfg.n_heads)
        oh, probs = _attn_forward(qh, kh, vh, self_mask)
        o = _merge_heads(oh)
        x = x + o @ p[pre + "wo"]
        if keep_cache:
            lc.update(a=a, qh=qh, kh=kh, vh=vh, probs=probs, o=o)

        if has_ret:
            c, lc["ln2"] = _ln_forward(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
            cqh = _split_heads(c @ p[pre + "cwq"], cfg.n_heads)
            ckh = _split_heads(batch.keys @ p[pre + "cwk"], cfg.n_heads)
            cvh = _split_heads(batch.values @ p[pre + "cwv"], cfg.n_heads)
            coh, cprobs = _attn_forward(cqh, ckh, cvh, ret_mask)
            co = _merge_heads(coh)
            x = x + co @ p[pre + "cwo"]
            if keep_cache:
                lc.update(c=c, cqh=cqh, ckh=ckh, cvh=cvh, cprobs=cprobs, co=co)

        f, lc["ln3"] = _ln_forward(x, p[pre + "ln3_g"], p[pre + "ln3_b"])
        h1 = f @ p[pre + "w1"] + p[pre + "b1"]
        g = _gelu(h1)
        x = x + (g @ p[pre + "w2"] + p[pre + "b2"])
        if keep_cache:
            lc.update(f=f, h1=h1, g=g)
            cache["layers"].append(lc)

    xf, lnf_cache = _ln_forward(x, p["lnf_g"], p["lnf_b"])
    logits = xf @ p["tok_emb"].T + p["out_bias"]
    if keep_cache:
        cache.update(lnf=lnf_cache, xf=xf, logits=logits)
        return logits, cache
    return logits, None


def forward(params: ModelParams, batch: SequenceBatch) -> np.ndarray:
    """Logits [batch, T, vocab]."""
    logits, _ = _forward(params, batch, keep_cache=False)
    return logits


def nll_loss(logits: np.ndarray, targets: np.ndarray, pad_mask: np.ndarray):
    """(mean NLL over non-pad targets, non-pad token count)."""
    count = int(np.count_nonzero(pad_mask))
    if count == 0:
        raise ValueError("no non-pad target positions")
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1))
    logp = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0] - lse
    return float(-(logp * pad_mask).sum() / count), count


def loss_and_grads(params: ModelParams, batch: SequenceBatch):
    """Mean NLL, token count, and exact gradients for every parameter."""
    cfg = params.config
    p = params.tensors
    logits, cache = _forward(params, batch, keep_cache=True)
    loss, count = nll_loss(logits, batch.targets, batch.pad_mask)

    grads = {name: np.zeros_like(t) for name, t in p.items()}
    z = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True)))
    dlogits = probs
    np.put_along_axis(
        dlogits,
        batch.targets[..., None],
        np.take_along_axis(dlogits, batch.targets[..., None], axis=-1) - 1.0,
        axis=-1,
    )
    dlogits *= batch.pad_mask[..., None] / count

    xf = cache["xf"]
    grads["out_bias"] += dlogits.sum(axis=(0, 1))
    grads["tok_emb"] += np.einsum("btv,btd->vd", dlogits, xf)
    dxf = dlogits @ p["tok_emb"]
    dx, dg, db = _ln_backward(dxf, cache["lnf"], p["lnf_g"])
    grads["lnf_g"] += dg
    grads["lnf_b"] += db

    has_ret = batch.keys is not None
    for i in reversed(range(cfg.n_layers)):
        pre = f"l{i}."
        lc = cache["layers"][i]

        # feed-forward block
        f, h1, g = lc["f"], lc["h1"], lc["g"]
        dff = dx  # residual: dx flows both into the block and around it
        grads[pre + "b2"] += dff.sum(axis=(0, 1))
        grads[pre + "w2"] += np.einsum("btf,btd->fd", g, dff)
        dg_act = dff @ p[pre + "w2"].T
        dh1 = dg_act * _gelu_grad(h1)
        grads[pre + "b1"] += dh1.sum(axis=(0, 1))
        grads[pre + "w1"] += np.einsum("btd,btf->df", f, dh1)
        dfin = dh1 @ p[pre + "w1"].T
        dres, dgn, dbn = _ln_backward(dfin, lc["ln3"], p[pre + "ln3_g"])
        grads[pre + "ln3_g"] += dgn
        grads[pre + "ln3_b"] += dbn
        dx = dx + dres

        # cross-attention block
        if has_ret:
            c, co = lc["c"], lc["co"]
            dco = dx @ p[pre + "cwo"].T
            grads[pre + "cwo"] += np.einsum("btd,bte->de", co, dx)
            dcoh = _split_heads(dco, cfg.n_heads)
            dcqh, dckh, dcvh = _attn_backward(dcoh, lc["cprobs"], lc["cqh"], lc["ckh"], lc["cvh"])
            dcq = _merge_heads(dcqh)
            dck = _merge_heads(dckh)
            dcv = _merge_heads(dcvh)
            grads[pre + "cwq"] += np.einsum("btd,bte->de", c, dcq)
            grads[pre + "cwk"] += np.einsum("bje,bjd->ed", batch.keys, dck)
            grads[pre + "cwv"] += np.einsum("bje,bjd->ed", batch.values, dcv)
            dc = dcq @ p[pre + "cwq"].T
            dres, dgn, dbn = _ln_backward(dc, lc["ln2"], p[pre + "ln2_g"])
            grads[pre + "ln2_g"] += dgn
            grads[pre + "ln2_b"] += dbn
            dx = dx + dres

        # self-attention block
        a, o = lc["a"], lc["o"]
        do = dx @ p[pre + "wo"].T
        grads[pre + "wo"] += np.einsum("btd,bte->de", o, dx)
        doh = _split_heads(do, cfg.n_heads)
        dqh, dkh, dvh = _attn_backward(doh, lc["probs"], lc["qh"], lc["kh"], lc["vh"])
        dq = _merge_heads(dqh)
        dk = _merge_heads(dkh)
        dv = _merge_heads(dvh)
        grads[pre + "wq"] += np.einsum("btd,bte->de", a, dq)
        grads[pre + "wk"] += np.einsum("btd,bte->de", a, dk)
        grads[pre + "wv"] += np.einsum("btd,bte->de", a, dv)
        da = dq @ p[pre + "wq"].T + dk @ p[pre + "wk"].T + dv @ p[pre + "wv"].T
        dres, dgn, dbn = _ln_backward(da, lc["ln1"], p[pre + "ln1_g"])
        grads[pre + "ln1_g"] += dgn
        grads[pre + "ln1_b"] += dbn
        dx = dx + dres

    T = batch.tokens.shape[1]
    grads["pos_emb"][:T] += dx.sum(axis=0)
    np.add.at(grads["tok_emb"], batch.tokens, dx)
    return loss, count, grads


def backward(params: ModelParams, batch: SequenceBatch) -> dict[str, np.ndarray]:
    """Exact gradients of the mean NLL w.r.t. every parameter."""
    return loss_and_grads(params, batch)[2]


# -------------------------- checkpoints --------------------------

_CONFIG_STRUCT = "<IIIIIIIQ"


def save_checkpoint(params: ModelParams, path: str | Path, meta: dict | None = None) -> None:
    cfg = params.config
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(
            struct.pack(
                _CONFIG_STRUCT,
                cfg.d_model,
                cfg.n_layers,
                cfg.n_heads,
                cfg.d_ff,
                cfg.d_enc,
                cfg.max_seq_len,
                cfg.vocab_size,
                cfg.init_seed & 0xFFFFFFFFFFFFFFFF,
            )
        )
        for name, _ in param_specs(cfg):
            fh.write(np.ascontiguousarray(params.tensors[name], dtype="<f8").tobytes())
    sidecar = {"config": config_to_dict(cfg), "meta": meta or {}}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise CheckpointFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", "magic")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported version {version}", "version")
        vals = struct.unpack(
            _CONFIG_STRUCT, _read_exact(fh, struct.calcsize(_CONFIG_STRUCT), "model_config")
        )
        cfg = ModelConfig(
            d_model=vals[0],
            n_layers=vals[1],
            n_heads=vals[2],
            d_ff=vals[3],
            d_enc=vals[4],
            max_seq_len=vals[5],
            vocab_size=vals[6],
            init_seed=vals[7],
        )
        tensors = {}
        for name, shape in param_specs(cfg):
            n_bytes = int(np.prod(shape)) * 8
            raw = _read_exact(fh, n_bytes, f"tensor:{name}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    sidecar_path = Path(str(path) + ".json")
    meta = {}
    if sidecar_path.exists():
        meta = json.loads(sidecar_path.read_text(encoding="utf-8")).get("meta", {})
    return ModelParams(cfg, tensors), meta


def _read_exact(fh, size: int, section: str) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise CheckpointFormatError(f"unexpected end of section: {section}", section)
    return data


def config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "vocab_size": cfg.vocab_size,
        "d_model": cfg.d_model,
        "n_layers": cfg.n_layers,
        "n_heads": cfg.n_heads,
        "d_ff": cfg.d_ff,
        "d_enc": cfg.d_enc,
        "max_seq_len": cfg.max_seq_len,
        "init_seed": cfg.init_seed,
    }
