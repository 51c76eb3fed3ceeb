"""Small decoder-only transformer used as the quantization target.

Pre-norm blocks (LN -> causal attention -> residual; LN -> GELU MLP ->
residual) over learned token + absolute position embeddings, with a final
layer norm and an untied lm-head. Linear weights are stored [out, in] and
applied as x @ W.T; they are the only quantizable tensors. Embeddings,
positions, layer-norm affines and the lm-head are never quantized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import tensorfile
from .autodiff import Tensor
from .errors import DataError, FormatError, ShapeError
from .packing import PackedTensor, unpack
from .quant import dequantize_codes

LN_EPS = 1e-5
INIT_STD = 0.02
MASK_NEG = -1e9

QUANTIZABLE_ATTRS = ("wq", "wk", "wv", "wo", "w_up", "w_down")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_heads: int
    n_layers: int
    d_ff: int
    max_seq_len: int
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} must be divisible by n_heads {self.n_heads}"
            )
        if self.n_layers < 0:
            raise ValueError(f"n_layers must be >= 0, got {self.n_layers}")
        for name in ("d_model", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "d_model": self.d_model,
            "n_heads": self.n_heads, "n_layers": self.n_layers,
            "d_ff": self.d_ff, "max_seq_len": self.max_seq_len, "seed": self.seed,
        }


DEFAULT_CONFIG = ModelConfig(vocab_size=256, d_model=64, n_heads=4,
                             n_layers=2, d_ff=256, max_seq_len=64)


@dataclass
class BlockWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray

    def replaced(self, linears: dict) -> "BlockWeights":
        """Copy with some linear weights substituted (LN affines kept)."""
        return replace(self, **linears)


@dataclass
class ModelWeights:
    config: ModelConfig
    embedding: np.ndarray
    pos_embedding: np.ndarray
    blocks: list[BlockWeights]
    final_gamma: np.ndarray
    final_beta: np.ndarray
    lm_head: np.ndarray
    packed: dict = field(default_factory=dict)  # name -> PackedTensor, set by quantization


def model_init(cfg: ModelConfig) -> ModelWeights:
    """Seeded init: normal(0, 0.02) for embeddings/linears, ones/zeros for LN."""
    rng = np.random.default_rng(cfg.seed)

    def normal(*shape):
        return rng.normal(0.0, INIT_STD, size=shape).astype(np.float32)

    d, ff = cfg.d_model, cfg.d_ff
    embedding = normal(cfg.vocab_size, d)
    pos = normal(cfg.max_seq_len, d)
    blocks = []
    for _ in range(cfg.n_layers):
        blocks.append(BlockWeights(
            wq=normal(d, d), wk=normal(d, d), wv=normal(d, d), wo=normal(d, d),
            w_up=normal(ff, d), w_down=normal(d, ff),
            ln1_gamma=np.ones(d, dtype=np.float32), ln1_beta=np.zeros(d, dtype=np.float32),
            ln2_gamma=np.ones(d, dtype=np.float32), ln2_beta=np.zeros(d, dtype=np.float32),
        ))
    final_gamma = np.ones(d, dtype=np.float32)
    final_beta = np.zeros(d, dtype=np.float32)
    lm_head = normal(cfg.vocab_size, d)
    return ModelWeights(cfg, embedding, pos, blocks, final_gamma, final_beta, lm_head)


def _t(w) -> Tensor:
    return w if isinstance(w, Tensor) else Tensor(w)


def causal_mask(seq: int, dtype=np.float32) -> np.ndarray:
    """Additive mask: 0 on/below the diagonal, a large negative above."""
    m = np.zeros((seq, seq), dtype=dtype)
    m[np.triu_indices(seq, k=1)] = MASK_NEG
    return m


def _linear(x: Tensor, w) -> Tensor:
    return ad.matmul(x, ad.transpose_last2(_t(w)))


def block_forward(block, x: Tensor, n_heads: int, weights: dict | None = None) -> Tensor:
    """One pre-norm block applied to x [batch, seq, d_model].

    ``weights`` optionally overrides linear weights by attribute name with
    Tensors (the tuner passes quantize-dequantize outputs here).
    """
    x = _t(x)
    b, s, d = x.shape
    if d != block.ln1_gamma.shape[0]:
        raise ShapeError(f"block_forward: last dim {d} does not match block width "
                         f"{block.ln1_gamma.shape[0]}")
    dh = d // n_heads
    weights = weights or {}

    def w(name):
        return weights.get(name, getattr(block, name))

    h = ad.layer_norm(x, _t(block.ln1_gamma), _t(block.ln1_beta), LN_EPS)
    q = _split_heads(_linear(h, w("wq")), n_heads)
    k = _split_heads(_linear(h, w("wk")), n_heads)
    v = _split_heads(_linear(h, w("wv")), n_heads)
    scores = ad.matmul(q, ad.transpose_last2(k)) * (1.0 / math.sqrt(dh))
    scores = scores + Tensor(causal_mask(s, dtype=x.dtype))
    att = ad.softmax_lastdim(scores)
    ctx = _merge_heads(ad.matmul(att, v))
    x = x + _linear(ctx, w("wo"))

    h2 = ad.layer_norm(x, _t(block.ln2_gamma), _t(block.ln2_beta), LN_EPS)
    mlp = _linear(ad.gelu(_linear(h2, w("w_up"))), w("w_down"))
    return x + mlp


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, s, d = x.shape
    return ad.permute(ad.reshape(x, (b, s, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, s, dh = x.shape
    return ad.reshape(ad.permute(x, (0, 2, 1, 3)), (b, s, h * dh))


def _check_tokens(cfg: ModelConfig, tokens: np.ndarray):
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        bad = tokens[(tokens < 0) | (tokens >= cfg.vocab_size)].reshape(-1)[0]
        raise DataError(f"token id {bad} out of range for vocab {cfg.vocab_size}")
    if tokens.shape[-1] > cfg.max_seq_len:
        raise DataError(f"sequence length {tokens.shape[-1]} exceeds max {cfg.max_seq_len}")


def embed(model: ModelWeights, tokens: np.ndarray) -> np.ndarray:
    """Token + position embeddings for [batch, seq] ids."""
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_tokens(model.config, tokens)
    seq = tokens.shape[-1]
    return model.embedding[tokens] + model.pos_embedding[:seq]


def final_hidden(model: ModelWeights, tokens) -> np.ndarray:
    """Hidden states [batch, seq, d_model] after the final layer norm."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    x = Tensor(embed(model, tokens))
    for block in model.blocks:
        x = block_forward(block, x, model.config.n_heads)
    x = ad.layer_norm(x, _t(model.final_gamma), _t(model.final_beta), LN_EPS)
    return x.data


def forward(model: ModelWeights, tokens) -> np.ndarray:
    """Logits [batch, seq, vocab] for a batch of token id sequences."""
    hidden = final_hidden(model, tokens)
    logits = _linear(Tensor(hidden), model.lm_head)
    return logits.data


def sequence_nll(model: ModelWeights, tokens) -> tuple[float, int]:
    """Total negative log-likelihood and count of next-token predictions."""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.size < 2:
        raise DataError(f"perplexity needs at least 2 tokens, got {tokens.size}")
    logits = forward(model, tokens[None, :])[0].astype(np.float64)
    shifted = logits[:-1]  # prediction for position i+1 comes from position i
    targets = tokens[1:]
    m = shifted.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(shifted - m).sum(axis=-1))
    logp = shifted[np.arange(targets.size), targets] - lse
    if np.any(np.isneginf(logp)):
        return math.inf, targets.size
    return float(-logp.sum()), int(targets.size)


def _safe_exp(mean_nll: float) -> float:
    if math.isinf(mean_nll) or mean_nll > 700.0:  # exp would overflow f64
        return math.inf
    return math.exp(mean_nll)


def perplexity(model: ModelWeights, tokens) -> float:
    """exp of the mean negative next-token log-likelihood of one sequence."""
    nll, count = sequence_nll(model, tokens)
    return _safe_exp(nll / count if not math.isinf(nll) else nll)


def stream_perplexity(model: ModelWeights, token_stream, seqlen: int | None = None) -> float:
    """Pooled perplexity over a token stream, chunked into model-sized windows."""
    ids = np.asarray(token_stream, dtype=np.int64).reshape(-1)
    seqlen = seqlen or model.config.max_seq_len
    total, count = 0.0, 0
    for start in range(0, ids.size - 1, seqlen):
        chunk = ids[start:start + seqlen]
        if chunk.size < 2:
            break
        nll, n = sequence_nll(model, chunk)
        if math.isinf(nll):
            return math.inf
        total += nll
        count += n
    if count == 0:
        raise DataError("token stream too short for perplexity")
    return _safe_exp(total / count)


def quantizable_tensors(model: ModelWeights):
    """Yield (name, block_idx, attr, weight) for each quantizable linear.

    Embeddings, layer norms and the lm-head are excluded by construction.
    """
    for i, block in enumerate(model.blocks):
        for attr in QUANTIZABLE_ATTRS:
            yield f"blocks.{i}.{attr}", i, attr, getattr(block, attr)


# -- persistence --------------------------------------------------------------


def _named_tensors(model: ModelWeights) -> dict:
    named = {"embedding": model.embedding, "pos_embedding": model.pos_embedding}
    for i, block in enumerate(model.blocks):
        for attr in ("wq", "wk", "wv", "wo", "w_up", "w_down",
                     "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta"):
            named[f"blocks.{i}.{attr}"] = getattr(block, attr)
    named["final_gamma"] = model.final_gamma
    named["final_beta"] = model.final_beta
    named["lm_head"] = model.lm_head
    return named


def save_model(path, model: ModelWeights):
    """Write the model as a tensor container; quantized linears go packed."""
    named = _named_tensors(model)
    payload = {}
    for name, arr in named.items():
        if name in model.packed:
            pt = model.packed[name]
            payload[name] = (pt.to_bytes(), pt.shape)
        else:
            payload[name] = arr
    tensorfile.save_tensors(path, payload, extra_manifest={"model_config": model.config.to_dict()})


def load_model(path) -> ModelWeights:
    """Load a model container; packed entries are dequantized to f32."""
    loaded, manifest = tensorfile.load_tensors(path, with_manifest=True)
    raw_cfg = manifest.get("model_config")
    if raw_cfg is None:
        raise FormatError(f"{path}: manifest has no model_config")
    cfg = ModelConfig(**{k: int(v) for k, v in raw_cfg.items()})

    packed = {}

    def fetch(name):
        value = loaded.get(name)
        if value is None:
            raise FormatError(f"{path}: missing tensor {name!r}")
        if isinstance(value, tuple):
            pt = PackedTensor.from_bytes(value[0])
            packed[name] = pt
            codes = unpack(pt)
            return dequantize_codes(codes, pt.scales, pt.zps, pt.config)
        return value.astype(np.float32) if value.dtype != np.float32 else value

    blocks = []
    for i in range(cfg.n_layers):
        blocks.append(BlockWeights(
            wq=fetch(f"blocks.{i}.wq"), wk=fetch(f"blocks.{i}.wk"),
            wv=fetch(f"blocks.{i}.wv"), wo=fetch(f"blocks.{i}.wo"),
            w_up=fetch(f"blocks.{i}.w_up"), w_down=fetch(f"blocks.{i}.w_down"),
            ln1_gamma=fetch(f"blocks.{i}.ln1_gamma"), ln1_beta=fetch(f"blocks.{i}.ln1_beta"),
            ln2_gamma=fetch(f"blocks.{i}.ln2_gamma"), ln2_beta=fetch(f"blocks.{i}.ln2_beta"),
        ))
    model = ModelWeights(
        config=cfg,
        embedding=fetch("embedding"),
        pos_embedding=fetch("pos_embedding"),
        blocks=blocks,
        final_gamma=fetch("final_gamma"),
        final_beta=fetch("final_beta"),
        lm_head=fetch("lm_head"),
    )
    model.packed = packed
    return model
