"""Calibration data: token ingestion, synthetic generation, block-input capture.

Synthetic calibration uses a seeded Markov chain (fixed random bigram
table), so activations carry sequential structure instead of i.i.d. noise.
Block inputs are captured once per block and reused across tuning steps;
prior blocks are frozen during tuning, so the cached values match a fresh
recompute exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError, StateError
from .model import ModelWeights, block_forward, embed

_TABLE_STREAM = 101
_CHAIN_STREAM = 202
_BATCH_STREAM = 313


@dataclass
class CalibSet:
    """Fixed-length token sequences for calibration."""

    sequences: np.ndarray  # [nsamples, seqlen] int64
    source: str

    @property
    def nsamples(self) -> int:
        return int(self.sequences.shape[0])

    @property
    def seqlen(self) -> int:
        return int(self.sequences.shape[1])


@dataclass
class BlockInputCache:
    """Hidden states entering one block, aligned 1:1 with the CalibSet."""

    inputs: np.ndarray  # [nsamples, seqlen, d_model]
    block_idx: int
    quantized_prior: bool

    @property
    def nsamples(self) -> int:
        return int(self.inputs.shape[0])


def load_tokens(path, seqlen: int, nsamples: int, vocab: int) -> CalibSet:
    """Chunk a newline-delimited token id file into calibration sequences."""
    ids = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                tok = int(text)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: not an integer token id: {text!r}") from None
            if tok < 0 or tok >= vocab:
                raise DataError(f"{path}:{lineno}: token id {tok} out of range for vocab {vocab}")
            ids.append(tok)
    need = seqlen * nsamples
    if len(ids) < need:
        raise DataError(
            f"{path}: need {need} tokens for {nsamples} sequences of length {seqlen}, "
            f"found {len(ids)}"
        )
    seqs = np.asarray(ids[:need], dtype=np.int64).reshape(nsamples, seqlen)
    return CalibSet(sequences=seqs, source=str(path))


def bigram_table(seed: int, vocab: int) -> np.ndarray:
    """Row-stochastic next-token table, a fixed function of the seed."""
    rng = np.random.default_rng([seed, _TABLE_STREAM])
    logits = rng.normal(0.0, 1.5, size=(vocab, vocab))
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    return probs


def markov_stream(seed: int, n_tokens: int, vocab: int) -> np.ndarray:
    """Sample a token stream from the seeded bigram table."""
    table = bigram_table(seed, vocab)
    cdf = np.cumsum(table, axis=1)
    cdf[:, -1] = 1.0  # guard against float drift at the top
    rng = np.random.default_rng([seed, _CHAIN_STREAM])
    out = np.empty(n_tokens, dtype=np.int64)
    state = int(rng.integers(vocab))
    draws = rng.random(n_tokens)
    for i in range(n_tokens):
        state = int(np.searchsorted(cdf[state], draws[i], side="right"))
        if state >= vocab:
            state = vocab - 1
        out[i] = state
    return out


def synth_tokens(seed: int, seqlen: int, nsamples: int, vocab: int) -> CalibSet:
    """Deterministic synthetic calibration set from the Markov generator."""
    if vocab < 2:
        raise ValueError(f"vocab must be >= 2, got {vocab}")
    stream = markov_stream(seed, seqlen * nsamples, vocab)
    return CalibSet(sequences=stream.reshape(nsamples, seqlen), source=f"synth(seed={seed})")


def capture_block_inputs(model: ModelWeights, calib: CalibSet, block_idx: int,
                         quantized_prior: bool = False,
                         prior_quantized_blocks: dict | None = None) -> BlockInputCache:
    """Hidden states entering ``block_idx`` for every calibration sample.

    With ``quantized_prior`` the states are propagated through the already
    quantized versions of blocks < block_idx (which must all be supplied);
    otherwise through the original full-precision blocks.
    """
    if block_idx >= model.config.n_layers or block_idx < 0:
        raise ValueError(f"block_idx {block_idx} out of range for {model.config.n_layers} layers")
    prior_quantized_blocks = prior_quantized_blocks or {}
    if quantized_prior:
        missing = [j for j in range(block_idx) if j not in prior_quantized_blocks]
        if missing:
            raise StateError(
                f"quantized-input capture of block {block_idx} needs quantized "
                f"blocks {missing}"
            )
    x = embed(model, calib.sequences)
    for j in range(block_idx):
        block = prior_quantized_blocks[j] if quantized_prior else model.blocks[j]
        x = block_forward(block, x, model.config.n_heads).data
    return BlockInputCache(inputs=np.asarray(x), block_idx=block_idx,
                           quantized_prior=quantized_prior)


def draw_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Without-replacement index draw, a deterministic function of (seed, step).

    Full-batch mode (batch_size == n) returns 0..n-1 in fixed order.
    """
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds {n} samples")
    if batch_size == n:
        return np.arange(n)
    rng = np.random.default_rng([seed, step, _BATCH_STREAM])
    return rng.permutation(n)[:batch_size]


def draw_batch(cache: BlockInputCache, batch_size: int, step: int, seed: int):
    """Seeded without-replacement batch of cached inputs for one step."""
    idx = draw_indices(cache.nsamples, batch_size, step, seed)
    return cache.inputs[idx], idx
