"""Per-block signed-gradient tuning of rounding offsets and clip scales.

Each block is tuned against the reconstruction loss between its
full-precision output and the output computed with quantize-dequantized
linear weights, on cached calibration inputs. The optimizer steps by
lr * sign(grad) (or bias-corrected Adam for the ablation baseline), with a
linearly decaying learning rate, hard parameter clamps after every step,
and a running best-loss snapshot that is returned instead of the final
state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .calib import BlockInputCache, CalibSet, capture_block_inputs, draw_indices
from .errors import NumericsError
from .model import (ModelWeights, BlockWeights, QUANTIZABLE_ATTRS, block_forward)
from .packing import PackedTensor, pack_bits
from .quant import (CLIP_FLOOR, QuantConfig, TunedParams, V_BOUND, qdq,
                    quantize_with_params)

V_BOUNDS = (-V_BOUND, V_BOUND)
CLIP_BOUNDS = (CLIP_FLOOR, 1.0)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

OPTIMIZERS = ("signsgd", "adam")
MODES = ("rounding", "clip", "both")


@dataclass(frozen=True)
class TuneConfig:
    """Tuning hyperparameters.

    Defaults follow the standard recipe: 200 steps, lr 5e-3 with linear
    decay, batch size 8, SignSGD on both rounding and clip parameters,
    propagating quantized block outputs. For Adam runs callers usually
    raise lr0 to 1e-2 (the ablation sweep midpoint).
    """

    steps: int = 200
    lr0: float = 5e-3
    batch_size: int = 8
    optimizer: str = "signsgd"
    mode: str = "both"
    quantized_input: bool = True
    clip_lr_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.clip_lr_scale <= 0:
            raise ValueError(f"clip_lr_scale must be positive, got {self.clip_lr_scale}")


def lr_at(t: int, total_steps: int, lr0: float) -> float:
    """Linearly decayed learning rate: lr0 * (1 - t/T).

    The sum over a full run is lr0 * (T + 1) / 2, e.g. 0.5025 for the
    default 200 steps at 5e-3, which covers the [-0.5, 0.5] rounding range
    from a zero init.
    """
    if t < 0 or t >= total_steps:
        raise ValueError(f"step {t} outside [0, {total_steps})")
    return lr0 * (1.0 - t / total_steps)


def signsgd_step(param: np.ndarray, grad: np.ndarray, lr_t: float, bounds) -> np.ndarray:
    """param - lr_t * sign(grad), clamped to bounds; sign(0) = 0."""
    lo, hi = bounds
    return np.clip(param - lr_t * np.sign(grad), lo, hi)


@dataclass
class AdamState:
    """First/second moment buffers plus the bias-correction step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(param, dtype=np.float64),
                   v=np.zeros_like(param, dtype=np.float64), t=0)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState,
              lr_t: float, bounds) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam step, clamped to bounds."""
    lo, hi = bounds
    g = np.asarray(grad, dtype=np.float64)
    t = state.t + 1
    m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * g
    v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * (g * g)
    m_hat = m / (1.0 - ADAM_BETA1**t)
    v_hat = v / (1.0 - ADAM_BETA2**t)
    new = np.clip(param - lr_t * m_hat / (np.sqrt(v_hat) + ADAM_EPS), lo, hi)
    return new.astype(param.dtype), AdamState(m=m, v=v, t=t)


@dataclass
class BestSnapshot:
    """Lowest-loss parameter state seen during tuning (pre-update values)."""

    best_V: dict
    best_alpha: dict
    best_beta: dict
    best_loss: float
    best_step: int


def _mode_flags(mode: str) -> tuple[bool, bool]:
    return mode in ("rounding", "both"), mode in ("clip", "both")


def _initial_params(weights: dict, qcfg: QuantConfig, mode: str) -> dict:
    train_v, train_clip = _mode_flags(mode)
    return {
        name: TunedParams.initial(w.shape, qcfg, dtype=np.float32,
                                  train_v=train_v, train_clip=train_clip)
        for name, w in weights.items()
    }


def _check_bounds(tuned: dict, step: int):
    for name, tp in tuned.items():
        v, a, b = tp.V.data, tp.alpha.data, tp.beta.data
        if v.min() < V_BOUNDS[0] or v.max() > V_BOUNDS[1]:
            raise NumericsError(f"V out of [-0.5, 0.5] for {name} after step {step}")
        for label, arr in (("alpha", a), ("beta", b)):
            if arr.min() < CLIP_BOUNDS[0] or arr.max() > CLIP_BOUNDS[1]:
                raise NumericsError(f"{label} out of {CLIP_BOUNDS} for {name} after step {step}")


class _Optimizer:
    """Per-parameter step dispatch with clip-lr scaling and clamping."""

    def __init__(self, tcfg: TuneConfig):
        self.tcfg = tcfg
        self.adam_states: dict = {}

    def update(self, key, param: np.ndarray, grad, lr_t: float, bounds) -> np.ndarray:
        if grad is None:
            return param
        if self.tcfg.optimizer == "signsgd":
            return signsgd_step(param, grad, lr_t, bounds)
        state = self.adam_states.get(key)
        if state is None:
            state = AdamState.zeros_like(param)
        new, self.adam_states[key] = adam_step(param, grad, state, lr_t, bounds)
        return new


def _tuning_loop(weights: dict, loss_fn, n_samples: int, qcfg: QuantConfig,
                 tcfg: TuneConfig, context: str):
    """Shared tuning loop; loss_fn(indices, qweights) -> scalar loss Tensor."""
    if tcfg.batch_size > n_samples:
        raise ValueError(
            f"batch_size {tcfg.batch_size} exceeds {n_samples} calibration samples"
        )
    tuned = _initial_params(weights, qcfg, tcfg.mode)
    train_v, train_clip = _mode_flags(tcfg.mode)
    opt = _Optimizer(tcfg)
    batch_size = tcfg.batch_size
    best = BestSnapshot({}, {}, {}, math.inf, -1)
    losses = []

    for t in range(tcfg.steps):
        idx = draw_indices(n_samples, batch_size, t, tcfg.seed)
        qweights = {name: qdq(weights[name], qcfg, tuned[name]) for name in weights}
        loss = loss_fn(idx, qweights)
        lval = float(loss.data)
        if math.isnan(lval):
            raise NumericsError(f"NaN loss at step {t} while tuning {context}")
        losses.append(lval)
        if lval < best.best_loss:
            best = BestSnapshot(
                best_V={n: tp.V.data.copy() for n, tp in tuned.items()},
                best_alpha={n: tp.alpha.data.copy() for n, tp in tuned.items()},
                best_beta={n: tp.beta.data.copy() for n, tp in tuned.items()},
                best_loss=lval,
                best_step=t,
            )
        ad.backward(loss)
        lr_t = lr_at(t, tcfg.steps, tcfg.lr0)
        lr_clip = lr_t * tcfg.clip_lr_scale
        for name, tp in tuned.items():
            new_v, new_a, new_b = tp.V, tp.alpha, tp.beta
            if train_v:
                new_v = Tensor(opt.update((name, "V"), tp.V.data, tp.V.grad, lr_t, V_BOUNDS),
                               requires_grad=True)
            if train_clip:
                new_a = Tensor(opt.update((name, "alpha"), tp.alpha.data, tp.alpha.grad,
                                          lr_clip, CLIP_BOUNDS), requires_grad=True)
                new_b = Tensor(opt.update((name, "beta"), tp.beta.data, tp.beta.grad,
                                          lr_clip, CLIP_BOUNDS), requires_grad=True)
            tuned[name] = TunedParams(V=new_v, alpha=new_a, beta=new_b)
        _check_bounds(tuned, t)

    return best, losses


def _np_loss(a: np.ndarray, b: np.ndarray) -> float:
    diff = a - b
    return float((diff * diff).mean())


def block_recon_loss(block: BlockWeights, cache_inputs: np.ndarray, n_heads: int,
                     qcfg: QuantConfig, params: dict | None = None) -> float:
    """Full-cache reconstruction loss of a block at given tuned parameters.

    ``params`` maps attr -> (V, alpha, beta) numpy triples; None means the
    RTN state (V=0, alpha=beta=1).
    """
    x = Tensor(np.asarray(cache_inputs))
    y_ref = block_forward(block, x, n_heads).data
    qweights = {}
    for attr in QUANTIZABLE_ATTRS:
        w = getattr(block, attr)
        if params is None:
            v = a = b = None
        else:
            v, a, b = params[attr]
        qweights[attr] = Tensor(quantize_with_params(w, qcfg, v, a, b).w_hat)
    y_q = block_forward(block, x, n_heads, weights=qweights).data
    return _np_loss(y_q, y_ref)


def tune_block(block: BlockWeights, cache: BlockInputCache, n_heads: int,
               qcfg: QuantConfig, tcfg: TuneConfig):
    """Tune one block's V/alpha/beta against its reconstruction loss.

    Returns (BestSnapshot, per-step loss history). Step 0 evaluates the
    RTN state, so the best snapshot never loses to RTN on its own batch.
    """
    weights = {attr: getattr(block, attr) for attr in QUANTIZABLE_ATTRS}
    inputs = cache.inputs
    y_full = block_forward(block, Tensor(inputs), n_heads).data

    def loss_fn(idx, qweights):
        yq = block_forward(block, Tensor(inputs[idx]), n_heads, weights=qweights)
        return ad.mse_loss(yq, Tensor(y_full[idx]))

    return _tuning_loop(weights, loss_fn, cache.nsamples, qcfg, tcfg,
                        context=f"block {cache.block_idx}")


def tune_linear(W: np.ndarray, X: np.ndarray, qcfg: QuantConfig, tcfg: TuneConfig):
    """Tune a bare linear layer: minimize mse(W_hat @ X, W @ X) over columns of X."""
    W = np.asarray(W, dtype=np.float32)
    X = np.asarray(X, dtype=np.float32)
    y_full = W @ X
    weights = {"w": W}

    def loss_fn(idx, qweights):
        xt = Tensor(np.ascontiguousarray(X[:, idx]))
        yq = ad.matmul(qweights["w"], xt)
        return ad.mse_loss(yq, Tensor(np.ascontiguousarray(y_full[:, idx])))

    return _tuning_loop(weights, loss_fn, X.shape[1], qcfg, tcfg, context="linear")


@dataclass
class TuneResult:
    """Quantized model plus per-block tuning records."""

    model: ModelWeights
    snapshots: list
    reports: list  # one dict per block: block, rtn_loss, best_loss, best_step, steps, mode, optimizer, lr0
    rtn_losses: list
    final_losses: list  # full-cache loss at the snapshot parameters
    loss_histories: list = field(default_factory=list)


def tune_model(model: ModelWeights, calib: CalibSet, qcfg: QuantConfig,
               tcfg: TuneConfig, method: str = "signround") -> TuneResult:
    """Quantize every block in index order, tuning each unless method='rtn'.

    With quantized_input enabled, the calibration inputs of block k+1 are
    propagated through the already-quantized blocks <= k.
    """
    if method not in ("rtn", "signround"):
        raise ValueError(f"method must be 'rtn' or 'signround', got {method!r}")
    n_heads = model.config.n_heads
    quantized_blocks: dict[int, BlockWeights] = {}
    packed: dict[str, PackedTensor] = {}
    snapshots, reports, rtn_losses, final_losses, histories = [], [], [], [], []

    for k, block in enumerate(model.blocks):
        cache = capture_block_inputs(model, calib, k, tcfg.quantized_input, quantized_blocks)
        rtn_loss = block_recon_loss(block, cache.inputs, n_heads, qcfg)

        if method == "rtn":
            init = _initial_params({a: getattr(block, a) for a in QUANTIZABLE_ATTRS}, qcfg, tcfg.mode)
            snapshot = BestSnapshot(
                best_V={n: tp.V.data.copy() for n, tp in init.items()},
                best_alpha={n: tp.alpha.data.copy() for n, tp in init.items()},
                best_beta={n: tp.beta.data.copy() for n, tp in init.items()},
                best_loss=rtn_loss, best_step=0)
            history = []
        else:
            snapshot, history = tune_block(block, cache, n_heads, qcfg, tcfg)

        params = {a: (snapshot.best_V[a], snapshot.best_alpha[a], snapshot.best_beta[a])
                  for a in QUANTIZABLE_ATTRS}
        final_loss = block_recon_loss(block, cache.inputs, n_heads, qcfg, params)

        linears = {}
        for attr in QUANTIZABLE_ATTRS:
            w = getattr(block, attr)
            v, a, b = params[attr]
            res = quantize_with_params(w, qcfg, v, a, b)
            name = f"blocks.{k}.{attr}"
            packed[name] = PackedTensor(
                codes=pack_bits(res.codes, qcfg.bits),
                scales=res.scales.reshape(-1).astype(np.float32),
                zps=res.zps.reshape(-1).astype(np.uint16),
                shape=w.shape, config=qcfg, name=name)
            linears[attr] = res.w_hat
        quantized_blocks[k] = block.replaced(linears)

        snapshots.append(snapshot)
        rtn_losses.append(rtn_loss)
        final_losses.append(final_loss)
        histories.append(history)
        reports.append({
            "block": k, "rtn_loss": rtn_loss, "best_loss": snapshot.best_loss,
            "best_step": snapshot.best_step, "steps": tcfg.steps if method != "rtn" else 0,
            "mode": tcfg.mode, "optimizer": tcfg.optimizer if method != "rtn" else "none",
            "lr0": tcfg.lr0,
        })

    qmodel = ModelWeights(
        config=model.config,
        embedding=model.embedding, pos_embedding=model.pos_embedding,
        blocks=[quantized_blocks[k] for k in range(len(model.blocks))],
        final_gamma=model.final_gamma, final_beta=model.final_beta,
        lm_head=model.lm_head, packed=packed)
    return TuneResult(model=qmodel, snapshots=snapshots, reports=reports,
                      rtn_losses=rtn_losses, final_losses=final_losses,
                      loss_histories=histories)
