"""Group-wise asymmetric uniform quantization.

Weights are partitioned along the input dimension of each output row into
groups that share one scale/zero-point pair. The scale is derived from the
group min/max shrunk by trainable clip factors (alpha for the max side,
beta for the min side), and a trainable per-element offset V shifts each
value before rounding. RTN is the V=0, alpha=beta=1 special case.

Two parallel code paths compute the same math in the same operation order:
a plain-numpy kernel (fast path for RTN, packing and model dequant) and an
autodiff graph (`qdq`) used during tuning. Tests assert they agree bit for
bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

SCALE_FLOOR = 1e-8
CLIP_FLOOR = 1e-3  # lower clamp for alpha/beta; keeps the scale positive
V_BOUND = 0.5

_VALID_BITS = (2, 3, 4, 8)


@dataclass(frozen=True)
class QuantConfig:
    """Bit width and grouping; mode is asymmetric only."""

    bits: int
    group_size: int = -1
    mode: str = "asymmetric"

    def __post_init__(self):
        if self.bits not in _VALID_BITS:
            raise ValueError(f"bits must be one of {_VALID_BITS}, got {self.bits}")
        if self.group_size != -1 and self.group_size < 1:
            raise ValueError(f"group_size must be -1 or >= 1, got {self.group_size}")
        if self.mode != "asymmetric":
            raise ValueError(f"only asymmetric mode is supported, got {self.mode!r}")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1

    def label(self) -> str:
        return f"W{self.bits}G{self.group_size}"


@dataclass(frozen=True)
class GroupParams:
    """Scale and zero point for one quantization group."""

    s: float
    zp: int


@dataclass(frozen=True)
class Group:
    """One group slice of a 2-D weight: row index plus [start, stop)."""

    row: int
    start: int
    stop: int
    values: np.ndarray


@dataclass
class TunedParams:
    """Trainables of the rounding/clip tuner.

    V has the weight's shape; alpha/beta carry one scalar per group in
    row-major group order.
    """

    V: Tensor
    alpha: Tensor
    beta: Tensor

    @classmethod
    def initial(cls, shape, cfg: QuantConfig, dtype=np.float32,
                train_v: bool = True, train_clip: bool = True):
        """V = 0 and alpha = beta = 1; the flags select the trainable subset."""
        out_f, in_f = shape
        _, n_per_row, _ = _geometry(in_f, cfg)
        n_groups = out_f * n_per_row
        return cls(
            V=Tensor(np.zeros(shape, dtype=dtype), requires_grad=train_v),
            alpha=Tensor(np.ones(n_groups, dtype=dtype), requires_grad=train_clip),
            beta=Tensor(np.ones(n_groups, dtype=dtype), requires_grad=train_clip),
        )

    def arrays(self):
        """Plain-numpy copies of (V, alpha, beta)."""
        return self.V.data.copy(), self.alpha.data.copy(), self.beta.data.copy()


def _geometry(in_features: int, cfg: QuantConfig):
    """Return (effective group size, groups per row, padded row width)."""
    if cfg.group_size == -1 or cfg.group_size >= in_features:
        g = in_features
    else:
        g = cfg.group_size
    n_per_row = -(-in_features // g)
    return g, n_per_row, n_per_row * g


def n_groups(shape, cfg: QuantConfig) -> int:
    out_f, in_f = shape
    return out_f * _geometry(in_f, cfg)[1]


def group_view(W, cfg: QuantConfig) -> list[Group]:
    """Partition each output row along the input dim; final group may be ragged."""
    w = W.data if isinstance(W, Tensor) else np.asarray(W)
    if w.ndim != 2:
        raise ShapeError(f"group_view expects a 2-D weight, got shape {w.shape}")
    out_f, in_f = w.shape
    g, _, _ = _geometry(in_f, cfg)
    groups = []
    for row in range(out_f):
        for start in range(0, in_f, g):
            stop = min(start + g, in_f)
            groups.append(Group(row, start, stop, w[row, start:stop]))
    return groups


def _group_minmax(w2d: np.ndarray, cfg: QuantConfig):
    """Per-group min/max as [out, groups_per_row] arrays (ragged-safe)."""
    out_f, in_f = w2d.shape
    g, n_per_row, padded = _geometry(in_f, cfg)
    lo = np.full((out_f, padded), np.inf, dtype=w2d.dtype)
    hi = np.full((out_f, padded), -np.inf, dtype=w2d.dtype)
    lo[:, :in_f] = w2d
    hi[:, :in_f] = w2d
    wmin = lo.reshape(out_f, n_per_row, g).min(axis=-1)
    wmax = hi.reshape(out_f, n_per_row, g).max(axis=-1)
    return wmin, wmax


def _scale_zp_numpy(wmin, wmax, qmax: float, alpha, beta):
    """Scale/zero-point arrays; mirrors the autodiff graph op for op."""
    s_raw = (wmax * alpha - wmin * beta) / qmax
    s = np.clip(s_raw, SCALE_FLOOR, np.inf)
    zp_real = (wmin * beta * -1.0) / s
    zp = np.clip(np.rint(zp_real), 0.0, qmax)
    return s, zp


def compute_scale_zp(group, cfg: QuantConfig, alpha: float = 1.0, beta: float = 1.0) -> GroupParams:
    """Scale and zero point of a single group at the given clip factors."""
    vals = group.data if isinstance(group, Tensor) else np.asarray(group)
    vals = vals.reshape(1, -1)
    if vals.size == 0:
        raise ValueError("group must be nonempty")
    wmin, wmax = _group_minmax(vals, QuantConfig(cfg.bits, -1))
    a = np.full_like(wmin, alpha)
    b = np.full_like(wmin, beta)
    s, zp = _scale_zp_numpy(wmin, wmax, float(cfg.qmax), a, b)
    return GroupParams(s=float(s[0, 0]), zp=int(zp[0, 0]))


@dataclass
class RtnResult:
    """RTN quantization output: integer codes, per-group params, dequant."""

    codes: np.ndarray      # [out, in] int32
    scales: np.ndarray     # [out, groups_per_row]
    zps: np.ndarray        # [out, groups_per_row] int32
    w_hat: np.ndarray      # [out, in], same dtype as input
    unclipped: np.ndarray = field(repr=False, default=None)  # [out, in] bool


def _qdq_numpy(w2d: np.ndarray, cfg: QuantConfig, V=None, alpha=None, beta=None) -> RtnResult:
    """Quantize-dequantize kernel, identical op order to the autodiff path."""
    out_f, in_f = w2d.shape
    g, n_per_row, padded = _geometry(in_f, cfg)
    qmax = float(cfg.qmax)
    wmin, wmax = _group_minmax(w2d, cfg)
    wmin = wmin.reshape(out_f, n_per_row, 1)
    wmax = wmax.reshape(out_f, n_per_row, 1)
    if alpha is None:
        alpha = np.ones((out_f * n_per_row,), dtype=w2d.dtype)
    if beta is None:
        beta = np.ones((out_f * n_per_row,), dtype=w2d.dtype)
    a3 = np.asarray(alpha, dtype=w2d.dtype).reshape(out_f, n_per_row, 1)
    b3 = np.asarray(beta, dtype=w2d.dtype).reshape(out_f, n_per_row, 1)
    s, zp = _scale_zp_numpy(wmin, wmax, qmax, a3, b3)

    wg = np.zeros((out_f, padded), dtype=w2d.dtype)
    wg[:, :in_f] = w2d
    wg = wg.reshape(out_f, n_per_row, g)
    if V is None:
        v3 = np.zeros_like(wg)
    else:
        v = np.asarray(V, dtype=w2d.dtype)
        v3 = np.zeros((out_f, padded), dtype=w2d.dtype)
        v3[:, :in_f] = v
        v3 = v3.reshape(out_f, n_per_row, g)

    u = wg / s + zp + v3
    rounded = np.rint(u)
    q = np.clip(rounded, 0.0, qmax)
    w_hat = (s * (q - zp)).reshape(out_f, padded)[:, :in_f]
    unclipped = ((rounded >= 0.0) & (rounded <= qmax)).reshape(out_f, padded)[:, :in_f]
    codes = q.astype(np.int32).reshape(out_f, padded)[:, :in_f]
    return RtnResult(
        codes=codes,
        scales=s.reshape(out_f, n_per_row),
        zps=zp.astype(np.int32).reshape(out_f, n_per_row),
        w_hat=np.ascontiguousarray(w_hat),
        unclipped=unclipped,
    )


def rtn(W, cfg: QuantConfig) -> RtnResult:
    """Round-to-nearest baseline: V=0, alpha=beta=1, with integer codes."""
    w = W.data if isinstance(W, Tensor) else np.asarray(W)
    if w.ndim != 2:
        raise ShapeError(f"rtn expects a 2-D weight, got shape {w.shape}")
    return _qdq_numpy(w, cfg)


def quantize_with_params(W, cfg: QuantConfig, V, alpha, beta) -> RtnResult:
    """Numpy quantization at explicit tuned parameters (codes + dequant)."""
    w = W.data if isinstance(W, Tensor) else np.asarray(W)
    return _qdq_numpy(w, cfg, V=V, alpha=alpha, beta=beta)


def dequantize_codes(codes: np.ndarray, scales: np.ndarray, zps: np.ndarray,
                     cfg: QuantConfig, dtype=np.float32) -> np.ndarray:
    """Reconstruct w_hat = s * (q - zp); bit-identical to the quantize path."""
    out_f, in_f = codes.shape
    g, n_per_row, padded = _geometry(in_f, cfg)
    q = np.zeros((out_f, padded), dtype=dtype)
    q[:, :in_f] = codes.astype(dtype)
    q = q.reshape(out_f, n_per_row, g)
    s = np.asarray(scales, dtype=dtype).reshape(out_f, n_per_row, 1)
    zp = np.asarray(zps, dtype=dtype).reshape(out_f, n_per_row, 1)
    w_hat = (s * (q - zp)).reshape(out_f, padded)[:, :in_f]
    return np.ascontiguousarray(w_hat)


def qdq(W, cfg: QuantConfig, tuned: TunedParams) -> Tensor:
    """Differentiable quantize-dequantize of a 2-D weight.

    Gradients flow to V, alpha and beta only (the weight is a constant);
    rounding uses the straight-through estimator and clipping passes
    gradient on the inclusive interior.
    """
    w = W.data if isinstance(W, Tensor) else np.asarray(W)
    if w.ndim != 2:
        raise ShapeError(f"qdq expects a 2-D weight, got shape {w.shape}")
    out_f, in_f = w.shape
    g, n_per_row, padded = _geometry(in_f, cfg)
    groups = out_f * n_per_row
    if tuned.V.shape != (out_f, in_f):
        raise ShapeError(f"V shape {tuned.V.shape} does not match weight {w.shape}")
    if tuned.alpha.shape != (groups,) or tuned.beta.shape != (groups,):
        raise ShapeError(
            f"alpha/beta must have {groups} entries for {w.shape} at {cfg.label()}, "
            f"got {tuned.alpha.shape}/{tuned.beta.shape}"
        )
    qmax = float(cfg.qmax)
    wmin, wmax = _group_minmax(w, cfg)
    wmin_t = Tensor(wmin.reshape(out_f, n_per_row, 1))
    wmax_t = Tensor(wmax.reshape(out_f, n_per_row, 1))
    a3 = ad.reshape(tuned.alpha, (out_f, n_per_row, 1))
    b3 = ad.reshape(tuned.beta, (out_f, n_per_row, 1))

    s_raw = (wmax_t * a3 - wmin_t * b3) / qmax
    s = ad.clip_ste(s_raw, SCALE_FLOOR, math.inf)
    zp_real = (wmin_t * b3 * -1.0) / s
    zp = ad.clip_ste(ad.round_ste(zp_real), 0.0, qmax)

    wg = np.zeros((out_f, padded), dtype=w.dtype)
    wg[:, :in_f] = w
    wg_t = Tensor(wg.reshape(out_f, n_per_row, g))
    v3 = ad.reshape(ad.pad_lastdim(tuned.V, padded), (out_f, n_per_row, g))

    u = wg_t / s + zp + v3
    q = ad.clip_ste(ad.round_ste(u), 0.0, qmax)
    w_hat3 = s * (q - zp)
    return ad.crop_lastdim(ad.reshape(w_hat3, (out_f, padded)), in_f)
