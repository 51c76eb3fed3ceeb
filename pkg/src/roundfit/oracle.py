"""Independent verification oracles.

brute_force_rounding enumerates every up/down rounding choice of a single
quantization group (2^n candidates) and returns the exact reconstruction
optimum, which bounds anything the tuner can reach at fixed scale and zero
point.

grad_check_suite compares every reverse-mode gradient against central
finite differences in f64. Smooth ops are differenced directly. The
quantize-dequantize path is differenced on a frozen surrogate written
independently of the autodiff engine: rounding is replaced by "add the
rounding offset captured at the base point" and clipping by "identity
inside the base-point mask, frozen boundary value outside", which is the
exact function whose true gradient the straight-through estimator
computes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .quant import QuantConfig, SCALE_FLOOR, TunedParams, qdq, rtn

FD_H = 1e-5
BRUTE_FORCE_MAX_N = 16


# -- brute-force rounding oracle ---------------------------------------------


@dataclass
class OracleResult:
    """Exhaustive rounding optimum vs RTN (and, optionally, the tuner)."""

    optimal_codes: np.ndarray
    optimal_mse: float
    rtn_mse: float
    rtn_codes: np.ndarray
    scale: float
    zp: int
    n_candidates: int = 0
    tuned_mse: float | None = None
    gap_ratio: float | None = None
    _w: np.ndarray = field(default=None, repr=False)
    _x: np.ndarray = field(default=None, repr=False)

    def evaluate_codes(self, codes) -> float:
        """MSE of a code assignment, computed exactly like the enumeration."""
        w_hat = self.scale * (np.asarray(codes, dtype=np.float64).reshape(1, -1) - self.zp)
        ref = self._w @ self._x
        diff = w_hat @ self._x - ref
        return float((diff * diff).mean())

    def with_tuned(self, tuned_mse: float) -> "OracleResult":
        gap = 1.0 if self.optimal_mse == 0.0 else tuned_mse / self.optimal_mse
        return OracleResult(
            optimal_codes=self.optimal_codes, optimal_mse=self.optimal_mse,
            rtn_mse=self.rtn_mse, rtn_codes=self.rtn_codes,
            scale=self.scale, zp=self.zp, n_candidates=self.n_candidates,
            tuned_mse=tuned_mse, gap_ratio=gap, _w=self._w, _x=self._x)


def brute_force_rounding(W, X, qcfg: QuantConfig) -> OracleResult:
    """Enumerate all 2^n floor/ceil roundings of a single-group weight row.

    W is [1, n] (n <= 16), X is [n, b]; scale and zero point are fixed at
    alpha = beta = 1 on the implementation's f32 grid, while candidate
    reconstructions and MSEs are evaluated in f64. Ties in the minimum are
    broken toward the lexicographically smallest code vector.
    """
    w32 = np.asarray(W, dtype=np.float32).reshape(1, -1)
    n = w32.shape[1]
    if n > BRUTE_FORCE_MAX_N:
        raise ValueError(f"brute force refused: {n} elements means 2^{n} candidates (max n={BRUTE_FORCE_MAX_N})")
    base = rtn(w32, qcfg)
    if base.scales.size != 1:
        raise ValueError(
            f"brute force needs a single group; {qcfg.label()} gives {base.scales.size} groups for n={n}"
        )
    s = float(base.scales[0, 0])
    zp = int(base.zps[0, 0])
    qmax = qcfg.qmax

    u = (w32 / np.float32(s) + np.float32(zp)).astype(np.float64).reshape(-1)
    floors = np.clip(np.floor(u), 0, qmax)
    ceils = np.clip(np.ceil(u), 0, qmax)

    count = 1 << n
    idx = np.arange(count, dtype=np.uint32)[:, None]
    shifts = np.arange(n - 1, -1, -1, dtype=np.uint32)[None, :]  # element 0 is the MSB
    take_ceil = (idx >> shifts) & 1
    codes_all = np.where(take_ceil == 1, ceils[None, :], floors[None, :])

    w64 = w32.astype(np.float64)
    x64 = np.asarray(X, dtype=np.float64)
    if x64.shape[0] != n:
        raise ValueError(f"X must be [{n} x b], got {x64.shape}")
    ref = w64 @ x64
    recon = (s * (codes_all - zp)) @ x64
    diff = recon - ref
    mses = (diff * diff).mean(axis=1)

    best = int(np.argmin(mses))  # first occurrence == lexicographically smallest
    result = OracleResult(
        optimal_codes=codes_all[best].astype(np.int32),
        optimal_mse=float(mses[best]),
        rtn_mse=0.0, rtn_codes=base.codes.reshape(-1).astype(np.int32),
        scale=s, zp=zp, n_candidates=count, _w=w64, _x=x64)
    result.rtn_mse = result.evaluate_codes(result.rtn_codes)
    return result


# -- finite-difference gradient suite -----------------------------------------


@dataclass
class CheckRow:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


@dataclass
class GradCheckReport:
    rows: list

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def to_text(self) -> str:
        lines = [f"{'op':<24} {'max_rel_err':>12} {'tol':>9} result"]
        for r in self.rows:
            lines.append(f"{r.name:<24} {r.max_rel_err:>12.3e} {r.tol:>9.0e} "
                         f"{'pass' if r.passed else 'FAIL'}")
        return "\n".join(lines)


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0


def fd_grad(f, x0: np.ndarray, h: float = FD_H) -> np.ndarray:
    """Central finite differences of scalar f over every coordinate of x0."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat = grad.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        flat[i] = (f(xp.reshape(x0.shape)) - f(xm.reshape(x0.shape))) / (2.0 * h)
    return grad


# Independent numpy re-implementations used as FD oracles. These mirror the
# defining formulas, not the autodiff code.

_NP_GELU_K0 = math.sqrt(2.0 / math.pi)
_NP_GELU_K1 = 0.044715


def _np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _np_layer_norm(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def _np_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_NP_GELU_K0 * (x + _NP_GELU_K1 * x**3)))


class _FrozenQdq:
    """Quantize-dequantize surrogate with rounding offsets and clip masks
    frozen at a base point; its exact gradient equals the STE gradient."""

    def __init__(self, w: np.ndarray, cfg: QuantConfig, v0, a0, b0):
        w = np.asarray(w, dtype=np.float64)
        self.out_f, self.in_f = w.shape
        g = self.in_f if cfg.group_size == -1 or cfg.group_size >= self.in_f else cfg.group_size
        self.npr = -(-self.in_f // g)
        self.g = g
        self.padded = self.npr * g
        self.qmax = float(cfg.qmax)

        wp_lo = np.full((self.out_f, self.padded), np.inf)
        wp_hi = np.full((self.out_f, self.padded), -np.inf)
        wp_lo[:, :self.in_f] = w
        wp_hi[:, :self.in_f] = w
        self.wmin = wp_lo.reshape(self.out_f, self.npr, g).min(axis=-1, keepdims=True)
        self.wmax = wp_hi.reshape(self.out_f, self.npr, g).max(axis=-1, keepdims=True)
        wg = np.zeros((self.out_f, self.padded))
        wg[:, :self.in_f] = w
        self.wg = wg.reshape(self.out_f, self.npr, g)

        # capture frozen rounding offsets / clip masks at the base point
        s_raw0 = (self.wmax * self._g3(a0) - self.wmin * self._g3(b0)) / self.qmax
        self.s_floor_mask = s_raw0 >= SCALE_FLOOR
        s0 = np.where(self.s_floor_mask, s_raw0, SCALE_FLOOR)
        zpr0 = -(self.wmin * self._g3(b0)) / s0
        self.zp_offset = np.rint(zpr0) - zpr0
        zp_rounded0 = np.rint(zpr0)
        self.zp_mask = (zp_rounded0 >= 0.0) & (zp_rounded0 <= self.qmax)
        self.zp_frozen = np.clip(zp_rounded0, 0.0, self.qmax)
        zp0 = self.zp_frozen
        u0 = self.wg / s0 + zp0 + self._v3(v0)
        self.u_offset = np.rint(u0) - u0
        q_rounded0 = np.rint(u0)
        self.q_mask = (q_rounded0 >= 0.0) & (q_rounded0 <= self.qmax)
        self.q_frozen = np.clip(q_rounded0, 0.0, self.qmax)

    def _g3(self, per_group):
        return np.asarray(per_group, dtype=np.float64).reshape(self.out_f, self.npr, 1)

    def _v3(self, v):
        vp = np.zeros((self.out_f, self.padded))
        vp[:, :self.in_f] = np.asarray(v, dtype=np.float64)
        return vp.reshape(self.out_f, self.npr, self.g)

    def interior_margin(self) -> float:
        """Distance of the base point from rounding ties and clip switches."""
        tie = np.abs(np.abs(self.u_offset) - 0.5).min()
        zp_tie = np.abs(np.abs(self.zp_offset) - 0.5).min()
        return float(min(tie, zp_tie))

    def w_hat(self, v, a, b) -> np.ndarray:
        s_raw = (self.wmax * self._g3(a) - self.wmin * self._g3(b)) / self.qmax
        s = np.where(self.s_floor_mask, s_raw, SCALE_FLOOR)
        zpr = -(self.wmin * self._g3(b)) / s
        zp = np.where(self.zp_mask, zpr + self.zp_offset, self.zp_frozen)
        u = self.wg / s + zp + self._v3(v)
        q = np.where(self.q_mask, u + self.u_offset, self.q_frozen)
        w_hat = s * (q - zp)
        return w_hat.reshape(self.out_f, self.padded)[:, :self.in_f]


def _check_matmul(rng) -> CheckRow:
    a0 = rng.uniform(-2, 2, (4, 5))
    b0 = rng.uniform(-2, 2, (5, 3))
    r = rng.uniform(-1, 1, (4, 3))
    at = Tensor(a0, requires_grad=True)
    bt = Tensor(b0, requires_grad=True)
    loss = ad.sum_all(ad.matmul(at, bt) * Tensor(r))
    ad.backward(loss)
    fd_a = fd_grad(lambda a: float(((a @ b0) * r).sum()), a0)
    fd_b = fd_grad(lambda b: float(((a0 @ b) * r).sum()), b0)
    err = max(rel_err(at.grad, fd_a), rel_err(bt.grad, fd_b))
    return CheckRow("matmul", err, 1e-6)


def _check_elementwise(rng) -> list[CheckRow]:
    rows = []
    for kind, op in (("add", np.add), ("sub", np.subtract),
                     ("mul", np.multiply), ("div", np.divide)):
        a0 = rng.uniform(-2, 2, (2, 3))
        b0 = rng.uniform(0.5, 2, (3,))  # bounded away from 0 for div
        r = rng.uniform(-1, 1, (2, 3))
        at = Tensor(a0, requires_grad=True)
        bt = Tensor(b0, requires_grad=True)
        loss = ad.sum_all(ad.elementwise(at, bt, kind) * Tensor(r))
        ad.backward(loss)
        fd_a = fd_grad(lambda a: float((op(a, b0) * r).sum()), a0)
        fd_b = fd_grad(lambda b: float((op(a0, b) * r).sum()), b0)
        err = max(rel_err(at.grad, fd_a), rel_err(bt.grad, fd_b))
        rows.append(CheckRow(f"elementwise_{kind}", err, 1e-6))
    return rows


def _check_softmax(rng) -> CheckRow:
    x0 = rng.uniform(-2, 2, (3, 4))
    r = rng.uniform(-1, 1, (3, 4))
    xt = Tensor(x0, requires_grad=True)
    loss = ad.sum_all(ad.softmax_lastdim(xt) * Tensor(r))
    ad.backward(loss)
    fd = fd_grad(lambda x: float((_np_softmax(x) * r).sum()), x0)
    return CheckRow("softmax_lastdim", rel_err(xt.grad, fd), 1e-6)


def _check_layer_norm(rng) -> CheckRow:
    x0 = rng.uniform(-2, 2, (3, 5))
    g0 = rng.uniform(0.5, 1.5, (5,))
    b0 = rng.uniform(-0.5, 0.5, (5,))
    r = rng.uniform(-1, 1, (3, 5))
    eps = 1e-5
    xt = Tensor(x0, requires_grad=True)
    gt = Tensor(g0, requires_grad=True)
    bt = Tensor(b0, requires_grad=True)
    loss = ad.sum_all(ad.layer_norm(xt, gt, bt, eps) * Tensor(r))
    ad.backward(loss)
    err = max(
        rel_err(xt.grad, fd_grad(lambda x: float((_np_layer_norm(x, g0, b0, eps) * r).sum()), x0)),
        rel_err(gt.grad, fd_grad(lambda g: float((_np_layer_norm(x0, g, b0, eps) * r).sum()), g0)),
        rel_err(bt.grad, fd_grad(lambda b: float((_np_layer_norm(x0, g0, b, eps) * r).sum()), b0)),
    )
    return CheckRow("layer_norm", err, 1e-5)


def _check_gelu(rng) -> CheckRow:
    x0 = rng.uniform(-2, 2, (2, 7))
    r = rng.uniform(-1, 1, (2, 7))
    xt = Tensor(x0, requires_grad=True)
    loss = ad.sum_all(ad.gelu(xt) * Tensor(r))
    ad.backward(loss)
    fd = fd_grad(lambda x: float((_np_gelu(x) * r).sum()), x0)
    return CheckRow("gelu", rel_err(xt.grad, fd), 1e-5)


def _check_mse(rng) -> CheckRow:
    a0 = rng.uniform(-2, 2, (3, 4))
    b0 = rng.uniform(-2, 2, (3, 4))
    at = Tensor(a0, requires_grad=True)
    bt = Tensor(b0, requires_grad=True)
    loss = ad.mse_loss(at, bt)
    ad.backward(loss)
    err = max(
        rel_err(at.grad, fd_grad(lambda a: float(((a - b0) ** 2).mean()), a0)),
        rel_err(bt.grad, fd_grad(lambda b: float(((a0 - b) ** 2).mean()), b0)),
    )
    return CheckRow("mse_loss", err, 1e-7)


def _check_round_ste(rng) -> CheckRow:
    x0 = rng.uniform(-3, 3, (11,))
    r = rng.uniform(-1, 1, (11,))
    xt = Tensor(x0, requires_grad=True)
    loss = ad.sum_all(ad.round_ste(xt) * Tensor(r))
    ad.backward(loss)
    err = float(np.abs(xt.grad - r).max())  # identity: grad must equal r exactly
    return CheckRow("round_ste", err, 0.0)


def _check_clip_ste(rng) -> CheckRow:
    x0 = np.array([-2.0, -1.0, -0.3, 0.0, 0.4, 1.0, 1.7])
    r = rng.uniform(-1, 1, x0.shape)
    lo, hi = -1.0, 1.0
    xt = Tensor(x0, requires_grad=True)
    loss = ad.sum_all(ad.clip_ste(xt, lo, hi) * Tensor(r))
    ad.backward(loss)
    mask = (x0 >= lo) & (x0 <= hi)  # inclusive boundary
    err = float(np.abs(xt.grad - r * mask).max())
    return CheckRow("clip_ste", err, 0.0)


def _qdq_fixture(rng, out_f=4, in_f=12, bits=3, group=4):
    """Interior fixture: base point away from rounding ties and clip edges."""
    cfg = QuantConfig(bits, group)
    for _ in range(64):
        w = rng.normal(0.0, 0.5, (out_f, in_f))
        v0 = rng.uniform(-0.2, 0.2, (out_f, in_f))
        a0 = rng.uniform(0.85, 1.0, (out_f * (in_f // group),))
        b0 = rng.uniform(0.85, 1.0, (out_f * (in_f // group),))
        frozen = _FrozenQdq(w, cfg, v0, a0, b0)
        if frozen.interior_margin() > 1e-3:
            return w, v0, a0, b0, cfg, frozen
    raise RuntimeError("could not draw an interior qdq fixture")


def _check_qdq(rng) -> CheckRow:
    w, v0, a0, b0, cfg, frozen = _qdq_fixture(rng)
    x = rng.uniform(-1, 1, (w.shape[1], 6))
    ref = w @ x

    def np_loss(v, a, b):
        diff = frozen.w_hat(v, a, b) @ x - ref
        return float((diff * diff).mean())

    tp = TunedParams(
        V=Tensor(v0, requires_grad=True),
        alpha=Tensor(a0, requires_grad=True),
        beta=Tensor(b0, requires_grad=True))
    loss = ad.mse_loss(ad.matmul(qdq(w, cfg, tp), Tensor(x)), Tensor(ref))
    if abs(float(loss.data) - np_loss(v0, a0, b0)) > 1e-12:
        raise RuntimeError("surrogate and autodiff forward disagree at the base point")
    ad.backward(loss)

    err = max(
        rel_err(tp.V.grad, fd_grad(lambda v: np_loss(v, a0, b0), v0)),
        rel_err(tp.alpha.grad, fd_grad(lambda a: np_loss(v0, a, b0), a0)),
        rel_err(tp.beta.grad, fd_grad(lambda b: np_loss(v0, a0, b), b0)),
    )
    return CheckRow("qdq_path", err, 1e-4)


class _NpBlock:
    """Independent numpy forward of one pre-norm block (f64)."""

    def __init__(self, weights: dict, n_heads: int, eps: float = 1e-5, mask_neg: float = -1e9):
        self.w = {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}
        self.n_heads = n_heads
        self.eps = eps
        self.mask_neg = mask_neg

    def forward(self, x: np.ndarray, linears: dict) -> np.ndarray:
        w = dict(self.w)
        w.update({k: np.asarray(v, dtype=np.float64) for k, v in linears.items()})
        bsz, seq, d = x.shape
        dh = d // self.n_heads
        h = _np_layer_norm(x, w["ln1_gamma"], w["ln1_beta"], self.eps)

        def heads(y):
            return y.reshape(bsz, seq, self.n_heads, dh).transpose(0, 2, 1, 3)

        q = heads(h @ w["wq"].T)
        k = heads(h @ w["wk"].T)
        v = heads(h @ w["wv"].T)
        mask = np.zeros((seq, seq))
        mask[np.triu_indices(seq, k=1)] = self.mask_neg
        att = _np_softmax(q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh) + mask)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(bsz, seq, d)
        x = x + ctx @ w["wo"].T
        h2 = _np_layer_norm(x, w["ln2_gamma"], w["ln2_beta"], self.eps)
        return x + _np_gelu(h2 @ w["w_up"].T) @ w["w_down"].T


def _check_block(rng) -> CheckRow:
    from .model import QUANTIZABLE_ATTRS, BlockWeights, block_forward

    d, n_heads, ff = 8, 2, 16
    cfg = QuantConfig(3, 4)

    def normal(*shape):
        return rng.normal(0.0, 0.3, shape)

    block = BlockWeights(
        wq=normal(d, d), wk=normal(d, d), wv=normal(d, d), wo=normal(d, d),
        w_up=normal(ff, d), w_down=normal(d, ff),
        ln1_gamma=rng.uniform(0.8, 1.2, d), ln1_beta=rng.uniform(-0.1, 0.1, d),
        ln2_gamma=rng.uniform(0.8, 1.2, d), ln2_beta=rng.uniform(-0.1, 0.1, d))
    x = rng.normal(0.0, 1.0, (2, 3, d))

    base = {}
    frozen = {}
    for attr in QUANTIZABLE_ATTRS:
        w = getattr(block, attr)
        groups = w.shape[0] * (w.shape[1] // 4)
        v0 = rng.uniform(-0.2, 0.2, w.shape)
        a0 = rng.uniform(0.85, 1.0, groups)
        b0 = rng.uniform(0.85, 1.0, groups)
        base[attr] = (v0, a0, b0)
        frozen[attr] = _FrozenQdq(w, cfg, v0, a0, b0)

    np_block = _NpBlock(
        {k: getattr(block, k) for k in
         ("wq", "wk", "wv", "wo", "w_up", "w_down",
          "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta")},
        n_heads)
    y_ref = np_block.forward(x, {})

    def np_loss(params):
        linears = {attr: frozen[attr].w_hat(*params[attr]) for attr in QUANTIZABLE_ATTRS}
        diff = np_block.forward(x, linears) - y_ref
        return float((diff * diff).mean())

    tuned = {attr: TunedParams(V=Tensor(base[attr][0], requires_grad=True),
                               alpha=Tensor(base[attr][1], requires_grad=True),
                               beta=Tensor(base[attr][2], requires_grad=True))
             for attr in QUANTIZABLE_ATTRS}
    qweights = {attr: qdq(getattr(block, attr), cfg, tuned[attr]) for attr in QUANTIZABLE_ATTRS}
    y_q = block_forward(block, Tensor(x), n_heads, weights=qweights)
    loss = ad.mse_loss(y_q, Tensor(y_ref))
    if abs(float(loss.data) - np_loss(base)) > 1e-10:
        raise RuntimeError("block surrogate and autodiff forward disagree at the base point")
    ad.backward(loss)

    worst = 0.0
    for attr in QUANTIZABLE_ATTRS:
        v0, a0, b0 = base[attr]

        def with_param(kind, arr):
            params = {k: list(base[k]) for k in base}
            params[attr][{"v": 0, "a": 1, "b": 2}[kind]] = arr
            return {k: tuple(vals) for k, vals in params.items()}

        worst = max(worst, rel_err(
            tuned[attr].V.grad, fd_grad(lambda v: np_loss(with_param("v", v)), v0)))
        worst = max(worst, rel_err(
            tuned[attr].alpha.grad, fd_grad(lambda a: np_loss(with_param("a", a)), a0)))
        worst = max(worst, rel_err(
            tuned[attr].beta.grad, fd_grad(lambda b: np_loss(with_param("b", b)), b0)))
    return CheckRow("toy_block", worst, 1e-4)


def grad_check_suite(seed: int = 0) -> GradCheckReport:
    """Run every gradient check; failures are report rows, not exceptions."""
    rng = np.random.default_rng(seed)
    rows = [_check_matmul(rng)]
    rows.extend(_check_elementwise(rng))
    rows.extend([
        _check_softmax(rng),
        _check_layer_norm(rng),
        _check_gelu(rng),
        _check_mse(rng),
        _check_round_ste(rng),
        _check_clip_ste(rng),
        _check_qdq(rng),
        _check_block(rng),
    ])
    return GradCheckReport(rows=rows)
