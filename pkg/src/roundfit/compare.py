"""Ablation harness: RTN vs tuned quantization across optimizer/mode grids.

Rows mirror the two classic ablation axes: optimizer (SignSGD vs Adam over
a learning-rate sweep) and tuning mode (rounding only / clip only / both /
RTN), each reporting reconstruction loss and toy perplexity from identical
seeds. Also emits parameter-distribution histograms of tuned snapshots.

A random-init toy model is not predictive, so its perplexity does not
respond systematically to quantization error. ``fit_readout`` fits the
(never-quantized) lm-head to the calibration distribution in closed form,
which makes the perplexity columns direction-meaningful while leaving the
quantization target untouched.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, replace

import numpy as np

from .calib import CalibSet
from .model import ModelWeights, final_hidden, stream_perplexity
from .quant import CLIP_FLOOR, QuantConfig, V_BOUND
from .tuner import TuneConfig, tune_model

ADAM_LR_SWEEP = (2.5e-3, 5e-3, 1e-2, 2e-2)
HIST_BINS = 32


@dataclass(frozen=True)
class Variant:
    """One ablation cell: quantization method plus tuning knobs."""

    label: str
    method: str = "signround"  # "rtn" skips tuning entirely
    optimizer: str = "signsgd"
    lr0: float = 5e-3
    mode: str = "both"


def optimizer_grid() -> list[Variant]:
    """SignSGD at the default lr vs Adam over its lr sweep."""
    grid = [Variant(label="signsgd:5e-3", optimizer="signsgd", lr0=5e-3)]
    for lr in ADAM_LR_SWEEP:
        grid.append(Variant(label=f"adam:{lr:g}", optimizer="adam", lr0=lr))
    return grid


def mode_grid() -> list[Variant]:
    """RTN baseline plus rounding-only / clip-only / both tuning."""
    return [
        Variant(label="rtn", method="rtn"),
        Variant(label="rounding-only", mode="rounding"),
        Variant(label="clip-only", mode="clip"),
        Variant(label="both", mode="both"),
    ]


def fit_readout(model: ModelWeights, calib: CalibSet, table: np.ndarray,
                ridge: float = 1e-3, smoothing: float = 0.1) -> ModelWeights:
    """Replace the lm-head with a least-squares fit to bigram log-probs.

    The readout is fitted on the model's own final hidden states over the
    calibration sequences; blocks, embeddings and layer norms are
    untouched, so the quantization target is identical. Targets are
    uniform-smoothed before the log to tame outliers.
    """
    vocab = table.shape[0]
    smoothed = (1.0 - smoothing) * table + smoothing / vocab
    hidden = final_hidden(model, calib.sequences)
    feats = hidden.reshape(-1, hidden.shape[-1]).astype(np.float64)
    targets = np.log(smoothed[calib.sequences.reshape(-1)])
    gram = feats.T @ feats + ridge * np.eye(feats.shape[1])
    head = np.linalg.solve(gram, feats.T @ targets)  # [d_model, vocab]
    fitted = ModelWeights(
        config=model.config,
        embedding=model.embedding, pos_embedding=model.pos_embedding,
        blocks=model.blocks,
        final_gamma=model.final_gamma, final_beta=model.final_beta,
        lm_head=np.ascontiguousarray(head.T).astype(np.float32))
    return fitted


@dataclass
class AblationReport:
    """Comparison rows; each is reproducible from its embedded seed/config."""

    rows: list

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows}, indent=2, sort_keys=True)

    def to_text(self) -> str:
        cols = ("label", "optimizer", "mode", "lr", "rtn_loss", "tuned_loss",
                "ppl_fp", "ppl_rtn", "ppl_tuned")
        out = io.StringIO()
        widths = {}
        formatted = []
        for row in self.rows:
            cells = {}
            for c in cols:
                v = row[c]
                cells[c] = f"{v:.6g}" if isinstance(v, float) else str(v)
            formatted.append(cells)
        for c in cols:
            widths[c] = max(len(c), *(len(f[c]) for f in formatted)) if formatted else len(c)
        out.write("  ".join(c.ljust(widths[c]) for c in cols) + "\n")
        for cells in formatted:
            out.write("  ".join(cells[c].ljust(widths[c]) for c in cols) + "\n")
        return out.getvalue()


def compare_quantizers(model: ModelWeights, calib: CalibSet, qcfg: QuantConfig,
                       variants: list, eval_tokens: np.ndarray,
                       base: TuneConfig | None = None) -> AblationReport:
    """Run RTN and each tuned variant from identical seeds and report.

    Reconstruction losses are full-calibration-cache means over blocks;
    perplexity is pooled over the held-out token stream.
    """
    if not variants:
        raise ValueError("variants must be nonempty")
    base = base or TuneConfig()
    ppl_fp = stream_perplexity(model, eval_tokens)

    rtn_run = tune_model(model, calib, qcfg, base, method="rtn")
    ppl_rtn = stream_perplexity(rtn_run.model, eval_tokens)
    rtn_loss = float(np.mean(rtn_run.rtn_losses))

    rows = []
    for v in variants:
        if v.method == "rtn":
            tuned_loss, ppl_tuned = rtn_loss, ppl_rtn
        else:
            tcfg = replace(base, optimizer=v.optimizer, lr0=v.lr0, mode=v.mode)
            run = tune_model(model, calib, qcfg, tcfg, method="signround")
            tuned_loss = float(np.mean(run.final_losses))
            ppl_tuned = stream_perplexity(run.model, eval_tokens)
        rows.append({
            "label": v.label, "optimizer": v.optimizer if v.method != "rtn" else "none",
            "mode": v.mode if v.method != "rtn" else "none", "lr": v.lr0,
            "rtn_loss": rtn_loss, "tuned_loss": tuned_loss,
            "ppl_fp": ppl_fp, "ppl_rtn": ppl_rtn, "ppl_tuned": ppl_tuned,
            "seed": base.seed, "bits": qcfg.bits, "group_size": qcfg.group_size,
            "steps": base.steps, "batch_size": base.batch_size,
            "quantized_input": base.quantized_input,
        })
    return AblationReport(rows=rows)


def emit_param_stats(snapshots: list, bins: int = HIST_BINS) -> str:
    """CSV histograms of |V|, alpha, beta per block over their bound ranges."""
    if not snapshots:
        raise ValueError("snapshots must be nonempty")
    out = io.StringIO()
    out.write("block,param,bin_lo,bin_hi,count\n")
    ranges = {"abs_v": (0.0, V_BOUND), "alpha": (CLIP_FLOOR, 1.0), "beta": (CLIP_FLOOR, 1.0)}
    for k, snap in enumerate(snapshots):
        values = {
            "abs_v": np.abs(np.concatenate([v.reshape(-1) for v in snap.best_V.values()])),
            "alpha": np.concatenate([a.reshape(-1) for a in snap.best_alpha.values()]),
            "beta": np.concatenate([b.reshape(-1) for b in snap.best_beta.values()]),
        }
        for param, vals in values.items():
            counts, edges = np.histogram(vals, bins=bins, range=ranges[param])
            for i in range(bins):
                out.write(f"{k},{param},{edges[i]:.9g},{edges[i + 1]:.9g},{counts[i]}\n")
    return out.getvalue()
