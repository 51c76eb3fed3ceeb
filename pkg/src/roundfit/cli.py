"""Command-line entry point.

Subcommands: quantize, eval, oracle, gradcheck, compare. Exit codes:
0 success, 1 user error (bad flags, unreadable/corrupt files), 2 internal
or verification failure. The RF_THREADS environment variable caps internal
parallelism (applied to the numeric backend before it loads). All
randomness flows from --seed; omitting it means seed 0 and is still
deterministic.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_USER = 1
EXIT_VERIFY = 2


def _apply_thread_cap():
    cap = os.environ.get("RF_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _add_model_flags(p: argparse.ArgumentParser):
    p.add_argument("--model", help="model container file (.rftf)")
    p.add_argument("--init-seed", type=int, default=None,
                   help="synthesize a default toy model with this seed instead of loading one")
    p.add_argument("--vocab", type=int, default=256)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--d-ff", type=int, default=256)
    p.add_argument("--max-seq-len", type=int, default=64)


def _add_quant_flags(p: argparse.ArgumentParser):
    p.add_argument("--bits", type=int, choices=(2, 3, 4, 8), default=4)
    p.add_argument("--group-size", type=int, default=-1,
                   help="-1 for one group per output channel")


def _add_calib_flags(p: argparse.ArgumentParser):
    p.add_argument("--calib", default="synth",
                   help="token id file (newline-delimited ints) or 'synth'")
    p.add_argument("--seqlen", type=int, default=64)
    p.add_argument("--nsamples", type=int, default=128)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roundfit",
                                     description="Weight-only quantization with signed-gradient rounding/clip tuning")
    sub = parser.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="quantize a toy model (RTN or tuned)")
    _add_model_flags(q)
    _add_quant_flags(q)
    _add_calib_flags(q)
    q.add_argument("--method", choices=("rtn", "signround"), default="signround")
    q.add_argument("--optimizer", choices=("signsgd", "adam"), default=None)
    q.add_argument("--steps", type=int, default=None, help="tuning steps (default 200)")
    q.add_argument("--lr", type=float, default=None,
                   help="initial learning rate (default 5e-3 for signsgd, 1e-2 for adam)")
    q.add_argument("--clip-lr-scale", type=float, default=1.0)
    q.add_argument("--batch-size", type=int, default=None, help="default 8")
    q.add_argument("--tune", choices=("rounding", "clip", "both"), default=None)
    q.add_argument("--quantized-input", choices=("true", "false"), default="true")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--fit-readout", action="store_true",
                   help="fit the lm-head to the calibration distribution before quantizing")
    q.add_argument("--out", required=True, help="output model file")
    q.add_argument("--report", help="tuning report JSON path (default <out>.report.json)")

    e = sub.add_parser("eval", help="perplexity and per-block reconstruction MSE")
    e.add_argument("--model", required=True)
    e.add_argument("--baseline", help="full-precision reference model for per-block MSE")
    e.add_argument("--tokens", default="synth", help="held-out token file or 'synth'")
    e.add_argument("--n-tokens", type=int, default=10000)
    e.add_argument("--seqlen", type=int, default=None)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--json", action="store_true", help="machine-readable output")

    o = sub.add_parser("oracle", help="brute-force rounding optimality check")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--n", type=int, default=8, help="weight elements (<= 16)")
    o.add_argument("--cols", type=int, default=16, help="calibration columns")
    o.add_argument("--bits", type=int, choices=(2, 3, 4, 8), default=2)
    o.add_argument("--grid", action="store_true",
                   help="use an exactly representable fixture (optimum 0)")
    o.add_argument("--tune", action="store_true",
                   help="also run the rounding tuner and check the sandwich")
    o.add_argument("--steps", type=int, default=2000)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("compare", help="ablation grid: optimizer / mode axes")
    _add_model_flags(c)
    _add_quant_flags(c)
    _add_calib_flags(c)
    c.add_argument("--grid", default=None,
                   help="comma-separated optimizer:lr cells, e.g. signsgd:5e-3,adam:1e-2")
    c.add_argument("--modes", default=None,
                   help="comma-separated tuning modes from {rtn,rounding,clip,both}")
    c.add_argument("--steps", type=int, default=200)
    c.add_argument("--batch-size", type=int, default=8)
    c.add_argument("--quantized-input", choices=("true", "false"), default="true")
    c.add_argument("--eval-tokens", type=int, default=10000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", help="write the report JSON here")
    c.add_argument("--param-stats", help="write tuned-parameter histogram CSV here")
    return parser


def _load_or_init_model(args):
    from . import model as M
    from .errors import RoundfitError

    if args.model and args.init_seed is not None:
        raise RoundfitError("--model and --init-seed are mutually exclusive")
    if args.model:
        return M.load_model(args.model)
    seed = args.init_seed if args.init_seed is not None else args.seed
    cfg = M.ModelConfig(vocab_size=args.vocab, d_model=args.d_model,
                        n_heads=args.n_heads, n_layers=args.n_layers,
                        d_ff=args.d_ff, max_seq_len=args.max_seq_len, seed=seed)
    return M.model_init(cfg)


def _load_calib(args, vocab: int):
    from . import calib as C

    if args.calib == "synth":
        return C.synth_tokens(args.seed, args.seqlen, args.nsamples, vocab)
    return C.load_tokens(args.calib, args.seqlen, args.nsamples, vocab)


def cmd_quantize(args) -> int:
    from . import calib as C, compare as CP, model as M
    from .quant import QuantConfig
    from .tuner import TuneConfig, tune_model

    if args.method == "rtn":
        conflicting = [name for name, val in (
            ("--steps", args.steps), ("--lr", args.lr), ("--batch-size", args.batch_size),
            ("--optimizer", args.optimizer), ("--tune", args.tune)) if val is not None]
        if conflicting:
            print(f"error: {', '.join(conflicting)} make no sense with --method rtn",
                  file=sys.stderr)
            return EXIT_USER

    optimizer = args.optimizer or "signsgd"
    lr = args.lr if args.lr is not None else (1e-2 if optimizer == "adam" else 5e-3)
    tcfg = TuneConfig(
        steps=args.steps if args.steps is not None else 200,
        lr0=lr,
        batch_size=args.batch_size if args.batch_size is not None else 8,
        optimizer=optimizer,
        mode=args.tune or "both",
        quantized_input=args.quantized_input == "true",
        clip_lr_scale=args.clip_lr_scale,
        seed=args.seed)
    qcfg = QuantConfig(args.bits, args.group_size)

    model = _load_or_init_model(args)
    calib = _load_calib(args, model.config.vocab_size)
    if args.fit_readout:
        table = C.bigram_table(args.seed, model.config.vocab_size)
        model = CP.fit_readout(model, calib, table)

    result = tune_model(model, calib, qcfg, tcfg, method=args.method)
    M.save_model(args.out, result.model)
    report_path = args.report or (args.out + ".report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump({"config": {"bits": qcfg.bits, "group_size": qcfg.group_size,
                              "method": args.method, "seed": args.seed},
                   "blocks": result.reports}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for row in result.reports:
        print(f"block {row['block']}: rtn_loss={row['rtn_loss']:.6g} "
              f"best_loss={row['best_loss']:.6g} best_step={row['best_step']}")
    print(f"wrote {args.out} and {report_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import calib as C, model as M

    model = M.load_model(args.model)
    if args.tokens == "synth":
        held = C.markov_stream(args.seed + 1, args.n_tokens, model.config.vocab_size)
    else:
        held = C.load_tokens(args.tokens, args.seqlen or model.config.max_seq_len,
                             max(1, args.n_tokens // (args.seqlen or model.config.max_seq_len)),
                             model.config.vocab_size).sequences.reshape(-1)
    ppl = M.stream_perplexity(model, held, seqlen=args.seqlen)

    block_mse = None
    if args.baseline:
        baseline = M.load_model(args.baseline)
        seqs = held[: (held.size // baseline.config.max_seq_len) * baseline.config.max_seq_len]
        seqs = seqs.reshape(-1, baseline.config.max_seq_len)
        block_mse = []
        x = M.embed(baseline, seqs)
        from .autodiff import Tensor
        for k, ref_block in enumerate(baseline.blocks):
            y_ref = M.block_forward(ref_block, Tensor(x), baseline.config.n_heads).data
            y_q = M.block_forward(model.blocks[k], Tensor(x), model.config.n_heads).data
            diff = y_q - y_ref
            block_mse.append(float((diff * diff).mean()))
            x = y_ref  # propagate full-precision activations

    if args.json:
        print(json.dumps({"ppl": ppl, "block_mse": block_mse,
                          "model": args.model, "n_tokens": int(held.size)}, sort_keys=True))
    else:
        print(f"perplexity: {ppl:.6g}  ({held.size} held-out tokens)")
        if block_mse is not None:
            for k, v in enumerate(block_mse):
                print(f"block {k} reconstruction mse: {v:.6g}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    import numpy as np
    from .oracle import brute_force_rounding
    from .quant import QuantConfig, quantize_with_params, rtn
    from .tuner import TuneConfig, tune_linear

    rng = np.random.default_rng(args.seed)
    qcfg = QuantConfig(args.bits, -1)
    if args.grid:
        # weights sitting exactly on a representable grid: optimum must be 0
        s, zp = 0.05, 2
        codes = rng.integers(0, qcfg.qmax + 1, size=(1, args.n))
        codes[0, 0], codes[0, 1] = 0, qcfg.qmax  # pin the group range
        W = (s * (codes - zp)).astype(np.float32)
    else:
        W = rng.normal(0.0, 0.5, (1, args.n)).astype(np.float32)
    X = rng.normal(0.0, 1.0, (args.n, args.cols)).astype(np.float32)

    res = brute_force_rounding(W, X, qcfg)
    rows = [("optimal_mse", res.optimal_mse), ("rtn_mse", res.rtn_mse)]
    failures = []
    if res.optimal_mse > res.rtn_mse + 1e-9:
        failures.append(f"optimal_mse {res.optimal_mse} > rtn_mse {res.rtn_mse}")
    if args.grid and res.optimal_mse != 0.0:
        failures.append(f"on-grid fixture has optimal_mse {res.optimal_mse} != 0")
    if args.tune:
        tcfg = TuneConfig(steps=args.steps, batch_size=args.cols, mode="rounding",
                          seed=args.seed)
        snap, _ = tune_linear(W, X, qcfg, tcfg)
        q = quantize_with_params(W, qcfg, snap.best_V["w"], snap.best_alpha["w"],
                                 snap.best_beta["w"])
        res = res.with_tuned(res.evaluate_codes(q.codes.reshape(-1)))
        rows += [("tuned_mse", res.tuned_mse), ("gap_ratio", res.gap_ratio)]
        if res.optimal_mse > res.tuned_mse + 1e-9:
            failures.append(f"tuned_mse {res.tuned_mse} beats the exhaustive optimum")

    for name, val in rows:
        print(f"{name}: {val:.9g}")
    if failures:
        for f in failures:
            print(f"FAIL: {f}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .oracle import grad_check_suite

    report = grad_check_suite(args.seed)
    print(report.to_text())
    return EXIT_OK if report.passed else EXIT_VERIFY


def _parse_grid(spec: str):
    from .compare import Variant

    variants = []
    for cell in spec.split(","):
        cell = cell.strip()
        if not cell:
            continue
        if ":" not in cell:
            raise ValueError(f"grid cell {cell!r} is not optimizer:lr")
        opt, lr = cell.split(":", 1)
        opt = opt.strip()
        if opt not in ("signsgd", "adam"):
            raise ValueError(f"unknown optimizer {opt!r} in grid")
        variants.append(Variant(label=cell, optimizer=opt, lr0=float(lr)))
    if not variants:
        raise ValueError("empty --grid")
    return variants


def _parse_modes(spec: str):
    from .compare import Variant

    variants = []
    for mode in (m.strip() for m in spec.split(",")):
        if not mode:
            continue
        if mode == "rtn":
            variants.append(Variant(label="rtn", method="rtn"))
        elif mode in ("rounding", "clip", "both"):
            variants.append(Variant(label=f"{mode}", mode=mode))
        else:
            raise ValueError(f"unknown tuning mode {mode!r}")
    if not variants:
        raise ValueError("empty --modes")
    return variants


def cmd_compare(args) -> int:
    from . import calib as C, compare as CP
    from .quant import QuantConfig
    from .tuner import TuneConfig, tune_model

    variants = []
    if args.grid:
        variants += _parse_grid(args.grid)
    if args.modes:
        variants += _parse_modes(args.modes)
    if not variants:
        variants = CP.optimizer_grid() + CP.mode_grid()

    model = _load_or_init_model(args)
    calib = _load_calib(args, model.config.vocab_size)
    table = C.bigram_table(args.seed, model.config.vocab_size)
    model = CP.fit_readout(model, calib, table)
    held = C.markov_stream(args.seed + 1000, args.eval_tokens, model.config.vocab_size)

    base = TuneConfig(steps=args.steps, batch_size=args.batch_size,
                      quantized_input=args.quantized_input == "true", seed=args.seed)
    qcfg = QuantConfig(args.bits, args.group_size)
    report = CP.compare_quantizers(model, calib, qcfg, variants, held, base)
    print(report.to_text(), end="")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
            fh.write("\n")
        print(f"wrote {args.out}")
    if args.param_stats:
        tuned = [v for v in variants if v.method != "rtn"]
        pick = tuned[0] if tuned else None
        if pick is not None:
            from dataclasses import replace
            run = tune_model(model, calib, qcfg,
                             replace(base, optimizer=pick.optimizer, lr0=pick.lr0,
                                     mode=pick.mode))
            with open(args.param_stats, "w", encoding="utf-8") as fh:
                fh.write(CP.emit_param_stats(run.snapshots))
            print(f"wrote {args.param_stats}")
    return EXIT_OK


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    from .errors import FormatError, DataError, RoundfitError

    handlers = {
        "quantize": cmd_quantize, "eval": cmd_eval, "oracle": cmd_oracle,
        "gradcheck": cmd_gradcheck, "compare": cmd_compare,
    }
    try:
        return handlers[args.command](args)
    except (FormatError, DataError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except RoundfitError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
