"""Command-line surface.

Subcommands: preset, upcycle, forward, route-stats, similarity, bench,
check, train-demo. Every subcommand is deterministic given its inputs and
--seed (bench timings excepted, when requested with --timed); results do
not depend on --threads.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from finermoe import analysis, checkpoint, numerics, verify
from finermoe import config as config_mod
from finermoe.config import ConfigError
from finermoe.loss_grad import (
    balance_loss,
    balance_loss_score_grad,
    backward,
    named_parameters,
    gradient_for,
)
from finermoe.moe_layer import MoEModel, forward
from finermoe.numerics import Matrix, Rng, matmul
from finermoe.router import route, route_separate, score
from finermoe.upcycle import drop_upcycle, random_dense, upcycle


def read_matrix(path) -> Matrix:
    """Input format: one ASCII header line 'rows cols', then row-major
    little-endian f32."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) != 2:
            raise ValueError(f"{path}: expected header 'rows cols'")
        rows, cols = int(header[0]), int(header[1])
        raw = fh.read(rows * cols * 4)
    if len(raw) != rows * cols * 4:
        raise ValueError(f"{path}: payload truncated ({len(raw)} of {rows * cols * 4} bytes)")
    return Matrix.wrap(np.frombuffer(raw, dtype="<f4").reshape(rows, cols).astype(np.float32))


def write_matrix(m: Matrix, path) -> None:
    with open(path, "wb") as fh:
        fh.write(f"{m.rows} {m.cols}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(m.a, dtype="<f4").tobytes())


def _load_moe(path) -> MoEModel:
    model = checkpoint.read_model(path)
    if not isinstance(model, MoEModel):
        raise ValueError(f"{path} holds a dense FFN, expected a MoE model")
    return model


def _cmd_preset(args) -> int:
    cfg = config_mod.baseline_preset(args.name, h=args.h, H=args.H)
    text = config_mod.format_config(cfg)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_upcycle(args) -> int:
    if args.dense:
        dense = checkpoint.read_model(args.dense)
        if isinstance(dense, MoEModel):
            raise ValueError(f"{args.dense} holds a MoE model, expected a dense FFN")
    elif args.dense_seed is not None:
        if args.config is None and args.drop_ratio is None:
            raise ValueError("--dense-seed needs --config (or drop-mode flags) for dims")
        if args.config is not None:
            c = config_mod.load_config(args.config)
            dense = random_dense(c.h, c.H, args.dense_seed)
        else:
            dense = random_dense(args.h, args.H, args.dense_seed)
    else:
        raise ValueError("either --dense or --dense-seed is required")

    if args.drop_ratio is not None:
        if args.n_experts is None or args.n_active is None:
            raise ValueError("drop mode needs --n-experts and --n-active")
        model = drop_upcycle(dense, args.n_experts, args.drop_ratio, args.n_active, args.seed)
    else:
        if args.config is None:
            raise ValueError("--config is required (unless --drop-ratio is given)")
        cfg = config_mod.load_config(args.config)
        model = upcycle(dense, cfg, args.seed)
    checkpoint.write_model(model, args.out)
    dims = model.dims
    print(f"wrote {args.out}: {dims.N} experts, {dims.n_active} activated per token")
    return 0


def _cmd_forward(args) -> int:
    model = _load_moe(args.model)
    x = read_matrix(args.input)
    out = forward(x, model)
    write_matrix(out.y, args.out)
    print(f"wrote {args.out}: {out.y.rows} x {out.y.cols}")
    return 0


def _cmd_route_stats(args) -> int:
    model = _load_moe(args.model)
    cfg = model.cfg
    x = Rng(args.seed).matrix(args.tokens, cfg.h)
    s = score(x, model.router)
    if cfg.router_mode == "separate":
        decision = route_separate(s, score(x, model.router_cc), cfg)
    else:
        decision = route(s, cfg)
    rep = analysis.route_stats(decision, cfg)
    bal = balance_loss(decision, cfg, args.alpha)
    print(f"tokens = {rep.n_tokens}")
    print(f"activations = {int(rep.counts.sum())}")
    print(f"max_f = {rep.max_f:.6g}")
    print(f"balance_loss = {bal.loss:.10g}")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("expert,count,f\n")
            for i in range(rep.counts.shape[0]):
                fh.write(f"{i},{rep.counts[i]},{rep.f[i]:.10g}\n")
        print(f"wrote {args.csv}")
    return 0


def _cmd_similarity(args) -> int:
    model = _load_moe(args.model)
    rep = analysis.expert_similarity(model, keep_pairs=bool(args.csv))
    print(f"experts = {len(model.experts)}")
    print(f"pairs = {rep.n_pairs}")
    print(f"mean_cosine = {rep.mean:.10g}")
    if args.csv:
        n = len(model.experts)
        with open(args.csv, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("expert_a,expert_b,cosine\n")
            p = 0
            for i in range(n - 1):
                for j in range(i + 1, n):
                    fh.write(f"{i},{j},{rep.per_pair[p]:.10g}\n")
                    p += 1
        print(f"wrote {args.csv}")
    return 0


def _cmd_bench(args) -> int:
    cfg = config_mod.load_config(args.config)
    rep = analysis.cost_report(cfg, L=args.tokens, timed=args.timed, seed=args.seed)
    print(f"total_params = {rep.total_params}")
    print(f"activated_params = {rep.activated_params}")
    print(f"flops_sparse = {rep.flops_sparse}")
    print(f"flops_shared = {rep.flops_shared}")
    print(f"flops_router = {rep.flops_router}")
    print(f"flops_per_token = {rep.flops_per_token}")
    if args.timed:
        print(f"wall_per_token_s = {rep.wall_per_token:.3e}")
        for name, t in analysis.benchmark_backends(cfg, L=args.tokens, seed=args.seed).items():
            print(f"backend_{name}_forward_s = {t:.3e}")
    return 0


def _cmd_check(args) -> int:
    names = list(verify.SUITES) if args.suite == "all" else [args.suite]
    cfg = config_mod.load_config(args.config) if args.config else None
    results = verify.run_suites(names, args.seed, cfg=cfg)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name}: {r.detail} ... {status}")
        ok &= r.passed
    return 0 if ok else 1


def _cmd_train_demo(args) -> int:
    cfg = config_mod.load_config(args.config)
    rng = Rng(args.seed)
    dense = random_dense(cfg.h, cfg.H, args.seed)
    model = upcycle(dense, cfg, args.seed)
    # Fixed synthetic regression set: fit y = x @ target on one batch.
    target = rng.child(1).matrix(cfg.h, cfg.h, std=0.05)
    x = rng.child(2).matrix(args.batch, cfg.h)
    y_star = matmul(x, target)

    rows = []
    for step in range(args.steps):
        out = forward(x, model)
        err = out.y.a - y_star.a
        task = float(np.mean(err.astype(np.float64) ** 2))
        bal = balance_loss(out.decision, cfg, args.alpha)
        upstream = Matrix.wrap(np.ascontiguousarray((2.0 / err.size) * err, dtype=np.float32))
        grads = backward(
            x, model, upstream, out.decision,
            d_score_extra=balance_loss_score_grad(out.decision, cfg, args.alpha),
        )
        # Clipped SGD keeps the toy run stable at demo learning rates.
        sq = 0.0
        for name, _ in named_parameters(model):
            g = gradient_for(grads, name).a
            sq += float((g.astype(np.float64) ** 2).sum())
        scale = args.lr * min(1.0, args.clip / max(np.sqrt(sq), 1e-12))
        for name, param in named_parameters(model):
            param.a -= scale * gradient_for(grads, name).a
        rows.append((step, task, bal.loss))

    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("step,task_loss,balance_loss\n")
            for step, task, bal_v in rows:
                fh.write(f"{step},{task:.10g},{bal_v:.10g}\n")
        print(f"wrote {args.csv}")
    print(f"first task_loss = {rows[0][1]:.10g}")
    print(f"final task_loss = {rows[-1][1]:.10g}")
    print(f"final balance_loss = {rows[-1][2]:.10g}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="finermoe", description=__doc__)
    p.add_argument(
        "--threads", type=int, default=None,
        help="kernel threads (default: FINERMOE_THREADS or 1); never changes results",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("preset", help="emit a baseline config")
    sp.add_argument("name", help=f"one of: {', '.join(config_mod.preset_names())}")
    sp.add_argument("--h", type=int, default=config_mod.REF_H)
    sp.add_argument("--H", type=int, default=config_mod.REF_INTERMEDIATE)
    sp.add_argument("--out", help="write to file instead of stdout")
    sp.set_defaults(fn=_cmd_preset)

    sp = sub.add_parser("upcycle", help="build a MoE model from a dense FFN")
    sp.add_argument("--config", help="layer config file")
    sp.add_argument("--dense", help="dense FFN checkpoint (FRM1)")
    sp.add_argument("--dense-seed", type=int, default=None,
                    help="synthesize a random dense FFN instead of reading one")
    sp.add_argument("--h", type=int, default=config_mod.REF_H, help="dims for --dense-seed drop mode")
    sp.add_argument("--H", type=int, default=config_mod.REF_INTERMEDIATE)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--drop-ratio", type=float, default=None,
                    help="re-init this fraction of each expert matrix (drop mode)")
    sp.add_argument("--n-experts", type=int, default=None, help="drop mode: replica count")
    sp.add_argument("--n-active", type=int, default=None, help="drop mode: activated experts")
    sp.set_defaults(fn=_cmd_upcycle)

    sp = sub.add_parser("forward", help="run the layer on a matrix file")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True, help="header 'rows cols' + raw f32 LE")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=_cmd_forward)

    sp = sub.add_parser("route-stats", help="routing-load statistics on random tokens")
    sp.add_argument("--model", required=True)
    sp.add_argument("--tokens", type=int, default=4096)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--alpha", type=float, default=0.001)
    sp.add_argument("--csv", help="per-expert counts to CSV (expert,count,f)")
    sp.set_defaults(fn=_cmd_route_stats)

    sp = sub.add_parser("similarity", help="mean pairwise expert cosine similarity")
    sp.add_argument("--model", required=True)
    sp.add_argument("--csv", help="per-pair values to CSV (expert_a,expert_b,cosine)")
    sp.set_defaults(fn=_cmd_similarity)

    sp = sub.add_parser("bench", help="parameter/FLOP report and optional timings")
    sp.add_argument("--config", required=True)
    sp.add_argument("--tokens", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--timed", action="store_true",
                    help="measure wall time (output no longer run-to-run identical)")
    sp.set_defaults(fn=_cmd_bench)

    sp = sub.add_parser("check", help="run verification suites against the oracles")
    sp.add_argument("--suite", default="all", choices=["all", *verify.SUITES])
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--config", help="restrict reconstruction to one config")
    sp.set_defaults(fn=_cmd_check)

    sp = sub.add_parser("train-demo", help="toy training run on a synthetic target")
    sp.add_argument("--config", required=True)
    sp.add_argument("--steps", type=int, default=200)
    sp.add_argument("--batch", type=int, default=16)
    sp.add_argument("--lr", type=float, default=3.0)
    sp.add_argument("--clip", type=float, default=1.0, help="global gradient-norm clip")
    sp.add_argument("--alpha", type=float, default=0.001)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--csv", help="loss curve CSV (step,task_loss,balance_loss)")
    sp.set_defaults(fn=_cmd_train_demo)

    return p


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("FINERMOE_THREADS", "1"))
    try:
        numerics.set_num_threads(threads)
        return args.fn(args)
    except (ConfigError, checkpoint.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run())
