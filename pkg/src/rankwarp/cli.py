"""Command-line surface: warp, topk, gradcheck, spe, fuse, bench.

Every command is deterministic for fixed arguments and inputs: rerunning
produces byte-identical output files.  The benchmark's wall-time and
traced-peak columns are the unavoidable exceptions; every content column is
reproduced exactly.  File I/O uses the FTN1 tensor format throughout.

Exit codes: 0 success, 2 argument error, 3 I/O error, 4 shape or validation
error (including malformed tensor files), 5 check failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass

import numpy as np

from .correspondence import SparseCorrespondence, block_attention, partition_blocks, rank_blocks, warp
from .fusion import ConfidenceMap, MultiChannelMap, confidence_map, fuse, fuse_multichannel
from .metrics import render_csv, run_bench
from .posenc import append_position, semantic_pe
from .tensors import (
    FeatureGrid,
    LabelMask,
    TensorFormatError,
    ValidationError,
    l2_normalize_features,
    read_tensor,
    write_tensor,
)
from .topk import (
    TopKProblem,
    finite_difference_gradient,
    sinkhorn_solve,
    soft_topk,
    soft_topk_backward,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_VALIDATION = 4
EXIT_CHECK = 5

# worker count behind --parallel; any count gives bit-identical outputs
_PARALLEL_WORKERS = 4


@dataclass(frozen=True)
class RunConfig:
    """Pipeline defaults; every knob has a matching CLI flag."""

    block_side: int = 2
    k: int = 3
    lam: float = 50.0
    max_iters: int = 100
    tolerance: float = 1e-6
    tau: float = 0.07
    spe_weight: float = 1.0
    seed: int = 0


_DEFAULTS = RunConfig()


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _read_grid(path: str) -> FeatureGrid:
    grid = read_tensor(path)
    if not isinstance(grid, FeatureGrid):
        raise ValidationError(f"{path}: expected a feature grid, found a label mask")
    return grid


def _read_mask(path: str) -> LabelMask:
    mask = read_tensor(path)
    if not isinstance(mask, LabelMask):
        raise ValidationError(f"{path}: expected a label mask, found a feature grid")
    return mask


def _write_correspondence_csv(path: str, corr: SparseCorrespondence) -> None:
    with open(path, "w") as fh:
        fh.write("query_index,exemplar_index,weight\n")
        for q in range(corr.sites):
            row = corr.weights[q]
            for e, wgt in zip(corr.row_indices(q), row):
                fh.write(f"{q},{int(e)},{float(wgt):.9g}\n")


def cmd_warp(args) -> int:
    cond = _read_grid(args.conditional)
    exem = _read_grid(args.exemplar)
    if (cond.height, cond.width) != (exem.height, exem.width):
        raise ValidationError(
            f"grids differ: {cond.height}x{cond.width} vs {exem.height}x{exem.width}"
        )
    if cond.channels != exem.channels:
        raise ValidationError(f"channel counts differ: {cond.channels} vs {exem.channels}")
    mask = None
    if args.mask is not None:
        mask = _read_mask(args.mask)
        if (mask.height, mask.width) != (cond.height, cond.width):
            raise ValidationError("mask dimensions do not match the grids")

    # raw inputs (pixels or features) are normalized per site, then optionally
    # augmented with the mask's position channels on both sides
    query = l2_normalize_features(cond)
    target = l2_normalize_features(exem)
    if mask is not None:
        channels = semantic_pe(mask)
        query = append_position(query, channels, args.spe_weight)
        target = append_position(target, channels, args.spe_weight)

    part, q_blocks = partition_blocks(query, args.block_side)
    _, e_blocks = partition_blocks(target, args.block_side)
    workers = _PARALLEL_WORKERS if args.parallel else 0
    ranking = rank_blocks(
        q_blocks, e_blocks, args.k, lam=args.lam, iters=args.max_iters,
        tol=args.tolerance, workers=workers,
    )
    corr = block_attention(part, query, target, ranking, args.tau)
    warped = warp(corr, exem)  # warp carries the original exemplar features
    cmap = confidence_map(ranking)

    os.makedirs(args.out_dir, exist_ok=True)
    write_tensor(warped, os.path.join(args.out_dir, "warped.ftn"))
    write_tensor(
        FeatureGrid(cmap.data[:, :, None]), os.path.join(args.out_dir, "cmap.ftn")
    )
    _write_correspondence_csv(os.path.join(args.out_dir, "correspondence.csv"), corr)
    return EXIT_OK


def cmd_topk(args) -> int:
    try:
        scores = np.array([float(v) for v in args.scores.split(",")])
    except ValueError:
        print(f"error: could not parse scores {args.scores!r}", file=sys.stderr)
        return EXIT_USAGE
    problem = TopKProblem(
        scores, k=args.k, lam=args.lam, max_iters=args.max_iters, tolerance=args.tolerance
    )
    selection = soft_topk(problem)
    print("gamma: " + ",".join(f"{g:.6f}" for g in selection.gamma))
    print("selected: " + ",".join(str(i) for i in np.flatnonzero(selection.hard)))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.k > args.n:
        print(f"error: k={args.k} exceeds N={args.n}", file=sys.stderr)
        return EXIT_USAGE
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(args.trials):
        # stay clear of the clamp boundary: the operator is genuinely
        # non-differentiable where scores pin at +-1
        scores = rng.uniform(-0.95, 0.95, args.n)
        problem = TopKProblem(
            scores, k=args.k, lam=args.lam, max_iters=args.max_iters, tolerance=args.tolerance
        )
        _, tape = sinkhorn_solve(problem)
        upstream = rng.standard_normal(args.n)
        grad = soft_topk_backward(tape, upstream)
        reference = finite_difference_gradient(problem, upstream, step=args.step)
        meaningful = np.abs(reference) > 1e-6
        if meaningful.any():
            rel = np.abs(grad - reference)[meaningful] / np.abs(reference)[meaningful]
            worst = max(worst, float(rel.max()))
    passed = worst < 1e-3
    print(f"max relative error: {worst:.3e} over {args.trials} trials")
    print("PASS" if passed else "FAIL")
    return EXIT_OK if passed else EXIT_CHECK


def cmd_spe(args) -> int:
    channels = semantic_pe(_read_mask(args.mask))
    write_tensor(FeatureGrid(channels.data), args.out)
    return EXIT_OK


def cmd_fuse(args) -> int:
    cond = _read_grid(args.conditional)
    warped = _read_grid(args.warped)
    cgrid = _read_grid(args.cmap)
    if cgrid.channels == 1:
        fused = fuse(cond, warped, ConfidenceMap(cgrid.data[:, :, 0]))
    elif cgrid.channels == cond.channels:
        fused = fuse_multichannel(
            cond, warped, MultiChannelMap(np.moveaxis(cgrid.data, 2, 0))
        )
    else:
        raise ValidationError(
            f"confidence map has {cgrid.channels} channels; expected 1 or {cond.channels}"
        )
    write_tensor(fused, args.out)
    return EXIT_OK


def _parse_sizes(text: str) -> list[tuple[int, int, int]]:
    sizes = []
    for item in text.split(","):
        parts = item.lower().split("x")
        if len(parts) != 3:
            raise argparse.ArgumentTypeError(f"bad size {item!r}, expected HxWxD")
        sizes.append(tuple(int(p) for p in parts))
    return sizes


def cmd_bench(args) -> int:
    records = run_bench(
        args.sizes, block_area=args.block_side * args.block_side, k=args.k,
        tau=args.tau, lam=args.lam, repetitions=args.repetitions, seed=args.seed,
        workers=_PARALLEL_WORKERS if args.parallel else 0,
    )
    text = render_csv(records)
    if args.out is None:
        sys.stdout.write(text)
    else:
        with open(args.out, "w") as fh:
            fh.write(text)
    return EXIT_OK


def _add_solver_flags(sub, iters_default: int) -> None:
    sub.add_argument("--k", type=_positive_int, default=_DEFAULTS.k)
    sub.add_argument("--lambda", dest="lam", type=_positive_float, default=_DEFAULTS.lam)
    sub.add_argument("--max-iters", type=_positive_int, default=iters_default)
    sub.add_argument("--tolerance", type=_positive_float, default=_DEFAULTS.tolerance)


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rankwarp",
        description="Block-ranked sparse correspondence: warping, soft top-k, "
        "position encoding, confidence fusion, benchmarks.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    warp_p = subs.add_parser("warp", help="warp an exemplar grid onto a conditional grid")
    warp_p.add_argument("conditional")
    warp_p.add_argument("exemplar")
    warp_p.add_argument("--mask", default=None)
    warp_p.add_argument("--out-dir", default=".")
    warp_p.add_argument("--block-side", type=_positive_int, default=_DEFAULTS.block_side)
    warp_p.add_argument("--tau", type=_positive_float, default=_DEFAULTS.tau)
    warp_p.add_argument("--spe-weight", type=float, default=_DEFAULTS.spe_weight)
    warp_p.add_argument("--parallel", action="store_true")
    _add_solver_flags(warp_p, _DEFAULTS.max_iters)
    warp_p.set_defaults(func=cmd_warp)

    topk_p = subs.add_parser("topk", help="soft top-k selection over a score list")
    topk_p.add_argument("--scores", required=True, help="comma-separated scores in [-1,1]")
    _add_solver_flags(topk_p, _DEFAULTS.max_iters)
    topk_p.set_defaults(func=cmd_topk)

    grad_p = subs.add_parser("gradcheck", help="verify solver gradients against finite differences")
    grad_p.add_argument("--n", type=_positive_int, default=8)
    grad_p.add_argument("--trials", type=_positive_int, default=50)
    grad_p.add_argument("--seed", type=int, default=_DEFAULTS.seed)
    grad_p.add_argument("--step", type=_positive_float, default=1e-4)
    _add_solver_flags(grad_p, 5000)
    grad_p.set_defaults(func=cmd_gradcheck, lam=20.0)

    spe_p = subs.add_parser("spe", help="semantic position channels from a label mask")
    spe_p.add_argument("mask")
    spe_p.add_argument("out")
    spe_p.set_defaults(func=cmd_spe)

    fuse_p = subs.add_parser("fuse", help="confidence-weighted fusion of two grids")
    fuse_p.add_argument("conditional")
    fuse_p.add_argument("warped")
    fuse_p.add_argument("cmap")
    fuse_p.add_argument("out")
    fuse_p.set_defaults(func=cmd_fuse)

    bench_p = subs.add_parser("bench", help="memory and timing benchmark, CSV output")
    bench_p.add_argument(
        "--sizes", type=_parse_sizes, default=[(32, 32, 8), (64, 64, 8), (128, 128, 8)]
    )
    bench_p.add_argument("--block-side", type=_positive_int, default=_DEFAULTS.block_side)
    bench_p.add_argument("--tau", type=_positive_float, default=_DEFAULTS.tau)
    bench_p.add_argument("--repetitions", type=_positive_int, default=1)
    bench_p.add_argument("--seed", type=int, default=_DEFAULTS.seed)
    bench_p.add_argument("--out", default=None)
    bench_p.add_argument("--parallel", action="store_true")
    _add_solver_flags(bench_p, _DEFAULTS.max_iters)
    bench_p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TensorFormatError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
