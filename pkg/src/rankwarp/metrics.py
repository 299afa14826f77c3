"""Training-free alignment metrics and the memory-complexity benchmark.

The cycle loss asks whether the exemplar is recoverable from its own warp:
with T the row-stochastic correspondence, it measures ``|T' (T Z) - Z|`` per
element, where T' is the transposed correspondence with rows renormalized so
the reverse map is also an average.  The consistency loss is a plain mean
absolute difference between two feature grids.

The benchmark builds the ranked sparse correspondence and the dense baseline
over seeded random grids of increasing size and records stored entries,
ranking scores, peak allocation during construction (traced allocator, not
process RSS), wall time, and the warp gap between the two methods.  Stored
entries must equal L*k*b (ranked) and L^2 (dense) exactly; peak allocation is
what demonstrates the linear-versus-quadratic memory behavior.
"""

from __future__ import annotations

import math
import time
import tracemalloc
from dataclasses import dataclass

import numpy as np

from .correspondence import (
    SparseCorrespondence,
    block_attention,
    dense_correspondence_baseline,
    partition_blocks,
    rank_blocks,
    warp,
)
from .tensors import FeatureGrid, ValidationError

CSV_HEADER = "method,L,b,k,entries,ranking_scores,peak_bytes,ms,warp_l1"


@dataclass(frozen=True)
class BenchRecord:
    method: str  # "dense" or "ras"
    sites: int  # L
    block_area: int  # b
    k: int
    entries: int
    ranking_scores: int
    peak_bytes: int
    ms: float
    warp_l1: float

    def csv_row(self) -> str:
        return (
            f"{self.method},{self.sites},{self.block_area},{self.k},"
            f"{self.entries},{self.ranking_scores},{self.peak_bytes},"
            f"{self.ms:.3f},{self.warp_l1:.8e}"
        )


def consistency_loss(features_a: FeatureGrid, features_b: FeatureGrid) -> float:
    """Mean absolute element difference between two same-shape grids."""
    if features_a.data.shape != features_b.data.shape:
        raise ValidationError(
            f"shapes differ: {features_a.data.shape} vs {features_b.data.shape}"
        )
    a = features_a.data.astype(np.float64)
    b = features_b.data.astype(np.float64)
    return float(np.abs(a - b).mean())


def cycle_loss(correspondence: SparseCorrespondence, exemplar: FeatureGrid) -> float:
    """Mean absolute error of the round trip exemplar -> warp -> reverse warp.

    The reverse map transposes the stored links and renormalizes each
    exemplar feature's row to sum 1; exemplar features never referenced by
    any query reconstruct to the zero vector.
    """
    warped = warp(correspondence, exemplar).vectors.astype(np.float64)
    z = exemplar.vectors.astype(np.float64)
    l_e, d = z.shape
    w = correspondence.weights.astype(np.float64)
    if correspondence.indices is None:
        mass = w.sum(axis=0)
        num = w.T @ warped
    else:
        idx = correspondence.indices.reshape(-1)
        flat = w.reshape(-1)
        mass = np.zeros(l_e)
        np.add.at(mass, idx, flat)
        num = np.zeros((l_e, d))
        np.add.at(num, idx, flat[:, None] * np.repeat(warped, w.shape[1], axis=0))
    recon = np.divide(num, mass[:, None], out=np.zeros_like(num), where=mass[:, None] > 0)
    return float(np.abs(recon - z).mean())


def _traced(builder, repetitions: int) -> tuple[object, int, float]:
    """Run ``builder`` under the tracing allocator; returns (result, peak, median ms)."""
    times = []
    peak = 0
    result = None
    tracemalloc.start()
    try:
        for rep in range(repetitions):
            result = None  # drop the previous build before re-measuring
            tracemalloc.reset_peak()
            t0 = time.perf_counter()
            result = builder()
            times.append((time.perf_counter() - t0) * 1000.0)
            if rep == 0:
                _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return result, peak, float(np.median(times))


def run_bench(
    sizes: list[tuple[int, int, int]],
    block_area: int = 4,
    k: int = 3,
    tau: float = 0.07,
    lam: float = 50.0,
    repetitions: int = 1,
    seed: int = 0,
    workers: int = 0,
) -> list[BenchRecord]:
    """Benchmark dense and ranked correspondence construction per grid size.

    Feature grids are seeded uniform random in [-1, 1], so every run sees the
    same inputs.  A dense-baseline allocation failure is recorded as a zeroed
    row rather than aborting the sweep.  ``workers`` > 1 ranks query blocks
    in parallel; entry counts are identical in both modes.
    """
    side = math.isqrt(block_area)
    if side * side != block_area:
        raise ValidationError(f"block area {block_area} is not a square")
    records = []
    for height, width, depth in sizes:
        rng = np.random.default_rng([seed, height, width, depth])
        cond = FeatureGrid(rng.uniform(-1.0, 1.0, (height, width, depth)).astype(np.float32))
        exem = FeatureGrid(rng.uniform(-1.0, 1.0, (height, width, depth)).astype(np.float32))
        sites = height * width

        try:
            dense, dense_peak, dense_ms = _traced(
                lambda: dense_correspondence_baseline(cond, exem, tau), repetitions
            )
        except MemoryError:
            dense = None
            records.append(BenchRecord("dense", sites, block_area, k, 0, 0, 0, 0.0, math.nan))

        def build_ras():
            part, q_blocks = partition_blocks(cond, side)
            _, e_blocks = partition_blocks(exem, side)
            ranking = rank_blocks(q_blocks, e_blocks, k, lam=lam, workers=workers)
            return ranking, block_attention(part, cond, exem, ranking, tau)

        (ranking, ras), ras_peak, ras_ms = _traced(build_ras, repetitions)

        if dense is not None:
            gap = float(np.abs(
                warp(dense, exem).data.astype(np.float64)
                - warp(ras, exem).data.astype(np.float64)
            ).mean())
            records.append(BenchRecord(
                "dense", sites, block_area, k, dense.entry_count, 0,
                dense_peak, dense_ms, 0.0,
            ))
        else:
            gap = math.nan
        records.append(BenchRecord(
            "ras", sites, block_area, k, ras.entry_count, ranking.scored_pairs,
            ras_peak, ras_ms, gap,
        ))
    return records


def render_csv(records: list[BenchRecord]) -> str:
    """CSV text for a record list, header line included."""
    return "\n".join([CSV_HEADER] + [r.csv_row() for r in records]) + "\n"
