"""Observation-only diagnostics over recursion traces.

Exports latent-token trajectories (2-D PCA per image, basis shared across
all of that image's snapshots) as CSV, and expert-activation statistics
bucketed over diffusion timesteps as JSON. Pure post-processing: nothing
here touches the computation graph or the rng streams.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .recursion import RecursionTrace
from .tensor import ConfigError, Tensor

TRAJECTORY_SCHEMA = "trajectories/1"
ROUTING_SCHEMA = "routing-stats/1"


def pca_fit_project(vectors, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Project centered rows onto the top-k covariance eigenvectors.

    Returns (basis [D, k], projections [N, k]). Eigenvalues are sorted
    descending; each basis column's first nonzero component is positive.
    """
    x = vectors.data if isinstance(vectors, Tensor) else np.asarray(vectors, dtype=np.float64)
    n, d = x.shape
    if not 1 <= k <= min(n, d):
        raise ConfigError(f"k must be in [1, {min(n, d)}], got {k}")
    xc = x - x.mean(axis=0)
    cov = (xc.T @ xc) / max(n - 1, 1)
    values, vecs = np.linalg.eigh(cov)
    order = np.argsort(values)[::-1]
    basis = vecs[:, order[:k]].copy()
    for j in range(basis.shape[1]):
        col = basis[:, j]
        nz = np.nonzero(np.abs(col) > 1e-12)[0]
        if nz.size and col[nz[0]] < 0:
            basis[:, j] = -col
    return basis, xc @ basis


def pca_eigenvalues(vectors) -> np.ndarray:
    """All covariance eigenvalues, descending (diagnostics)."""
    x = vectors.data if isinstance(vectors, Tensor) else np.asarray(vectors, dtype=np.float64)
    xc = x - x.mean(axis=0)
    cov = (xc.T @ xc) / max(x.shape[0] - 1, 1)
    return np.sort(np.linalg.eigvalsh(cov))[::-1]


@dataclass
class TrajectoryRecord:
    diffusion_t: int
    latent_step: int
    token_id: int
    pc1: float
    pc2: float


@dataclass
class RoutingStats:
    bucket: int
    latent_step: int
    expert: int
    count: int
    frequency: float


def _iter_samples(traces: list[RecursionTrace]):
    """Yield (sample_key, trace, batch_index) for every sample in the traces."""
    for trace in traces:
        if not trace.steps:
            continue
        batch = trace.steps[0].tokens.shape[0]
        for b in range(batch):
            key = int(trace.sample_ids[b]) if trace.sample_ids is not None else b
            yield key, trace, b


def compute_trajectories(traces: list[RecursionTrace]) -> list[TrajectoryRecord]:
    """PCA-project every token snapshot; one shared basis per sample."""
    if not traces:
        raise ConfigError("no traces to analyze")
    by_sample: dict[int, list[tuple[RecursionTrace, int]]] = {}
    for key, trace, b in _iter_samples(traces):
        by_sample.setdefault(key, []).append((trace, b))

    records: list[TrajectoryRecord] = []
    for key in sorted(by_sample):
        stacks = []
        for trace, b in by_sample[key]:
            for step in trace.steps:
                stacks.append(step.tokens[b])  # [Nx, D]
        allvecs = np.concatenate(stacks, axis=0)
        k = min(2, allvecs.shape[1], allvecs.shape[0])
        basis, _ = pca_fit_project(allvecs, k)
        center = allvecs.mean(axis=0)
        for trace, b in by_sample[key]:
            for s, step in enumerate(trace.steps, start=1):
                proj = (step.tokens[b] - center) @ basis
                for tok in range(proj.shape[0]):
                    pc1 = float(proj[tok, 0])
                    pc2 = float(proj[tok, 1]) if proj.shape[1] > 1 else 0.0
                    records.append(
                        TrajectoryRecord(trace.diffusion_t, s, tok, pc1, pc2)
                    )
    return records


def export_trajectories(traces: list[RecursionTrace], out_path) -> list[TrajectoryRecord]:
    """Write trajectory records as CSV; returns what was written."""
    records = compute_trajectories(traces)
    path = Path(out_path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema: {TRAJECTORY_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(["diffusion_t", "latent_step", "token_id", "pc1", "pc2"])
        for r in records:
            writer.writerow([r.diffusion_t, r.latent_step, r.token_id, repr(r.pc1), repr(r.pc2)])
    return records


def parse_trajectories(path) -> list[TrajectoryRecord]:
    """Read back a trajectory CSV (round-trip exact)."""
    records = []
    with Path(path).open("r", newline="", encoding="utf-8") as fh:
        rows = [line for line in fh if not line.startswith("#")]
    reader = csv.reader(rows)
    header = next(reader)
    if header != ["diffusion_t", "latent_step", "token_id", "pc1", "pc2"]:
        raise ConfigError(f"unexpected trajectory header: {header}")
    for row in reader:
        records.append(
            TrajectoryRecord(int(row[0]), int(row[1]), int(row[2]), float(row[3]), float(row[4]))
        )
    return records


def compute_routing_stats(
    traces: list[RecursionTrace], buckets: int
) -> list[RoutingStats]:
    """Selection counts and frequencies per (timestep bucket, step, expert)."""
    if not traces:
        raise ConfigError("no traces to analyze")
    if buckets < 1:
        raise ConfigError(f"buckets must be >= 1, got {buckets}")
    experts = max(t.experts for t in traces)
    t_max = max(t.diffusion_t for t in traces)
    counts: dict[tuple[int, int], np.ndarray] = {}
    for trace in traces:
        bucket = min(buckets - 1, trace.diffusion_t * buckets // (t_max + 1))
        for s, step in enumerate(trace.steps, start=1):
            key = (bucket, s)
            if key not in counts:
                counts[key] = np.zeros(experts, dtype=np.int64)
            counts[key] += np.bincount(step.selected, minlength=experts)
    stats = []
    for (bucket, s) in sorted(counts):
        total = counts[(bucket, s)].sum()
        for m in range(experts):
            cnt = int(counts[(bucket, s)][m])
            stats.append(RoutingStats(bucket, s, m, cnt, cnt / total if total else 0.0))
    return stats


def export_routing_stats(
    traces: list[RecursionTrace], buckets: int, out_path
) -> list[RoutingStats]:
    """Write routing statistics as JSON; returns what was written."""
    stats = compute_routing_stats(traces, buckets)
    conditioning = traces[0].gate_conditioning
    payload = {
        "schema": ROUTING_SCHEMA,
        "conditioning": conditioning,
        "buckets": buckets,
        "stats": [
            {
                "bucket": s.bucket,
                "latent_step": s.latent_step,
                "expert": s.expert,
                "count": s.count,
                "frequency": s.frequency,
            }
            for s in stats
        ],
    }
    Path(out_path).write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return stats


__all__ = [
    "TRAJECTORY_SCHEMA",
    "ROUTING_SCHEMA",
    "pca_fit_project",
    "pca_eigenvalues",
    "TrajectoryRecord",
    "RoutingStats",
    "compute_trajectories",
    "export_trajectories",
    "parse_trajectories",
    "compute_routing_stats",
    "export_routing_stats",
]
