"""Conformer-ensemble evaluation: aligned RMSD, COV/MAT/MIS, distance MMD.

RMSD minimizes over rotation and translation (proper rotations only) with the
closed-form cross-covariance construction; the 3x3 singular decomposition is a
cyclic Jacobi iteration so the module stays dependency-free.  Hydrogen atoms
are excluded by default everywhere.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from statistics import median

import numpy as np

from .molgraph import Conformation, MolecularGraph

__all__ = [
    "AlignmentResult",
    "EnsemblePair",
    "ScoreReport",
    "DistanceSamples",
    "MetricError",
    "kabsch_rmsd",
    "score_ensembles",
    "scores_from_rmsd_matrix",
    "rmsd_matrix",
    "score_dataset",
    "mmd",
    "mmd_squared_unbiased",
    "median_bandwidth",
    "distance_samples",
    "MMD_VARIANTS",
    "PAIR_SUBSAMPLE_LIMIT",
]

MMD_VARIANTS = ("single", "pair", "all")
PAIR_SUBSAMPLE_LIMIT = 500
_JACOBI_TOL = 1e-12
_JACOBI_SWEEPS = 50


class MetricError(ValueError):
    """Unusable metric input: mismatched atoms, empty sets, foreign edges."""


@dataclass(frozen=True)
class AlignmentResult:
    """Optimal proper rotation + translation and the minimized RMSD."""

    rotation: np.ndarray
    translation: np.ndarray
    rmsd: float


@dataclass(frozen=True)
class EnsemblePair:
    """Generated vs reference conformer sets of one molecular graph."""

    generated: tuple
    reference: tuple
    delta: float
    heavy_only: bool = True

    def __post_init__(self):
        object.__setattr__(self, "generated", tuple(self.generated))
        object.__setattr__(self, "reference", tuple(self.reference))
        if not self.generated or not self.reference:
            raise MetricError("both conformer sets must be non-empty")
        counts = {c.atom_count for c in self.generated + self.reference}
        if len(counts) != 1:
            raise MetricError(f"mixed atom counts in ensemble: {sorted(counts)}")
        masks = {c.heavy_mask.tobytes() for c in self.generated + self.reference}
        if len(masks) != 1:
            raise MetricError("conformations disagree on the heavy-atom mask")


@dataclass(frozen=True)
class ScoreReport:
    """Per-molecule COV/MAT/MIS plus dataset-level mean and median."""

    per_molecule: dict
    mean: dict
    median: dict

    def to_json(self) -> dict:
        return {"per_molecule": self.per_molecule, "mean": self.mean,
                "median": self.median}


def _jacobi_eigh3(sym: np.ndarray):
    """Eigendecomposition of a symmetric 3x3 by cyclic Jacobi rotations."""
    a = sym.copy()
    v = np.eye(3)
    scale = max(np.abs(a).max(), 1.0)
    for _ in range(_JACOBI_SWEEPS):
        off = max(abs(a[0, 1]), abs(a[0, 2]), abs(a[1, 2]))
        if off < _JACOBI_TOL * scale:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[p, q]
            if abs(apq) < _JACOBI_TOL * scale * 1e-4:
                continue
            tau = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau))
            c = 1.0 / math.sqrt(1.0 + t * t)
            s = t * c
            rot = np.eye(3)
            rot[p, p] = rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            a = rot.T @ a @ rot
            v = v @ rot
    order = np.argsort(np.diag(a))[::-1]
    return np.diag(a)[order], v[:, order]


def _svd3(mat: np.ndarray):
    """SVD of a 3x3 via the symmetric products; handles rank deficiency."""
    eigvals, v = _jacobi_eigh3(mat.T @ mat)
    sigma = np.sqrt(np.clip(eigvals, 0.0, None))
    u = np.zeros((3, 3))
    tol = max(sigma[0], 1.0) * 1e-9
    good = []
    for k in range(3):
        if sigma[k] > tol:
            u[:, k] = mat @ v[:, k] / sigma[k]
            good.append(k)
    for k in range(3):
        if sigma[k] <= tol:
            # complete an orthonormal basis for the null directions
            cand = np.zeros(3)
            for probe in np.eye(3):
                cand = probe - sum(u[:, g] * (u[:, g] @ probe) for g in good)
                if np.linalg.norm(cand) > 1e-6:
                    break
            u[:, k] = cand / np.linalg.norm(cand)
            good.append(k)
    return u, sigma, v


def _det3(m: np.ndarray) -> float:
    return (m[0, 0] * (m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1])
            - m[0, 1] * (m[1, 0] * m[2, 2] - m[1, 2] * m[2, 0])
            + m[0, 2] * (m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0]))


def kabsch_rmsd(conf: Conformation, reference: Conformation,
                heavy_only: bool = True) -> AlignmentResult:
    """Minimized RMSD between two conformations over rotation + translation.

    The rotation is sign-corrected to exclude reflections and maps the
    reference onto ``conf``.  With heavy_only, hydrogens are dropped from
    both the fit and the reported deviation.
    """
    if conf.atom_count != reference.atom_count:
        raise MetricError(
            f"atom count mismatch: {conf.atom_count} vs {reference.atom_count}")
    mask = conf.heavy_mask if heavy_only else np.ones(conf.atom_count, dtype=bool)
    if mask.sum() < 1:
        raise MetricError("no atoms left after masking")
    p = reference.coords[mask]
    q = conf.coords[mask]
    p_center = p.mean(axis=0)
    q_center = q.mean(axis=0)
    p0 = p - p_center
    q0 = q - q_center
    cov = p0.T @ q0
    u, _, v = _svd3(cov)
    d = 1.0 if _det3(v @ u.T) >= 0 else -1.0
    rotation = v @ np.diag([1.0, 1.0, d]) @ u.T
    translation = q_center - rotation @ p_center
    moved = p0 @ rotation.T
    rmsd = float(np.sqrt(np.mean(np.sum((q0 - moved) ** 2, axis=1))))
    return AlignmentResult(rotation=rotation, translation=translation, rmsd=rmsd)


def rmsd_matrix(generated, reference, heavy_only=True) -> np.ndarray:
    out = np.empty((len(generated), len(reference)))
    for a, gen in enumerate(generated):
        for b, ref in enumerate(reference):
            out[a, b] = kabsch_rmsd(gen, ref, heavy_only=heavy_only).rmsd
    return out


def scores_from_rmsd_matrix(matrix: np.ndarray, delta: float):
    """COV/MAT/MIS from a (generated x reference) RMSD matrix.

    Strict inequalities: a reference is covered when some RMSD < delta, a
    generated sample mismatches when every RMSD > delta.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.size == 0:
        raise MetricError(f"rmsd matrix must be 2-d non-empty, got {matrix.shape}")
    cov = float(np.mean(np.any(matrix < delta, axis=0)))
    mat = float(np.mean(np.min(matrix, axis=0)))
    mis = float(np.mean(np.all(matrix > delta, axis=1)))
    return cov, mat, mis


def score_ensembles(pair: EnsemblePair):
    """(cov, mat, mis) of a generated-vs-reference conformer ensemble."""
    matrix = rmsd_matrix(pair.generated, pair.reference, heavy_only=pair.heavy_only)
    return scores_from_rmsd_matrix(matrix, pair.delta)


def score_dataset(per_molecule: dict) -> ScoreReport:
    """Aggregate per-molecule (cov, mat, mis) into means and medians."""
    if not per_molecule:
        raise MetricError("no per-molecule scores to aggregate")
    table = {mid: {"cov": float(c), "mat": float(m), "mis": float(s)}
             for mid, (c, m, s) in per_molecule.items()}
    keys = ("cov", "mat", "mis")
    mean = {k: float(np.mean([row[k] for row in table.values()])) for k in keys}
    med = {k: float(median(row[k] for row in table.values())) for k in keys}
    return ScoreReport(per_molecule=table, mean=mean, median=med)


# ---------------------------------------------------------------------------
# distance-distribution MMD


@dataclass(frozen=True)
class DistanceSamples:
    """Per extended edge, the interatomic distance in every conformer."""

    edges: tuple  # of (i, j), hydrogen-adjacent edges excluded by default
    distances: np.ndarray  # (num_conformers, num_edges)

    def __post_init__(self):
        d = np.asarray(self.distances, dtype=np.float64)
        if d.ndim != 2 or d.shape[1] != len(self.edges):
            raise MetricError(f"distance matrix shaped {d.shape} for "
                              f"{len(self.edges)} edges")
        if d.size and d.min() <= 0:
            raise MetricError("non-positive interatomic distance")
        d.setflags(write=False)
        object.__setattr__(self, "distances", d)
        object.__setattr__(self, "edges", tuple(self.edges))


def distance_samples(graph: MolecularGraph, conformers,
                     include_hydrogen: bool = False) -> DistanceSamples:
    """Distances across conformers for every (extended) edge of the graph."""
    heavy = graph.heavy_mask()
    edges = [(i, j) for i, j, _ in graph.edges
             if include_hydrogen or (heavy[i] and heavy[j])]
    rows = []
    for conf in conformers:
        coords = conf.coords
        rows.append([float(np.linalg.norm(coords[i] - coords[j]))
                     for i, j in edges])
    return DistanceSamples(edges=tuple(edges),
                           distances=np.array(rows, dtype=np.float64).reshape(
                               len(conformers), len(edges)))


def median_bandwidth(pooled: np.ndarray) -> float:
    """Median pairwise distance over the pooled sample, zeros excluded.

    Falls back to 1.0 when every pair coincides.
    """
    diffs = pooled[:, None, :] - pooled[None, :, :]
    dist = np.sqrt(np.sum(diffs * diffs, axis=2))
    iu = np.triu_indices(len(pooled), k=1)
    values = dist[iu]
    values = values[values > 0]
    if values.size == 0:
        return 1.0
    return float(np.median(values))


def mmd_squared_unbiased(x: np.ndarray, y: np.ndarray,
                         bandwidth: float | None = None) -> float:
    """Unbiased U-statistic MMD^2 with a Gaussian kernel.

    Bandwidth defaults to the median pairwise distance over the pooled
    sample.  The raw estimate may be negative; callers clamp.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise MetricError("need at least 2 samples on each side")
    if bandwidth is None:
        bandwidth = median_bandwidth(np.concatenate([x, y], axis=0))
    gamma = 1.0 / (2.0 * bandwidth * bandwidth)

    def kernel(a, b):
        sq = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
        return np.exp(-gamma * sq)

    kxx = kernel(x, x)
    kyy = kernel(y, y)
    kxy = kernel(x, y)
    term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    term_xy = 2.0 * kxy.sum() / (m * n)
    return float(term_x + term_y - term_xy)


def mmd(samples_g: DistanceSamples, samples_r: DistanceSamples,
        variant: str, pair_seed: int = 0) -> float:
    """Distance-distribution discrepancy, clamped at zero.

    single: mean 1-d MMD^2 over edges; pair: mean 2-d MMD^2 over edge pairs
    (seeded subsample above PAIR_SUBSAMPLE_LIMIT); all: one MMD^2 over the
    full distance vectors.
    """
    if variant not in MMD_VARIANTS:
        raise MetricError(f"unknown MMD variant {variant!r}")
    if samples_g.edges != samples_r.edges:
        raise MetricError("generated and reference edge sets differ")
    dg, dr = samples_g.distances, samples_r.distances
    n_edges = dg.shape[1]
    if n_edges == 0:
        return 0.0
    if variant == "all":
        return max(mmd_squared_unbiased(dg, dr), 0.0)
    if variant == "single":
        vals = [mmd_squared_unbiased(dg[:, [e]], dr[:, [e]])
                for e in range(n_edges)]
        return max(float(np.mean(vals)), 0.0)
    pairs = list(itertools.combinations(range(n_edges), 2))
    if not pairs:
        return max(mmd_squared_unbiased(dg, dr), 0.0)
    if len(pairs) > PAIR_SUBSAMPLE_LIMIT:
        rng = np.random.default_rng(pair_seed)
        chosen = rng.choice(len(pairs), size=PAIR_SUBSAMPLE_LIMIT, replace=False)
        pairs = [pairs[int(k)] for k in sorted(chosen)]
    vals = [mmd_squared_unbiased(dg[:, list(p)], dr[:, list(p)]) for p in pairs]
    return max(float(np.mean(vals)), 0.0)
