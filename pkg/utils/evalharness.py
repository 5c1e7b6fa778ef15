"""
Sample-quality metrics on the 2D benchmark and the sampler comparison grid.
"""
from __future__ import annotations
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from utils.diffusion import NoiseSchedule, ScoreNetwork
from utils.errors import ConfigError, DomainError, FingerprintMismatchError, StructuralError
from utils.ggdm import GGDMParams
from utils.samplers import SampleBatch, sample_ddim, sample_ddpm_stride, sample_ggdm, stride_timesteps
from utils import tensorgrad as tg
from utils.trace_log import write_rows

logger = logging.getLogger(__name__)

REPORT_HEADER = ('sampler', 'K', 'seed', 'rbf_mmd', 'kid_val', 'wasserstein2', 'mode_coverage')
MAX_ASSIGNMENT = 2048


def worker_count() -> int:
    raw = os.environ.get('DDSS_THREADS')
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ConfigError(f"DDSS_THREADS must be an integer, got '{raw}'", field='DDSS_THREADS') from None
    return os.cpu_count() or 1


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    pooled = np.concatenate([a, b])
    dist = np.sqrt(cdist(pooled, pooled, 'sqeuclidean'))
    return float(np.median(dist[np.triu_indices(len(pooled), k=1)]))


def rbf_mmd(samples_a, samples_b, bandwidth: Optional[float] = None) -> float:
    """Unbiased MMD^2 with k(x, y) = exp(-|x - y|^2 / (2 h^2)).

    Equal-size sets use the paired U-statistic, which is exactly 0 when the
    two sets coincide; otherwise the cross term is the mean over all pairs.
    """
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise StructuralError("rbf_mmd needs at least two samples on each side")
    h = median_bandwidth(a, b) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise DomainError(f"rbf_mmd bandwidth must be positive, got {h!r}")

    def k(x, y):
        return np.exp(-cdist(x, y, 'sqeuclidean') / (2.0 * h * h))

    n, m = len(a), len(b)
    kaa, kbb = k(a, a), k(b, b)
    within_a = (kaa.sum() - np.trace(kaa)) / (n * (n - 1))
    within_b = (kbb.sum() - np.trace(kbb)) / (m * (m - 1))
    kab = k(a, b)
    if n == m:
        cross = (kab.sum() - np.trace(kab)) / (n * (n - 1))
    else:
        cross = kab.mean()
    return float(within_a + within_b - 2.0 * cross)


def wasserstein2_2d(samples_a, samples_b) -> float:
    """Exact W2 between equal-size point clouds by optimal assignment."""
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.shape != b.shape:
        raise StructuralError(f"wasserstein2_2d needs equal-size sets of equal dimension, got {a.shape} and {b.shape}")
    if len(a) > MAX_ASSIGNMENT:
        raise StructuralError(f"wasserstein2_2d is limited to {MAX_ASSIGNMENT} points, got {len(a)}")
    if len(a) == 0:
        return 0.0
    cost = cdist(a, b, 'sqeuclidean')
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def mode_coverage(samples, mixture_centers, radius: float) -> float:
    centers = np.asarray(mixture_centers, dtype=np.float64)
    if centers.size == 0:
        raise StructuralError("mode_coverage needs at least one mixture center")
    pts = np.asarray(samples, dtype=np.float64).reshape(-1, centers.shape[1])
    if len(pts) == 0:
        return 0.0
    hit = (cdist(centers, pts) <= radius).any(axis=1)
    return float(hit.mean())


@dataclass
class SamplerEntry:
    """One sampler column of the grid: a baseline, or searched params keyed by K."""
    name: str
    kind: str
    eta: float = 0.0
    stride: str = 'linear'
    params: Dict[int, GGDMParams] = field(default_factory=dict)

    @classmethod
    def parse(cls, text: str, stride: str = 'linear') -> 'SamplerEntry':
        """`ddpm`, `ddim`, `ddim:ETA`, or `ddss:PATH[,PATH...]`."""
        kind, _, arg = text.partition(':')
        if kind == 'ddpm':
            return cls(name='ddpm', kind='ddpm', stride=stride)
        if kind == 'ddim':
            eta = float(arg) if arg else 0.0
            return cls(name=f'ddim_eta{eta:g}', kind='ddim', eta=eta, stride=stride)
        if kind == 'ddss' and arg:
            from checkpoints import load_sampler

            params = {p.K: p for p in (load_sampler(path) for path in arg.split(','))}
            tags = sorted({p.tag for p in params.values()})
            return cls(name='ddss_' + '_'.join(tags), kind='ddss', params=params)
        raise ConfigError(f"unknown sampler '{text}' (expected ddpm, ddim[:eta] or ddss:PATH)",
                          field='eval.samplers')

    def Ks(self, requested: Sequence[int]) -> List[int]:
        if self.kind != 'ddss':
            return list(requested)
        kept = [k for k in requested if k in self.params]
        if not kept:
            raise ConfigError(f"sampler {self.name} has checkpoints for K={sorted(self.params)}, none of {list(requested)}",
                              field='eval.Ks')
        return kept

    def batch(self, model: ScoreNetwork, schedule: NoiseSchedule, K: int, n: int, seed: int, *,
              trajectory: bool = False) -> SampleBatch:
        if self.kind == 'ddss':
            return sample_ggdm(model, self.params[K], schedule, n, seed, trajectory=trajectory)
        times = stride_timesteps(schedule.T, K, self.stride)
        if self.kind == 'ddpm':
            return sample_ddpm_stride(model, schedule, times, n, seed, trajectory=trajectory)
        return sample_ddim(model, schedule, times, n, seed, eta=self.eta, trajectory=trajectory)

    def sample(self, model: ScoreNetwork, schedule: NoiseSchedule, K: int, n: int, seed: int) -> np.ndarray:
        return self.batch(model, schedule, K, n, seed).samples


@dataclass
class MetricRow:
    sampler: str
    K: int
    seed: int
    rbf_mmd: float
    kid_val: float
    wasserstein2: float
    mode_coverage: float

    @property
    def key(self):
        return (self.sampler, self.K, self.seed)

    def values(self) -> List[Any]:
        return [self.sampler, self.K, self.seed, self.rbf_mmd, self.kid_val, self.wasserstein2, self.mode_coverage]


@dataclass
class MetricReport:
    rows: List[MetricRow] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def sorted_rows(self) -> List[MetricRow]:
        return sorted(self.rows, key=lambda r: r.key)

    def to_csv(self, path: str) -> None:
        write_rows(path, REPORT_HEADER, (r.values() for r in self.sorted_rows()))

    def row(self, sampler: str, K: int, seed: int) -> MetricRow:
        for r in self.rows:
            if r.key == (sampler, K, seed):
                return r
        raise KeyError((sampler, K, seed))


def check_fingerprints(samplers: Sequence[SamplerEntry], schedule: NoiseSchedule) -> None:
    expected = schedule.fingerprint()
    for entry in samplers:
        for params in entry.params.values():
            if params.schedule_fingerprint != expected:
                raise FingerprintMismatchError(expected, params.schedule_fingerprint, f"{entry.name} (K={params.K})")


def build_report(model: ScoreNetwork, schedule: NoiseSchedule, samplers: Sequence[SamplerEntry], Ks: Sequence[int],
                 seeds: Sequence[int], n_eval: int, *, real: np.ndarray, centers: np.ndarray, fmap,
                 coverage_radius: float = 1.0, metadata: Optional[Dict[str, Any]] = None,
                 workers: Optional[int] = None) -> MetricReport:
    """Evaluate every (sampler, K, seed) cell against held-out `real` points.

    Cells with the same seed share initial and per-step noise across samplers.
    """
    from utils.ddss import KernelSpec, apply_features, kid_unbiased

    check_fingerprints(samplers, schedule)
    real = np.asarray(real, dtype=np.float64)[:n_eval]
    kernel = KernelSpec('linear')
    with tg.no_grad():
        real_features = apply_features(fmap, real)
    cells = [(entry, K, seed) for entry in samplers for K in entry.Ks(Ks) for seed in seeds]
    keys = [(entry.name, K, seed) for entry, K, seed in cells]
    if len(set(keys)) != len(keys):
        raise ConfigError("sampler names must be unique within one report", field='eval.samplers')

    def evaluate(cell) -> MetricRow:
        entry, K, seed = cell
        gen = entry.sample(model, schedule, K, len(real), seed)
        with tg.no_grad():
            kid = kid_unbiased(apply_features(fmap, gen), real_features, kernel).item()
        row = MetricRow(sampler=entry.name, K=K, seed=seed, rbf_mmd=rbf_mmd(gen, real), kid_val=kid,
                        wasserstein2=wasserstein2_2d(gen, real),
                        mode_coverage=mode_coverage(gen, centers, coverage_radius))
        logger.debug("eval %s K=%d seed=%d mmd=%.5f", entry.name, K, seed, row.rbf_mmd)
        return row

    with ThreadPoolExecutor(max_workers=workers or worker_count()) as pool:
        rows = list(pool.map(evaluate, cells))
    for row in rows:
        if not all(np.isfinite(v) for v in row.values()[3:]):
            raise DomainError(f"non-finite metric in report row {row.key}")
    meta = {'T': schedule.T, 'schedule': schedule.fingerprint(), **(metadata or {})}
    logger.info("evaluated %d report rows", len(rows))
    return MetricReport(rows=rows, metadata=meta)
