"""
Differentiable sampler search: backpropagate an unbiased KID between model
samples and real samples through the unrolled sampling chain, and update only
the sampler variables with Adam.
"""
from __future__ import annotations
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from sklearn.metrics.pairwise import euclidean_distances
from sklearn.utils import check_random_state
from tqdm import tqdm

from utils import tensorgrad as tg
from utils.datasets import MinibatchStream
from utils.diffusion import NoiseSchedule, ScoreNetwork
from utils.errors import ConfigError, InvariantViolation, SearchDivergedError, TensorShapeError
from utils.ggdm import FAMILIES, GGDMParams, init_from_ddpm
from utils.optim import AdamState, adam_step
from utils.samplers import sample_ggdm
from utils.tensorgrad import MemoryAccountant, Tape, Tensor, TensorLike

logger = logging.getLogger(__name__)

__all__ = [
    'FeatureMap', 'KernelSpec', 'SearchConfig', 'SearchResult', 'TraceRow', 'AdamState', 'adam_step',
    'apply_features', 'kernel_eval', 'gram', 'kid_unbiased', 'median_lengthscale', 'build_feature_map',
    'ddss_search', 'validation_kid',
]

FEATURE_KINDS = ('identity', 'random_fourier', 'file_backed')
KERNELS = ('linear', 'cubic')
VAL_SEED = 1_000_003


@dataclass
class FeatureMap:
    kind: str
    dim_in: int
    dim_out: int
    weights: Optional[np.ndarray] = None
    phase: Optional[np.ndarray] = None
    path: Optional[str] = None
    table: Optional[np.ndarray] = None

    @classmethod
    def identity(cls, d: int) -> 'FeatureMap':
        return cls(kind='identity', dim_in=d, dim_out=d)

    @classmethod
    def random_fourier(cls, d: int, m: int, lengthscale: float, seed: int = 0, *,
                       random_phase: bool = False) -> 'FeatureMap':
        """[cos(Wx + b); sin(Wx + b)] * sqrt(2/m) with W rows ~ N(0, I / lengthscale^2)."""
        if m < 2 or m % 2:
            raise ConfigError(f"random Fourier feature count must be even and >= 2, got {m}", field='search.rff_dim')
        if not lengthscale > 0:
            raise ConfigError(f"lengthscale must be positive, got {lengthscale}")
        rng = np.random.default_rng(seed)
        weights = rng.standard_normal((m // 2, d)) / lengthscale
        phase = rng.uniform(0.0, 2.0 * math.pi, m // 2) if random_phase else np.zeros(m // 2)
        return cls(kind='random_fourier', dim_in=d, dim_out=m, weights=weights, phase=phase)

    @classmethod
    def file_backed(cls, path: str) -> 'FeatureMap':
        from checkpoints import load_checkpoint

        table = load_checkpoint(path).arrays['features']
        return cls(kind='file_backed', dim_in=0, dim_out=int(table.shape[1]), path=path, table=table)


def median_lengthscale(data: np.ndarray, max_points: int = 1000, seed: int = 0) -> float:
    """Median pairwise Euclidean distance over (a subsample of) `data`."""
    data = np.asarray(data, dtype=np.float64)
    if len(data) > max_points:
        data = data[check_random_state(seed).choice(len(data), max_points, replace=False)]
    dist = euclidean_distances(data, data)
    upper = dist[np.triu_indices(len(data), k=1)]
    return float(np.median(upper)) if upper.size else 1.0


def build_feature_map(spec: str, train: np.ndarray, *, rff_dim: int = 512, seed: int = 0) -> FeatureMap:
    """`identity`, `rff` / `random_fourier`, or `file:PATH`."""
    d = train.shape[1]
    if spec == 'identity':
        return FeatureMap.identity(d)
    if spec in ('rff', 'random_fourier'):
        return FeatureMap.random_fourier(d, rff_dim, median_lengthscale(train, seed=seed), seed)
    if spec.startswith('file:'):
        return FeatureMap.file_backed(spec[len('file:'):])
    raise ConfigError(f"unknown feature map '{spec}' (expected identity, rff or file:PATH)", field='search.features')


def apply_features(fmap: FeatureMap, samples: TensorLike, indices: Optional[Sequence[int]] = None) -> Tensor:
    if fmap.kind == 'file_backed':
        if indices is None:
            raise ConfigError(
                f"precomputed features in {fmap.path} can only be looked up by sample index; "
                "generated samples need the identity or rff feature map",
                field='search.features',
            )
        return tg.constant(fmap.table[np.asarray(indices, dtype=np.int64)])
    x = tg.as_tensor(samples)
    if x.ndim != 2 or x.shape[1] != fmap.dim_in:
        raise TensorShapeError('apply_features', x.shape, detail=f'feature map expects (n, {fmap.dim_in})')
    if fmap.kind == 'identity':
        return x
    proj = tg.add(tg.matmul(x, fmap.weights.T), fmap.phase)
    return tg.scale(tg.concat([tg.cos(proj), tg.sin(proj)], axis=1), math.sqrt(2.0 / fmap.dim_out))


@dataclass(frozen=True)
class KernelSpec:
    kind: str = 'linear'
    d: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ConfigError(f"unknown kernel '{self.kind}' (expected linear or cubic)", field='search.kernel')


def gram(spec: KernelSpec, fa: TensorLike, fb: TensorLike) -> Tensor:
    fa, fb = tg.as_tensor(fa), tg.as_tensor(fb)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise TensorShapeError('gram', fa.shape, fb.shape, detail='feature dimensions differ')
    d = fa.shape[1]
    if spec.d is not None and spec.d != d:
        raise TensorShapeError('gram', fa.shape, detail=f'kernel declared for dimension {spec.d}')
    inner = tg.matmul(fa, tg.transpose(fb))
    if spec.kind == 'linear':
        return inner
    base = tg.add(tg.scale(inner, 1.0 / d), 1.0)
    return tg.mul(tg.square(base), base)


def kernel_eval(spec: KernelSpec, fx: TensorLike, fy: TensorLike) -> Tensor:
    fx, fy = tg.as_tensor(fx), tg.as_tensor(fy)
    if fx.shape != fy.shape or fx.ndim != 1:
        raise TensorShapeError('kernel_eval', fx.shape, fy.shape)
    return tg.reshape(gram(spec, tg.reshape(fx, (1, -1)), tg.reshape(fy, (1, -1))), ())


def kid_unbiased(fp: TensorLike, fq: TensorLike, spec: KernelSpec) -> Tensor:
    """U-statistic MMD^2: within-set terms skip i == j, the cross term averages all pairs."""
    fp, fq = tg.as_tensor(fp), tg.as_tensor(fq)
    n_p, n_q = fp.shape[0], fq.shape[0]
    if n_p < 2 or n_q < 2:
        raise TensorShapeError('kid_unbiased', fp.shape, fq.shape, detail='needs at least two samples per side')

    def within(f, n):
        return tg.scale(tg.sum_(tg.mul(gram(spec, f, f), 1.0 - np.eye(n))), 1.0 / (n * (n - 1)))

    cross = tg.scale(tg.sum_(gram(spec, fp, fq)), 2.0 / (n_p * n_q))
    return tg.add(tg.sub(within(fp, n_p), cross), within(fq, n_q))


@dataclass
class SearchConfig:
    family: str = 'ggdm'
    time: bool = False
    K: int = 5
    batch_size: int = 512
    steps: int = 2000
    seed: int = 0
    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    kernel: str = 'linear'
    features: str = 'rff'
    rff_dim: int = 512
    stride: str = 'linear'
    remat: bool = True
    eval_every: int = 100
    n_val: int = 2048
    history_init: float = 1e-4
    log_every: int = 100

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got '{self.family}'")
        if self.batch_size < 2 or self.n_val < 2:
            raise ValueError("batch_size and n_val must be at least 2")
        if self.K < 1:
            raise ValueError("K must be positive")
        if self.steps < 0 or self.eval_every < 0:
            raise ValueError("steps and eval_every must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.stride == 'learned' and not self.time:
            raise ValueError("a learned stride needs time = true")


@dataclass
class TraceRow:
    step: int
    train_kid: float
    val_kid: Optional[float] = None


@dataclass
class SearchResult:
    best: GGDMParams
    final: GGDMParams
    trace: List[TraceRow] = field(default_factory=list)
    best_val: float = float('nan')
    best_step: int = 0
    peak_interior_bytes: int = 0


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def validation_kid(model: ScoreNetwork, params: GGDMParams, schedule: NoiseSchedule, real_features: Tensor,
                   fmap: FeatureMap, kernel: KernelSpec, n: int, seed: int = VAL_SEED) -> float:
    batch = sample_ggdm(model, params, schedule, n, seed)
    with tg.no_grad():
        return kid_unbiased(apply_features(fmap, batch.samples), real_features, kernel).item()


def ddss_search(model: ScoreNetwork, schedule: NoiseSchedule, config: SearchConfig, train: np.ndarray,
                val: np.ndarray, *, init: Optional[GGDMParams] = None, fmap: Optional[FeatureMap] = None,
                progress: bool = True) -> SearchResult:
    """Optimise sampler variables for `config.steps` Adam updates.

    The trace holds one row per step 0..steps (train KID before the update
    at that step); validation KID is filled every `eval_every` steps and at
    the last step.
    """
    # learned strides start from the linear one
    stride = 'linear' if config.stride == 'learned' else config.stride
    params = init or init_from_ddpm(schedule, config.K, stride, family=config.family,
                                    time=config.time, history_init=config.history_init)
    fmap = fmap or build_feature_map(config.features, train, rff_dim=config.rff_dim, seed=config.seed)
    kernel = KernelSpec(config.kernel)
    frozen = model.fingerprint()
    state = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    real = MinibatchStream(np.asarray(train, dtype=np.float64), config.batch_size, seed=config.seed)
    with tg.no_grad():
        val_features = apply_features(fmap, np.asarray(val, dtype=np.float64)[:config.n_val])

    trace: List[TraceRow] = []
    best, best_val, best_step, peak = params, math.inf, 0, 0
    bar = tqdm(range(config.steps + 1), desc=f'search {params.tag}', disable=not progress, leave=False)
    for step in bar:
        accountant = MemoryAccountant()
        with Tape(accountant) as tape:
            w = {k: tape.variable(v, name=k) for k, v in params.variables.items()}
            batch = sample_ggdm(model, params, schedule, config.batch_size, _step_seed(config.seed, step),
                                on_tape=True, remat=config.remat, variables=w)
            loss = kid_unbiased(apply_features(fmap, batch.x0), apply_features(fmap, real.next()), kernel)
        value = loss.item()
        if not np.isfinite(value):
            raise SearchDivergedError(step, value, last_good=best)
        row = TraceRow(step=step, train_kid=value)
        if step == config.steps or (config.eval_every and step % config.eval_every == 0):
            row.val_kid = validation_kid(model, params, schedule, val_features, fmap, kernel, config.n_val)
            if row.val_kid < best_val:
                best, best_val, best_step = params, row.val_kid, step
        trace.append(row)
        if step < config.steps:
            grads = tape.backward(loss).by_name()
            if set(grads) - set(params.variables):
                raise InvariantViolation(f"gradients reached non-sampler variables: {sorted(set(grads) - set(params.variables))}")
            params = params.with_variables(adam_step(state, grads, params.variables))
        peak = max(peak, accountant.interior_peak_bytes)
        if config.log_every and step % config.log_every == 0:
            logger.info("search step %d train_kid %.6f val_kid %s", step, value,
                        'n/a' if row.val_kid is None else f"{row.val_kid:.6f}")
            bar.set_postfix(kid=f"{value:.4f}")

    if model.fingerprint() != frozen:
        raise InvariantViolation("score network weights changed during sampler search")
    logger.info("search done: best val_kid %.6f at step %d", best_val, best_step)
    return SearchResult(best=best, final=params, trace=trace, best_val=best_val, best_step=best_step,
                        peak_interior_bytes=peak)
