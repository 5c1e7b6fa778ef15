"""
K-step samplers: DDPM ancestral on a stride, DDIM(eta), and the full-history
generalized sampler. All of them draw noise from a NoiseStream so that runs
sharing a seed consume identical noise per (step, sample).
"""
from __future__ import annotations
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from utils import tensorgrad as tg
from utils.diffusion import NoiseSchedule, ScoreNetwork, predict_eps
from utils.errors import ConfigError, DomainError, ScheduleError, StructuralError, TapeUsageError
from utils.ggdm import GGDMParams, MarginalTable, SamplerCoefficients, ddpm_posterior, predict_x0, transform
from utils.tensorgrad import Tensor

logger = logging.getLogger(__name__)

STRIDES = ('linear', 'quadratic', 'learned')


def stride_timesteps(T: int, K: int, kind: str = 'linear') -> List[int]:
    """K strictly increasing base times in [1, T] ending at T."""
    if not 1 <= K <= T:
        raise ScheduleError(f"need 1 <= K <= T, got K={K}, T={T}")
    if kind == 'linear':
        # round half up, in integers
        times = [(2 * i * T + K) // (2 * K) for i in range(1, K + 1)]
    elif kind == 'quadratic':
        times = [max(1, (2 * T * i * i + K * K) // (2 * K * K)) for i in range(1, K + 1)]
    elif kind == 'learned':
        raise ConfigError("a learned stride comes from a '+time' sampler checkpoint, not from a formula",
                          field='sampling.stride')
    else:
        raise ConfigError(f"unknown stride kind '{kind}'", field='sampling.stride')
    for i in range(1, K):
        if times[i] <= times[i - 1]:
            times[i] = times[i - 1] + 1
    times[-1] = T
    for i in range(K - 2, -1, -1):
        if times[i] >= times[i + 1]:
            times[i] = times[i + 1] - 1
    return times


@dataclass(frozen=True)
class StrideSpec:
    kind: str
    K: int
    T: int

    def timesteps(self) -> List[int]:
        return stride_timesteps(self.T, self.K, self.kind)


@dataclass(frozen=True)
class NoiseStream:
    """Counter-based normals keyed by (seed, step).

    Step 0 is the initial x_K; lattice step t draws with key (seed, t). Rows
    are filled in order, so sample i sees the same numbers for any n > i.
    """
    seed: int

    def normal(self, step: int, n: int, d: int) -> np.ndarray:
        bitgen = np.random.Philox(key=[self.seed, step])
        return np.random.Generator(bitgen).standard_normal((n, d))


@dataclass
class SampleBatch:
    x0: Tensor
    seed: int
    step_seed: int
    sampler: str
    timesteps: List[float] = field(default_factory=list)
    trajectory: Optional[List[Tensor]] = None

    @property
    def samples(self) -> np.ndarray:
        return self.x0.data

    def trajectory_arrays(self) -> List[np.ndarray]:
        return [x.data for x in self.trajectory or []]


def _times(stride: Union[Sequence[int], StrideSpec]) -> np.ndarray:
    times = np.asarray(stride.timesteps() if isinstance(stride, StrideSpec) else stride, dtype=np.int64)
    if times.ndim != 1 or len(times) == 0 or np.any(np.diff(times) <= 0):
        raise StructuralError(f"stride must be strictly increasing, got {times.tolist()}")
    return times


def ddpm_sigmas(schedule: NoiseSchedule, times: np.ndarray) -> np.ndarray:
    """Ancestral posterior standard deviations between consecutive kept times."""
    ab = schedule.alpha_bar[times - 1]
    with tg.no_grad():
        _, _, var = ddpm_posterior(ab[:-1], ab[1:])
    return np.sqrt(var.data)


def sample_ddpm_stride(model: ScoreNetwork, schedule: NoiseSchedule, stride, n: int, seed: int, *,
                       step_seed: Optional[int] = None, trajectory: bool = False) -> SampleBatch:
    """Ancestral sampling on the subchain of kept times; the last step emits x0_hat."""
    times = _times(stride)
    K = len(times)
    ab = schedule.alpha_bar[times - 1]
    with tg.no_grad():
        mu_u, mu_0, var = (x.data for x in ddpm_posterior(ab[:K - 1], ab[1:]))
        table = MarginalTable.from_alpha_bar(ab)
        sigma = np.sqrt(var)

        def step(t, x_next, x0_hat, z):
            mean = tg.add(tg.mul(mu_0[t - 1], x0_hat), tg.mul(mu_u[t - 1], x_next))
            return tg.gaussian_reparam(mean, sigma[t - 1], z)

        return _chain(model, times, table, step, n, seed, step_seed, trajectory, 'ddpm')


def sample_ddim(model: ScoreNetwork, schedule: NoiseSchedule, stride, n: int, seed: int, *,
                eta: Optional[float] = 0.0, sigma: Optional[Sequence[float]] = None,
                step_seed: Optional[int] = None, trajectory: bool = False) -> SampleBatch:
    """x_t = sqrt(ab_t) x0_hat + sqrt(1 - ab_t - sigma_t^2) eps_hat + sigma_t z.

    `eta` scales the ancestral posterior std; an explicit `sigma` vector wins.
    """
    times = _times(stride)
    K = len(times)
    ab = schedule.alpha_bar[times - 1]
    if sigma is None:
        sigma = (0.0 if eta is None else float(eta)) * ddpm_sigmas(schedule, times)
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape != (K - 1,):
        raise StructuralError(f"sigma vector must have length K-1={K - 1}, got {sigma.shape}")
    radicand = 1.0 - ab[:K - 1] - sigma ** 2
    bad = np.flatnonzero((sigma < 0) | (radicand < -1e-12))
    if bad.size:
        t = int(bad[0]) + 1
        raise DomainError(f"sigma_{t}={sigma[t - 1]!r} exceeds sqrt(1 - alpha_bar)={np.sqrt(1 - ab[t - 1])!r}")
    direction = np.sqrt(np.maximum(radicand, 0.0))
    with tg.no_grad():
        table = MarginalTable.from_alpha_bar(ab)

        def step(t, x_next, x0_hat, z, eps_hat):
            mean = tg.add(tg.mul(np.sqrt(ab[t - 1]), x0_hat), tg.mul(direction[t - 1], eps_hat))
            return tg.gaussian_reparam(mean, sigma[t - 1], z)

        label = f"ddim(eta={eta})" if eta is not None else 'ddim'
        return _chain(model, times, table, step, n, seed, step_seed, trajectory, label, needs_eps=True)


def _chain(model, times, table, step, n, seed, step_seed, trajectory, label, needs_eps=False) -> SampleBatch:
    K = len(times)
    step_seed = seed if step_seed is None else step_seed
    init, steps = NoiseStream(seed), NoiseStream(step_seed)
    x = tg.constant(init.normal(0, n, model.d))
    path = [x] if trajectory else None
    for k in range(K, 0, -1):
        eps = predict_eps(model, x, float(times[k - 1]))
        x0_hat = predict_x0(x, eps, table, k)
        if k == 1:
            break
        z = steps.normal(k - 1, n, model.d)
        x = step(k - 1, x, x0_hat, z, eps) if needs_eps else step(k - 1, x, x0_hat, z)
        if path is not None:
            path.append(x)
    if path is not None:
        path.append(x0_hat)
    return SampleBatch(x0=x0_hat, seed=seed, step_seed=step_seed, sampler=label,
                       timesteps=[float(s) for s in times], trajectory=path)


def sample_ggdm(model: ScoreNetwork, params: Union[GGDMParams, SamplerCoefficients], schedule: NoiseSchedule,
                n: int, seed: int, *, on_tape: bool = False, remat: bool = True,
                variables: Optional[Dict[str, Tensor]] = None, step_seed: Optional[int] = None,
                trajectory: bool = False) -> SampleBatch:
    """Full-history sampler. Step t mixes x0_hat with every live x_u, u > t.

    With `on_tape` the chain is recorded on the active tape and each score
    call is a rematerialized checkpoint (unless `remat` is off).
    """
    if on_tape and tg.active_tape() is None:
        raise TapeUsageError("sample_ggdm(on_tape=True) needs an active Tape")
    if on_tape:
        return _ggdm_chain(model, params, schedule, n, seed, remat, variables, step_seed, trajectory)
    with tg.no_grad():
        return _ggdm_chain(model, params, schedule, n, seed, False, None, step_seed, trajectory)


def _ggdm_chain(model, params, schedule, n, seed, remat, variables, step_seed, trajectory) -> SampleBatch:
    coeffs = params if isinstance(params, SamplerCoefficients) else transform(params, schedule, variables)
    K = coeffs.K
    if coeffs.mu_mask.shape != (K - 1, K + 1) or coeffs.timesteps.shape != (K,):
        raise StructuralError(f"sampler tables do not describe a K={K} lattice")
    step_seed = seed if step_seed is None else step_seed
    init, steps = NoiseStream(seed), NoiseStream(step_seed)

    def score(x, tau):
        return predict_eps(model, x, tau)

    xs: Dict[int, Tensor] = {K: tg.constant(init.normal(0, n, model.d))}
    path = [xs[K]] if trajectory else None
    for k in range(K, 0, -1):
        eps = tg.checkpoint(score, [xs[k], coeffs.timesteps[k - 1]], enabled=remat)
        x0_hat = predict_x0(xs[k], eps, coeffs.table, k, coeffs.pred(k))
        if k == 1:
            break
        t = k - 1
        mean = tg.mul(coeffs.mu_at(t, 0), x0_hat)
        for u in coeffs.history(t):
            if u not in xs:
                raise StructuralError(f"step {t} needs x_{u} but the history holds {sorted(xs)}")
            mean = tg.add(mean, tg.mul(coeffs.mu_at(t, u), xs[u]))
        xs[t] = tg.gaussian_reparam(mean, coeffs.sigma_at(t), steps.normal(t, n, model.d))
        if path is not None:
            path.append(xs[t])
    if path is not None:
        path.append(x0_hat)
    return SampleBatch(x0=x0_hat, seed=seed, step_seed=step_seed, sampler=coeffs.label,
                       timesteps=[float(s) for s in coeffs.timesteps.data], trajectory=path)
