"""
Generalized Gaussian sampler family on a K-step lattice.

Lattice index t = 1..K maps to base time tau_t (tau_K is the noisiest). Step t
of the sampler draws x_t from x_{t+1..K} and the current x_0 estimate:

    x_t = mu[t, 0] * x0_hat + sum_{u > t} mu[t, u] * x_u + sigma[t] * z_t

`raw_mu` is stored densely as a (K-1, K+1) table indexed [t-1, u]; only the
slots in `mu_mask` are live (u = 0, u = t+1, and the history slots u > t+1
when they were seeded). x_K comes from the terminal factor
q(x_K | x_0) = N(sqrt(ab_K) x_0, (1 - ab_K) I).
"""
from __future__ import annotations
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from utils import tensorgrad as tg
from utils.diffusion import NoiseSchedule
from utils.errors import (DomainError, FingerprintMismatchError, InitializationError, SingularityError,
                          StructuralError)
from utils.tensorgrad import Tensor, TensorLike

logger = logging.getLogger(__name__)

FAMILIES = ('ddim', 'vars', 'ggdm', 'ggdm_pred')
HISTORY_INIT = 1e-4
SINGULAR_BELOW = 1e-8


def family_variables(family: str, K: int, time: bool) -> Dict[str, Tuple[int, ...]]:
    """Names and shapes of the trainable variables of one family."""
    if family not in FAMILIES:
        raise StructuralError(f"unknown sampler family '{family}' (expected one of {', '.join(FAMILIES)})")
    shapes: Dict[str, Tuple[int, ...]] = {}
    if family in ('ggdm', 'ggdm_pred'):
        shapes['raw_mu'] = (K - 1, K + 1)
        shapes['raw_sigma'] = (K - 1,)
    elif family == 'ddim':
        shapes['raw_sigma'] = (K - 1,)
    else:
        shapes['raw_vars'] = (K - 1,)
    if family == 'ggdm_pred':
        shapes['raw_pred_a'] = (K,)
        shapes['raw_pred_b'] = (K,)
    if time:
        shapes['raw_time'] = (K - 1,)
    return shapes


def lattice_mask(K: int, history: bool) -> np.ndarray:
    """Live slots of the (K-1, K+1) mu table."""
    mask = np.zeros((max(K - 1, 0), K + 1), dtype=bool)
    for t in range(1, K):
        mask[t - 1, 0] = True
        mask[t - 1, t + 1:] = history
        mask[t - 1, t + 1] = True
    return mask


@dataclass
class GGDMParams:
    """Raw sampler variables psi plus the fixed structure they live on."""
    K: int
    family: str
    time: bool
    timesteps: np.ndarray
    variables: Dict[str, np.ndarray]
    mu_mask: np.ndarray
    schedule_fingerprint: str
    stride_kind: str = 'linear'

    def __post_init__(self):
        self.timesteps = np.asarray(self.timesteps, dtype=np.int64)
        self.mu_mask = np.asarray(self.mu_mask, dtype=bool)
        expected = family_variables(self.family, self.K, self.time)
        if set(expected) != set(self.variables):
            raise StructuralError(
                f"{self.tag} expects variables {sorted(expected)}, got {sorted(self.variables)}"
            )
        for name, shape in expected.items():
            value = np.asarray(self.variables[name], dtype=np.float64)
            if value.shape != shape:
                raise StructuralError(f"{name} must have shape {shape}, got {value.shape}")
            self.variables[name] = value
        if self.timesteps.shape != (self.K,):
            raise StructuralError(f"timesteps must have length K={self.K}, got {self.timesteps.shape}")
        if self.mu_mask.shape != (max(self.K - 1, 0), self.K + 1):
            raise StructuralError(f"mu_mask must have shape ({self.K - 1}, {self.K + 1})")

    @property
    def tag(self) -> str:
        return f"{self.family}+time" if self.time else self.family

    @property
    def raw_mu(self) -> Optional[np.ndarray]:
        return self.variables.get('raw_mu')

    @property
    def raw_sigma(self) -> Optional[np.ndarray]:
        return self.variables.get('raw_sigma')

    @property
    def raw_time(self) -> Optional[np.ndarray]:
        return self.variables.get('raw_time')

    @property
    def raw_pred_a(self) -> Optional[np.ndarray]:
        return self.variables.get('raw_pred_a')

    @property
    def raw_pred_b(self) -> Optional[np.ndarray]:
        return self.variables.get('raw_pred_b')

    def with_variables(self, variables: Dict[str, np.ndarray]) -> 'GGDMParams':
        return replace(self, variables={k: np.array(v, dtype=np.float64) for k, v in variables.items()})


@dataclass
class VarsParams:
    """Learned marginal variances cumsum(softmax([raw; 1]))."""
    raw: TensorLike


@dataclass
class MarginalTable:
    """Recursion outputs per lattice step t.

    `rows[t-1][i-1]` is the coefficient row a^(i)_t over (x_0, x_1..x_K) and
    `row_variances[t-1][i-1]` the matching v^(i)_t; the last entry of each
    list is the marginal of x_t given x_0.
    """
    K: int
    a: List[Tensor]
    v: List[Tensor]
    rows: Optional[List[List[Tensor]]] = None
    row_variances: Optional[List[List[Tensor]]] = None

    def marginal_a(self, t: int) -> Tensor:
        self._check(t)
        return self.a[t - 1]

    def marginal_v(self, t: int) -> Tensor:
        self._check(t)
        return self.v[t - 1]

    def arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        return (np.array([x.item() for x in self.a]), np.array([x.item() for x in self.v]))

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.K:
            raise StructuralError(f"lattice step {t} outside [1, {self.K}]")

    @classmethod
    def from_alpha_bar(cls, alpha_bar: TensorLike) -> 'MarginalTable':
        """Marginals of the base process at the sampler's query times."""
        ab = tg.as_tensor(alpha_bar)
        K = ab.shape[0]
        return cls(K=K, a=[tg.sqrt(ab[k]) for k in range(K)], v=[tg.sub(1.0, ab[k]) for k in range(K)])


def theorem1_marginals(mu: TensorLike, sigma: TensorLike, terminal: Tuple[TensorLike, TensorLike],
                       mask: Optional[np.ndarray] = None) -> MarginalTable:
    """Marginal coefficients of every x_t given x_0 by eliminating x_{t+1}, ..., x_K in turn.

    a^(i+1)_t = a^(i)_t with the x_{t+i} slot replaced by a^(i)_{t,t+i} * mu[t+i]
    v^(i+1)_t = v^(i)_t + (a^(i)_{t,t+i} * sigma_{t+i})^2
    """
    mu = tg.as_tensor(mu)
    sigma = tg.as_tensor(sigma)
    if sigma.ndim != 1:
        raise StructuralError(f"sigma table must be a vector, got shape {sigma.shape}")
    K = sigma.shape[0] + 1
    if mu.shape != (K - 1, K + 1):
        raise StructuralError(f"mu table for K={K} must have shape ({K - 1}, {K + 1}), got {mu.shape}")
    live = lattice_mask(K, history=True) if mask is None else np.asarray(mask, dtype=bool)
    if np.isnan(mu.data[live]).any() or np.isnan(sigma.data).any():
        raise StructuralError("mu/sigma tables have missing (NaN) entries on the lattice")
    mu_K0, sigma_K = (tg.as_tensor(x) for x in terminal)

    e0 = np.zeros(K + 1)
    e0[0] = 1.0
    rows = [mu[t - 1] for t in range(1, K)] + [tg.mul(tg.reshape(mu_K0, ()), e0)]
    sigmas = [sigma[t - 1] for t in range(1, K)] + [tg.reshape(sigma_K, ())]

    all_rows: List[List[Tensor]] = []
    all_vars: List[List[Tensor]] = []
    for t in range(1, K + 1):
        a = rows[t - 1]
        v = tg.square(sigmas[t - 1])
        hist_a, hist_v = [a], [v]
        for s in range(t + 1, K + 1):
            c = a[s]
            keep = np.ones(K + 1)
            keep[s] = 0.0
            a = tg.add(tg.mul(c, rows[s - 1]), tg.mul(a, keep))
            v = tg.add(v, tg.square(tg.mul(c, sigmas[s - 1])))
            hist_a.append(a)
            hist_v.append(v)
        all_rows.append(hist_a)
        all_vars.append(hist_v)
    return MarginalTable(K=K, a=[r[-1][0] for r in all_rows], v=[r[-1] for r in all_vars],
                         rows=all_rows, row_variances=all_vars)


def _nonneg(x: Tensor) -> Tensor:
    """Lift round-off negatives to exactly zero (constant shift, no gradient)."""
    shift = np.maximum(-x.data, 0.0)
    return tg.add(x, shift) if np.any(shift) else x


def _two_slot_table(mu0: Tensor, mu_next: Tensor, K: int) -> Tensor:
    """(K-1, K+1) table with mu0 in column 0 and mu_next on the t+1 diagonal."""
    e0 = np.zeros((K - 1, K + 1))
    e_next = np.zeros((K - 1, K + 1))
    e0[:, 0] = 1.0
    for t in range(1, K):
        e_next[t - 1, t + 1] = 1.0
    return tg.add(tg.mul(tg.reshape(mu0, (K - 1, 1)), e0), tg.mul(tg.reshape(mu_next, (K - 1, 1)), e_next))


def ddim_rows(alpha_bar: TensorLike, sigma: TensorLike) -> Tuple[Tensor, Tensor]:
    """Non-Markovian posterior onto the lattice: returns (mu_next, mu0) per step t = 1..K-1."""
    ab = tg.as_tensor(alpha_bar)
    sigma = tg.as_tensor(sigma)
    K = ab.shape[0]
    ab_t, ab_next = ab[:K - 1], ab[1:]
    radicand = tg.sub(tg.sub(1.0, ab_t), tg.square(sigma))
    mu_next = tg.div(tg.sqrt(_nonneg(radicand)), tg.sqrt(tg.sub(1.0, ab_next)))
    mu0 = tg.sub(tg.sqrt(ab_t), tg.mul(mu_next, tg.sqrt(ab_next)))
    return mu_next, mu0


def ddim_embedding(schedule: NoiseSchedule, sub_times: Sequence[int],
                   sigma_vector: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """Sparse (mu, sigma) tables that reproduce a DDIM sampler on `sub_times`."""
    times = np.asarray(sub_times, dtype=np.int64)
    sigma = np.asarray(sigma_vector, dtype=np.float64)
    K = len(times)
    if K < 1 or np.any(np.diff(times) <= 0) or times[0] < 1 or times[-1] > schedule.T:
        raise StructuralError(f"sub_times must be strictly increasing within [1, {schedule.T}]")
    if sigma.shape != (K - 1,):
        raise StructuralError(f"sigma_vector must have length K-1={K - 1}, got {sigma.shape}")
    ab = schedule.alpha_bar[times - 1]
    bound = np.sqrt(1.0 - ab[:K - 1])
    bad = np.flatnonzero((sigma < 0) | (sigma > bound * (1.0 + 1e-12)))
    if bad.size:
        t = int(bad[0]) + 1
        raise DomainError(
            f"sigma_{t}={sigma[t - 1]!r} outside admissible [0, {bound[t - 1]!r}] (tau={times[t - 1]})"
        )
    with tg.no_grad():
        mu_next, mu0 = ddim_rows(ab, sigma)
        table = _two_slot_table(mu0, mu_next, K)
    return np.array(table.data), sigma.copy()


def ddpm_posterior(ab_s: TensorLike, ab_u: TensorLike) -> Tuple[Tensor, Tensor, Tensor]:
    """Ancestral posterior q(x_s | x_u, x_0) for s < u: (coef on x_u, coef on x_0, variance)."""
    ab_s = tg.as_tensor(ab_s)
    ab_u = tg.as_tensor(ab_u)
    ratio = tg.div(ab_u, ab_s)
    beta = tg.sub(1.0, ratio)
    denom = tg.sub(1.0, ab_u)
    mu_u = tg.div(tg.mul(tg.sqrt(ratio), tg.sub(1.0, ab_s)), denom)
    mu_0 = tg.div(tg.mul(tg.sqrt(ab_s), beta), denom)
    var = tg.div(tg.mul(tg.sub(1.0, ab_s), beta), denom)
    return mu_u, mu_0, var


def vars_to_schedule(vars: VarsParams) -> Tensor:
    """Implied alpha_bar' = 1 - cumsum(softmax([raw; 1])); the last entry is exactly 0."""
    raw = tg.as_tensor(vars.raw)
    variances = tg.simplex_cumsum(tg.concat([raw, np.ones(1)]))
    return tg.sub(1.0, variances)


def _logit_target(name: str, value: float, where: str) -> float:
    if not 0.0 < value < 1.0 or not np.isfinite(value):
        raise InitializationError(name, float(value), where)
    return float(special.logit(value))


def _simplex_logits(increments: np.ndarray) -> np.ndarray:
    """Raw logits whose softmax with an appended 1 reproduces `increments`."""
    p = np.asarray(increments, dtype=np.float64)
    return np.log(p[:-1]) - np.log(p[-1]) + 1.0


def _softplus_inverse(y: np.ndarray) -> np.ndarray:
    # log(expm1(y)) without overflow for large y
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def init_from_ddpm(schedule: NoiseSchedule, K: int, stride_kind: str = 'linear', *, family: str = 'ggdm',
                   time: bool = False, history_init: float = HISTORY_INIT) -> GGDMParams:
    """Raw variables whose transform is the K-substep DDPM ancestral sampler.

    History slots (u > t+1) start at `history_init`; 0 leaves them out of
    the lattice entirely, which makes the sampler exactly the DDPM one.
    """
    from utils.samplers import stride_timesteps

    if not 0.0 <= history_init < 1.0:
        raise InitializationError('history_init', history_init, 'every history slot')
    times = np.asarray(stride_timesteps(schedule.T, K, stride_kind), dtype=np.int64)
    ab = schedule.alpha_bar[times - 1]
    with tg.no_grad():
        mu_u, mu_0, var = (x.data for x in ddpm_posterior(ab[:K - 1], ab[1:]))
    sigma = np.sqrt(var)
    history = family in ('ggdm', 'ggdm_pred') and history_init > 0.0
    mask = lattice_mask(K, history=history)
    variables: Dict[str, np.ndarray] = {}

    if family in ('ggdm', 'ggdm_pred'):
        raw_mu = np.zeros((K - 1, K + 1))
        raw_sigma = np.zeros(K - 1)
        for t in range(1, K):
            where = f"t={t} (tau={times[t - 1]}, next tau={times[t]})"
            raw_mu[t - 1, 0] = _logit_target(f"mu[{t},0]", mu_0[t - 1], where)
            raw_mu[t - 1, t + 1] = _logit_target(f"mu[{t},{t + 1}]", mu_u[t - 1], where)
            if history:
                raw_mu[t - 1, t + 2:] = special.logit(history_init)
            raw_sigma[t - 1] = _logit_target(f"sigma[{t}]", sigma[t - 1], where)
        variables['raw_mu'] = raw_mu
        variables['raw_sigma'] = raw_sigma
    elif family == 'ddim':
        scaled = sigma / np.sqrt(1.0 - ab[:K - 1])
        variables['raw_sigma'] = np.array([
            _logit_target(f"sigma[{t}]/sqrt(1-ab)", scaled[t - 1], f"t={t} (tau={times[t - 1]})")
            for t in range(1, K)
        ])
    elif family == 'vars':
        variances = np.concatenate([[0.0], 1.0 - ab[:K - 1], [1.0]])
        variables['raw_vars'] = _simplex_logits(np.diff(variances))
    else:
        raise StructuralError(f"unknown sampler family '{family}' (expected one of {', '.join(FAMILIES)})")

    if family == 'ggdm_pred':
        a = 1.0 / np.sqrt(ab)
        b = np.sqrt(1.0 - ab) / np.sqrt(ab)
        variables['raw_pred_a'] = _softplus_inverse(a - 1.0)
        variables['raw_pred_b'] = _softplus_inverse(b)
    if time:
        variables['raw_time'] = _simplex_logits(np.diff(np.concatenate([[0.0], times])) / schedule.T)

    logger.debug("initialised %s sampler with K=%d on %s stride %s", family, K, stride_kind, times.tolist())
    return GGDMParams(K=K, family=family, time=time, timesteps=times, variables=variables, mu_mask=mask,
                      schedule_fingerprint=schedule.fingerprint(), stride_kind=stride_kind)


@dataclass
class SamplerCoefficients:
    """Transformed view of a sampler: what the sampling loop actually consumes."""
    K: int
    mu: Tensor
    sigma: Tensor
    mu_mask: np.ndarray
    timesteps: Tensor
    table: Optional[MarginalTable]
    terminal: Tuple[Tensor, Tensor]
    pred_a: Optional[Tensor] = None
    pred_b: Optional[Tensor] = None
    label: str = 'ggdm'
    _cells: Dict[Tuple[int, int], Tensor] = field(default_factory=dict, repr=False)

    def mu_at(self, t: int, u: int) -> Tensor:
        key = (t, u)
        if key not in self._cells:
            self._cells[key] = self.mu[t - 1, u]
        return self._cells[key]

    def sigma_at(self, t: int) -> Tensor:
        return self.sigma[t - 1]

    def history(self, t: int) -> List[int]:
        """Live slots u > 0 of row t."""
        return [int(u) for u in np.flatnonzero(self.mu_mask[t - 1]) if u > 0]

    def pred(self, t: int) -> Optional[Tuple[Tensor, Tensor]]:
        if self.pred_a is None:
            return None
        return self.pred_a[t - 1], self.pred_b[t - 1]

    @classmethod
    def from_tables(cls, schedule: NoiseSchedule, sub_times: Sequence[int], mu: np.ndarray,
                    sigma: np.ndarray, mask: Optional[np.ndarray] = None) -> 'SamplerCoefficients':
        """Fixed coefficient tables (e.g. from ddim_embedding) with marginals from the recursion."""
        times = np.asarray(sub_times, dtype=np.float64)
        K = len(times)
        live = lattice_mask(K, history=True) if mask is None else np.asarray(mask, dtype=bool)
        live = live & (np.asarray(mu) != 0.0)
        live[:, 0] = True
        for t in range(1, K):
            live[t - 1, t + 1] = True
        ab_K = schedule.alpha_bar_at(int(times[-1]))
        terminal = (tg.constant(np.sqrt(ab_K)), tg.constant(np.sqrt(1.0 - ab_K)))
        table = theorem1_marginals(mu, sigma, terminal, live)
        return cls(K=K, mu=tg.constant(mu), sigma=tg.constant(sigma), mu_mask=live,
                   timesteps=tg.constant(times), table=table, terminal=terminal, label='tables')


def _query_times(params: GGDMParams, schedule: NoiseSchedule, w: Dict[str, Tensor]) -> Tuple[Tensor, Tensor]:
    if params.time:
        steps = tg.scale(tg.simplex_cumsum(tg.concat([w['raw_time'], np.ones(1)])), schedule.T)
        return steps, schedule.alpha_bar_continuous(steps)
    times = params.timesteps
    return tg.constant(times.astype(np.float64)), tg.constant(schedule.alpha_bar[times - 1])


def transform(params: GGDMParams, schedule: NoiseSchedule,
              variables: Optional[Dict[str, Tensor]] = None) -> SamplerCoefficients:
    """Map raw variables to sampler coefficients. Pass tape variables to differentiate."""
    if params.schedule_fingerprint != schedule.fingerprint():
        raise FingerprintMismatchError(schedule.fingerprint(), params.schedule_fingerprint, params.tag)
    w = variables if variables is not None else {k: tg.constant(v) for k, v in params.variables.items()}
    K = params.K
    timesteps, ab = _query_times(params, schedule, w)
    ab_K = ab[K - 1]
    terminal = (tg.sqrt(ab_K), tg.sqrt(tg.sub(1.0, ab_K)))
    pred_a = pred_b = None
    table: Optional[MarginalTable] = None

    if params.family in ('ggdm', 'ggdm_pred'):
        mu = tg.mul(tg.sigmoid(w['raw_mu']), params.mu_mask.astype(np.float64))
        sigma = tg.sigmoid(w['raw_sigma'])
        if params.family == 'ggdm_pred':
            pred_a = tg.add(1.0, tg.softplus(w['raw_pred_a']))
            pred_b = tg.softplus(w['raw_pred_b'])
        else:
            table = theorem1_marginals(mu, sigma, terminal, params.mu_mask)
    elif params.family == 'ddim':
        sigma = tg.mul(tg.sqrt(tg.sub(1.0, ab[:K - 1])), tg.sigmoid(w['raw_sigma']))
        mu_next, mu0 = ddim_rows(ab, sigma)
        mu = _two_slot_table(mu0, mu_next, K)
        table = MarginalTable.from_alpha_bar(ab)
    else:
        implied = vars_to_schedule(VarsParams(raw=w['raw_vars']))
        mu_next, mu0, var = ddpm_posterior(implied[:K - 1], implied[1:])
        mu = _two_slot_table(mu0, mu_next, K)
        sigma = tg.sqrt(_nonneg(var))
        table = MarginalTable.from_alpha_bar(ab)

    return SamplerCoefficients(K=K, mu=mu, sigma=sigma, mu_mask=params.mu_mask, timesteps=timesteps,
                               table=table, terminal=terminal, pred_a=pred_a, pred_b=pred_b, label=params.tag)


def predict_x0(x_t: TensorLike, eps_hat: TensorLike, table: Optional[MarginalTable], t: int,
               pred: Optional[Tuple[TensorLike, TensorLike]] = None) -> Tensor:
    """x0_hat = (x_t - sqrt(v_t) eps_hat) / a_t, or a_t x_t - b_t eps_hat with learned (a_t, b_t)."""
    if pred is not None:
        a, b = pred
        return tg.sub(tg.mul(a, x_t), tg.mul(b, eps_hat))
    a = table.marginal_a(t)
    if abs(a.item()) < SINGULAR_BELOW:
        raise SingularityError(f"marginal coefficient a_{t}={a.item()!r} is below {SINGULAR_BELOW}")
    return tg.div(tg.sub(x_t, tg.mul(tg.sqrt(table.marginal_v(t)), eps_hat)), a)
