"""
Base DDPM machinery: noise schedules, forward-process marginals, the residual
MLP noise predictor with sinusoidal time embeddings, and its pre-training.
"""
from __future__ import annotations
import hashlib
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Union

import numpy as np
from scipy import special
from scipy.interpolate import PchipInterpolator
from tqdm import tqdm

from utils import tensorgrad as tg
from utils.errors import ScheduleError, TensorShapeError, TrainingDivergedError
from utils.optim import AdamState, adam_step, clip_by_global_norm, warmup_lr
from utils.tensorgrad import Tape, Tensor

logger = logging.getLogger(__name__)

# frequency ladder applied to t/T in [0, 1]: MAX_FREQ down to MAX_FREQ / MAX_PERIOD
MAX_FREQ = 1000.0
MAX_PERIOD = 10000.0

WEIGHTINGS = ('simple', 'max1snr')


@dataclass
class NoiseSchedule:
    """Per-step beta_t and alpha_bar_t for t = 1..T (alpha_bar_0 = 1 by convention)."""
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    kind: str = 'linear'

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if self.beta.shape != (self.T,) or self.alpha_bar.shape != (self.T,):
            raise ScheduleError(f"schedule arrays must have length T={self.T}")
        if np.any(self.beta <= 0) or np.any(self.beta >= 1):
            raise ScheduleError("every beta_t must lie in (0, 1)")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ScheduleError("alpha_bar must be strictly decreasing")

    def alpha_bar_at(self, t: int) -> float:
        if t < 0 or t > self.T:
            raise ScheduleError(f"timestep {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    @property
    def logsnr(self) -> np.ndarray:
        return np.log(self.alpha_bar) - np.log1p(-self.alpha_bar)

    @property
    def snr(self) -> np.ndarray:
        return self.alpha_bar / (1.0 - self.alpha_bar)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.kind.encode('utf-8'))
        h.update(str(int(self.T)).encode('utf-8'))
        h.update(np.ascontiguousarray(self.alpha_bar, dtype='<f8').tobytes())
        return h.hexdigest()[:16]

    @cached_property
    def logsnr_curve(self) -> PchipInterpolator:
        """Monotone cubic log-SNR over continuous t in [0, T]."""
        ls = self.logsnr
        knots = np.arange(0, self.T + 1, dtype=np.float64)
        first = 2.0 * ls[0] - ls[1] if self.T > 1 else ls[0] + 1.0
        return PchipInterpolator(knots, np.concatenate([[first], ls]), extrapolate=True)

    def alpha_bar_continuous(self, t: Union[Tensor, float, np.ndarray]) -> Tensor:
        """alpha_bar at non-integer times, differentiable in t."""
        return tg.sigmoid(tg.interp(tg.as_tensor(t), self.logsnr_curve))


def _from_alpha_bar(alpha_bar: np.ndarray, kind: str) -> NoiseSchedule:
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    beta = 1.0 - alpha_bar / prev
    return NoiseSchedule(T=len(alpha_bar), beta=beta, alpha_bar=alpha_bar, kind=kind)


def make_linear_beta_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError(f"T must be positive, got {T}")
    if not (0 < beta_min <= beta_max < 1):
        raise ScheduleError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    beta = np.linspace(beta_min, beta_max, T) if T > 1 else np.array([beta_min], dtype=np.float64)
    return NoiseSchedule(T=T, beta=beta, alpha_bar=np.cumprod(1.0 - beta), kind='linear')


def make_cosine_logsnr_schedule(T: int, logsnr_max: float = 20.0, logsnr_min: float = -20.0) -> NoiseSchedule:
    """log-SNR falls from logsnr_max at t=1 to logsnr_min at t=T along a half cosine."""
    if logsnr_max <= logsnr_min:
        raise ScheduleError(f"logsnr_max ({logsnr_max}) must exceed logsnr_min ({logsnr_min})")
    if T < 2:
        raise ScheduleError("cosine log-SNR schedule needs T >= 2")
    u = np.arange(T, dtype=np.float64) / (T - 1)
    logsnr = logsnr_min + (logsnr_max - logsnr_min) * 0.5 * (1.0 + np.cos(math.pi * u))
    return _from_alpha_bar(special.expit(logsnr), kind='cosine')


def make_schedule(kind: str, T: int, *, beta_min: float = 1e-4, beta_max: float = 0.02,
                  logsnr_max: float = 20.0, logsnr_min: float = -20.0) -> NoiseSchedule:
    if kind == 'linear':
        return make_linear_beta_schedule(T, beta_min, beta_max)
    if kind == 'cosine':
        return make_cosine_logsnr_schedule(T, logsnr_max, logsnr_min)
    raise ScheduleError(f"unknown schedule kind '{kind}' (expected linear or cosine)")


def forward_marginal_sample(schedule: NoiseSchedule, x0, t: int, noise) -> Tensor:
    """Draw from q(x_t | x_0) = N(sqrt(ab_t) x0, (1 - ab_t) I) by reparametrization."""
    ab = schedule.alpha_bar_at(t)
    return tg.gaussian_reparam(tg.scale(x0, math.sqrt(ab)), math.sqrt(1.0 - ab), noise)


def time_embedding(t_continuous, dim: int, T: int) -> Tensor:
    """Half sines, half cosines of t/T over geometrically spaced frequencies.

    `t_continuous` may be a float, an (n,) array or an (n, 1) Tensor; the
    result has one row per time.
    """
    if dim % 2:
        raise TensorShapeError('time_embedding', (dim,), detail='dim must be even')
    half = dim // 2
    freqs = MAX_FREQ * np.exp(-math.log(MAX_PERIOD) * np.arange(half) / half)
    t = tg.as_tensor(t_continuous)
    if t.ndim < 2:
        t = tg.reshape(t, (-1, 1))
    angles = tg.mul(tg.scale(t, 1.0 / T), freqs[None, :])
    return tg.concat([tg.sin(angles), tg.cos(angles)], axis=1)


@dataclass
class ScoreNetwork:
    """Residual MLP noise predictor eps_theta(x, t)."""
    params: Dict[str, np.ndarray]
    d: int
    T: int
    hidden: int = 128
    depth: int = 3
    time_dim: int = 32

    def __post_init__(self):
        self.params = {k: tg.freeze(v) for k, v in self.params.items()}

    @classmethod
    def init(cls, d: int, T: int, *, hidden: int = 128, depth: int = 3, time_dim: int = 32,
             seed: int = 0) -> 'ScoreNetwork':
        rng = np.random.default_rng(seed)
        p = {
            'in_x': rng.standard_normal((d, hidden)) / math.sqrt(d),
            'in_t': rng.standard_normal((time_dim, hidden)) / math.sqrt(time_dim),
            'in_b': np.zeros(hidden),
        }
        for i in range(depth):
            p[f'h{i}_w'] = rng.standard_normal((hidden, hidden)) / math.sqrt(hidden)
            p[f'h{i}_b'] = np.zeros(hidden)
        p['out_w'] = np.zeros((hidden, d))
        p['out_b'] = np.zeros(d)
        return cls(params=p, d=d, T=T, hidden=hidden, depth=depth, time_dim=time_dim)

    def with_params(self, params: Dict[str, np.ndarray]) -> 'ScoreNetwork':
        return ScoreNetwork(params=dict(params), d=self.d, T=self.T, hidden=self.hidden,
                            depth=self.depth, time_dim=self.time_dim)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode('utf-8'))
            h.update(np.ascontiguousarray(self.params[name], dtype='<f8').tobytes())
        return h.hexdigest()


def predict_eps(network: ScoreNetwork, x, t_continuous, weights: Optional[Dict[str, Tensor]] = None) -> Tensor:
    """Forward pass. Pass tape variables as `weights` to differentiate w.r.t. them."""
    w = weights if weights is not None else network.params
    x = tg.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != network.d:
        raise TensorShapeError('predict_eps', x.shape, detail=f'expected (n, {network.d})')
    emb = time_embedding(t_continuous, network.time_dim, network.T)
    # first layer on concat([x, emb]) written blockwise so emb may hold a single row
    h = tg.add(tg.add(tg.matmul(x, w['in_x']), tg.matmul(emb, w['in_t'])), w['in_b'])
    for i in range(network.depth):
        h = tg.add(h, tg.silu(tg.add(tg.matmul(h, w[f'h{i}_w']), w[f'h{i}_b'])))
    return tg.add(tg.matmul(tg.silu(h), w['out_w']), w['out_b'])


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    steps: int = 4000
    weighting: str = 'simple'
    warmup_steps: int = 100
    grad_clip: float = 1.0
    ema_decay: float = 0.9999
    log_every: int = 500

    def __post_init__(self):
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}, got '{self.weighting}'")
        for name in ('lr', 'batch_size', 'ema_decay'):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")


@dataclass
class TrainResult:
    network: ScoreNetwork
    ema: ScoreNetwork
    losses: List[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float('nan')


def ddpm_loss(network: ScoreNetwork, schedule: NoiseSchedule, x0: np.ndarray, t: np.ndarray,
              noise: np.ndarray, weighting: str = 'simple',
              weights: Optional[Dict[str, Tensor]] = None) -> Tensor:
    """Batch mean of w_t * ||eps - eps_theta(x_t, t)||^2 for integer t in 1..T."""
    t = np.asarray(t, dtype=np.int64)
    ab = schedule.alpha_bar[t - 1][:, None]
    xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise
    eps_hat = predict_eps(network, xt, t[:, None].astype(np.float64), weights)
    per_example = tg.sum_(tg.square(tg.sub(eps_hat, noise)), axis=1)
    if weighting == 'max1snr':
        per_example = tg.mul(per_example, np.maximum(1.0, schedule.snr[t - 1]))
    return tg.mean(per_example)


def train_ddpm(network: ScoreNetwork, schedule: NoiseSchedule, dataset: np.ndarray, config: TrainConfig,
               *, seed: int = 0, progress: bool = True) -> TrainResult:
    """Minimise the (optionally SNR-reweighted) L_simple objective with Adam and keep an EMA copy."""
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != network.d:
        raise TensorShapeError('train_ddpm', data.shape, detail=f'dataset must be (n, {network.d})')
    rng = np.random.default_rng(seed)
    state = AdamState(lr=config.lr)
    params = {k: np.array(v) for k, v in network.params.items()}
    ema = {k: np.array(v) for k, v in params.items()}
    losses: List[float] = []

    bar = tqdm(range(1, config.steps + 1), desc='train', disable=not progress, leave=False)
    for step in bar:
        idx = rng.integers(0, len(data), size=config.batch_size)
        t = rng.integers(1, schedule.T + 1, size=config.batch_size)
        noise = rng.standard_normal((config.batch_size, network.d))
        with Tape() as tape:
            w = {k: tape.variable(v, name=k) for k, v in params.items()}
            loss = ddpm_loss(network, schedule, data[idx], t, noise, config.weighting, weights=w)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergedError(step, value, last_good=network.with_params(params))
        grads, norm = clip_by_global_norm(tape.backward(loss).by_name(), config.grad_clip)
        params = adam_step(state, grads, params, lr=warmup_lr(config.lr, step, config.warmup_steps))
        decay = min(config.ema_decay, (1.0 + step) / (10.0 + step))
        ema = {k: decay * ema[k] + (1.0 - decay) * params[k] for k in params}
        losses.append(value)
        if config.log_every and step % config.log_every == 0:
            logger.info("train step %d loss %.5f grad_norm %.3f", step, value, norm)
            bar.set_postfix(loss=f"{value:.4f}")

    return TrainResult(network=network.with_params(params), ema=network.with_params(ema), losses=losses)
