"""Closed-form diffusion machinery.

Forward corruption, the noise-prediction parameterization of the
reverse process, the learned-variance interpolation, the three-term
training loss with its stop-gradient contract, ancestral sampling,
loss-aware timestep importance sampling, and parameter EMA.

Every function here accepts either numpy arrays or torch tensors for
the image-shaped arguments; the torch path keeps autograd intact so the
same code computes the training loss inside the graph. Timesteps are
1-based: t runs over 1..T and index 0 of the schedule tables is the
"clean" boundary (alpha_bar[0] = 1).
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import torch

from .imagekit import InvalidParameterError, ShapeError

SCHEDULE_LINEAR = "linear"
SCHEDULE_COSINE = "squared_cosine"
_COSINE_OFFSET = 0.008
_BETA_MAX = 0.999
_LINEAR_BETA_START = 1e-4
_LINEAR_BETA_END = 0.02


# ---------------------------------------------------------------------------
# small numpy/torch shim


def _is_torch(x) -> bool:
    return torch.is_tensor(x)


def _log(x):
    return torch.log(x) if _is_torch(x) else np.log(x)


def _exp(x):
    return torch.exp(x) if _is_torch(x) else np.exp(x)


def _clip01(x):
    return torch.clamp(x, 0.0, 1.0) if _is_torch(x) else np.clip(x, 0.0, 1.0)


def _detach(x):
    return x.detach() if _is_torch(x) else x


def _coef(table: np.ndarray, t, like):
    """Schedule constant(s) at timestep(s) t, shaped to broadcast against `like`.

    t may be a python int (returns a float) or an integer array/tensor of
    per-sample timesteps (returns a column shaped (B, 1, ..., 1)).
    """
    if isinstance(t, (int, np.integer)):
        return float(table[int(t)])
    idx = t.cpu().numpy() if _is_torch(t) else np.asarray(t)
    vals = np.asarray(table, dtype=np.float64)[idx]
    shape = (-1,) + (1,) * (like.ndim - 1)
    if _is_torch(like):
        return torch.as_tensor(vals, dtype=like.dtype, device=like.device).reshape(shape)
    return vals.reshape(shape)


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class ScheduleSpec:
    """Per-timestep diffusion constants, indexed 1..T (index 0 unused/boundary).

    beta_tilde is the variance of the true reverse posterior
    q(x_{t-1} | x_t, x_0); note beta_tilde[1] = 0 because alpha_bar[0] = 1.
    """

    kind: str
    T: int
    beta: np.ndarray        # (T+1,), beta[0] = nan
    alpha: np.ndarray       # (T+1,), alpha[0] = nan
    alpha_bar: np.ndarray   # (T+1,), alpha_bar[0] = 1
    beta_tilde: np.ndarray  # (T+1,), beta_tilde[0] = nan, beta_tilde[1] = 0

    def validate(self, rel_tol: float = 1e-12) -> None:
        b, abar = self.beta[1:], self.alpha_bar
        if not ((b > 0).all() and (b < 1).all()):
            raise InvalidParameterError("betas must lie in (0, 1)")
        if not (np.diff(abar) < 0).all():
            raise InvalidParameterError("alpha_bar must be strictly decreasing")
        prod = np.cumprod(self.alpha[1:])
        if not np.allclose(abar[1:], prod, rtol=rel_tol, atol=0):
            raise InvalidParameterError("alpha_bar is not the cumulative product of alpha")

    def log_beta_tilde_clipped(self, t: int) -> float:
        """log beta_tilde with the t=1 value replaced (beta_tilde[1] = 0)."""
        if t == 1:
            return math.log(self.beta_tilde[2]) if self.T >= 2 else math.log(self.beta[1])
        return math.log(self.beta_tilde[t])


def make_schedule(kind: str, T: int) -> ScheduleSpec:
    """Build a noise schedule.

    linear: betas evenly spaced between 1e-4 and 0.02 scaled by 1000/T
    (clamped below 0.999 so the (0, 1) invariant survives tiny T).
    squared_cosine: alpha_bar(t) = f(t)/f(0) with
    f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2), s = 0.008, betas clamped
    at 0.999 and alpha_bar recomputed from the clamped betas.
    """
    if T < 1:
        raise InvalidParameterError(f"T must be >= 1, got {T}")
    scale = 1000.0 / T
    if kind == SCHEDULE_LINEAR:
        betas = np.linspace(_LINEAR_BETA_START * scale, _LINEAR_BETA_END * scale, T)
        betas = np.clip(betas, None, _BETA_MAX)
    elif kind == SCHEDULE_COSINE:
        ts = np.arange(T + 1, dtype=np.float64)
        f = np.cos(((ts / T + _COSINE_OFFSET) / (1.0 + _COSINE_OFFSET)) * math.pi / 2.0) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], None, _BETA_MAX)
    else:
        raise InvalidParameterError(f"unknown schedule kind {kind!r}")

    beta = np.concatenate([[np.nan], betas])
    alpha = 1.0 - beta
    alpha_bar = np.empty(T + 1)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.cumprod(alpha[1:])
    beta_tilde = np.empty(T + 1)
    beta_tilde[0] = np.nan
    beta_tilde[1:] = beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
    spec = ScheduleSpec(kind=kind, T=T, beta=beta, alpha=alpha,
                        alpha_bar=alpha_bar, beta_tilde=beta_tilde)
    spec.validate()
    return spec


def schedule_to_csv(schedule: ScheduleSpec, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "beta", "alpha", "alpha_bar", "beta_tilde"])
        for t in range(1, schedule.T + 1):
            w.writerow([t, repr(float(schedule.beta[t])), repr(float(schedule.alpha[t])),
                        repr(float(schedule.alpha_bar[t])), repr(float(schedule.beta_tilde[t]))])


def _check_t(t, T: int) -> None:
    tmin = int(np.min(t.cpu().numpy() if _is_torch(t) else t)) if not isinstance(t, (int, np.integer)) else int(t)
    tmax = int(np.max(t.cpu().numpy() if _is_torch(t) else t)) if not isinstance(t, (int, np.integer)) else int(t)
    if tmin < 1 or tmax > T:
        raise IndexError(f"timestep {t} outside 1..{T}")


# ---------------------------------------------------------------------------
# closed-form forward / reverse quantities


def q_sample(x0, t, eps, schedule: ScheduleSpec):
    """Marginal forward sample: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    _check_t(t, schedule.T)
    abar = _coef(schedule.alpha_bar, t, x0)
    if isinstance(abar, float):
        return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps
    return abar ** 0.5 * x0 + (1.0 - abar) ** 0.5 * eps


def predict_x0(x_t, t, eps_hat, schedule: ScheduleSpec, clamp: bool = True):
    """Invert the forward marginal for a predicted noise field.

    Clamping to [0, 1] matches the normalized image domain and is used at
    sampling time; the training L1 term uses the unclamped value.
    """
    _check_t(t, schedule.T)
    abar = _coef(schedule.alpha_bar, t, x_t)
    if isinstance(abar, float):
        x0 = (x_t - math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(abar)
    else:
        x0 = (x_t - (1.0 - abar) ** 0.5 * eps_hat) / abar ** 0.5
    return _clip01(x0) if clamp else x0


def posterior_mean_variance(x0, x_t, t, schedule: ScheduleSpec):
    """Mean and variance of the true reverse posterior q(x_{t-1} | x_t, x_0)."""
    _check_t(t, schedule.T)
    # alpha_bar[t-1] looked up through a shifted table so batched t works
    shifted = np.empty_like(schedule.alpha_bar)
    shifted[1:] = schedule.alpha_bar[:-1]
    shifted[0] = np.nan
    abar_prev = _coef(shifted, t, x_t)
    abar = _coef(schedule.alpha_bar, t, x_t)
    beta = _coef(schedule.beta, t, x_t)
    alpha = _coef(schedule.alpha, t, x_t)
    if isinstance(abar, float):
        coef0 = math.sqrt(abar_prev) * beta / (1.0 - abar)
        coef1 = math.sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar)
    else:
        coef0 = abar_prev ** 0.5 * beta / (1.0 - abar)
        coef1 = alpha ** 0.5 * (1.0 - abar_prev) / (1.0 - abar)
    var = _coef(schedule.beta_tilde, t, x_t)
    return coef0 * x0 + coef1 * x_t, var


def mu_from_eps(x_t, t, eps_hat, schedule: ScheduleSpec):
    """Reverse-process mean implied by predicted noise:
    (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)."""
    _check_t(t, schedule.T)
    abar = _coef(schedule.alpha_bar, t, x_t)
    beta = _coef(schedule.beta, t, x_t)
    alpha = _coef(schedule.alpha, t, x_t)
    if isinstance(abar, float):
        return (x_t - beta / math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(alpha)
    return (x_t - beta / (1.0 - abar) ** 0.5 * eps_hat) / alpha ** 0.5


def _log_beta_tilde_table(schedule: ScheduleSpec) -> np.ndarray:
    """log beta_tilde with the degenerate t=1 entry clipped (see sigma_from_v)."""
    table = np.full(schedule.T + 1, np.nan)
    with np.errstate(divide="ignore"):
        table[1:] = np.log(schedule.beta_tilde[1:])
    table[1] = schedule.log_beta_tilde_clipped(1)
    return table


def sigma_from_v(v, t, schedule: ScheduleSpec):
    """Learned per-pixel variance: log-space interpolation between the
    forward beta_t (v = 1) and the posterior beta_tilde_t (v = 0).

    beta_tilde[1] is exactly 0, so at t = 1 the lower endpoint is clipped
    to beta_tilde[2] (beta[1] when T = 1) to keep the interpolation finite.
    """
    _check_t(t, schedule.T)
    log_lo_table = _log_beta_tilde_table(schedule)
    log_hi = _coef(schedule.beta, t, v)
    log_lo = _coef(log_lo_table, t, v)
    if isinstance(log_hi, float):
        log_hi = math.log(log_hi)
    else:
        log_hi = _log(log_hi)
    return _exp(v * log_hi + (1.0 - v) * log_lo)


def kl_gaussian(mu_q, var_q, mu_p, var_p):
    """Pointwise KL(N(mu_q, var_q) || N(mu_p, var_p))."""
    bad = False
    for v in (var_q, var_p):
        if isinstance(v, (int, float)):
            bad = bad or v <= 0
        else:
            arr = v.detach() if _is_torch(v) else v
            bad = bad or bool((arr <= 0).any())
    if bad:
        raise InvalidParameterError("variances must be positive")
    return 0.5 * (var_q / var_p + (mu_p - mu_q) ** 2 / var_p - 1.0 + _log(var_p / var_q))


def gaussian_nll(x, mu, var):
    """Pointwise negative log-likelihood of x under N(mu, var), in nats."""
    return 0.5 * (_log(2.0 * math.pi * var) + (x - mu) ** 2 / var)


# ---------------------------------------------------------------------------
# training loss


@dataclass(frozen=True)
class LossWeights:
    lambda_vb: float = 1.0
    lambda_l1: float = 0.03

    def __post_init__(self):
        if self.lambda_vb < 0 or self.lambda_l1 < 0:
            raise InvalidParameterError("loss weights must be >= 0")


@dataclass
class DenoiserOutput:
    """Predicted noise field and variance-interpolation field for one input."""

    eps_hat: object  # array or tensor, same shape as the sample
    v: object        # same shape, values in [0, 1]


def _flat_mean(x, batched: bool):
    """Mean over pixels; per-sample vector if batched, scalar otherwise."""
    if batched:
        return x.reshape(x.shape[0], -1).mean(axis=-1) if not _is_torch(x) \
            else x.reshape(x.shape[0], -1).mean(dim=-1)
    return x.mean()


def diffusion_loss_terms(out: DenoiserOutput, x0, x_t, t, eps,
                         weights: LossWeights, schedule: ScheduleSpec,
                         reduce: str = "mean", sg_mu_override=None):
    """Three-term loss: noise MSE + weighted variational bound + weighted L1.

    The variational-bound term compares the true posterior against
    N(sg(mu), sigma(v)); the stop-gradient on the mean makes the term
    supervise only the variance head. At t = 1 the term is the Gaussian
    negative log-likelihood of x0 under the model transition.

    reduce="mean" returns scalars; reduce="none" returns one value per
    sample of a batched input. `sg_mu_override` substitutes a fixed mean
    inside the vb term; the finite-difference tests use it to pin the
    stop-gradient branch at the base point.
    """
    eps_hat, v = out.eps_hat, out.v
    if eps_hat.shape != x_t.shape or v.shape != x_t.shape:
        raise ShapeError("denoiser output shape differs from sample shape")
    batched = not isinstance(t, (int, np.integer))

    term_mse = _flat_mean((eps - eps_hat) ** 2, batched)

    mu_q, var_q = posterior_mean_variance(x0, x_t, t, schedule)
    if sg_mu_override is not None:
        mu_p = sg_mu_override
    else:
        mu_p = _detach(mu_from_eps(x_t, t, eps_hat, schedule))
    var_p = sigma_from_v(v, t, schedule)
    if batched:
        is_first = (np.asarray(t.cpu() if _is_torch(t) else t) == 1)
        is_first = is_first.reshape((-1,) + (1,) * (x_t.ndim - 1))
        # beta_tilde[1] = 0; substitute a dummy positive variance for the
        # t = 1 rows of the KL branch, whose values are masked out below
        # (keeps the unselected branch finite so gradients stay clean).
        if _is_torch(x_t):
            first_t = torch.as_tensor(is_first, device=x_t.device)
            var_q = torch.where(first_t, torch.ones_like(var_q), var_q)
        else:
            var_q = np.where(is_first, 1.0, var_q)
        kl = kl_gaussian(mu_q, var_q, mu_p, var_p)
        nll = gaussian_nll(x0, mu_p, var_p)
        if _is_torch(x_t):
            vb_px = torch.where(first_t, nll, kl)
        else:
            vb_px = np.where(is_first, nll, kl)
        term_vb = _flat_mean(vb_px, batched)
    else:
        if int(t) == 1:
            term_vb = _flat_mean(gaussian_nll(x0, mu_p, var_p), batched)
        else:
            term_vb = _flat_mean(kl_gaussian(mu_q, var_q, mu_p, var_p), batched)

    x0_hat = predict_x0(x_t, t, eps_hat, schedule, clamp=False)
    term_l1 = _flat_mean(abs(x0_hat - x0), batched)

    total = term_mse + weights.lambda_vb * term_vb + weights.lambda_l1 * term_l1
    if reduce == "mean" and batched:
        total, term_mse, term_vb, term_l1 = (x.mean() for x in (total, term_mse, term_vb, term_l1))
    return total, term_mse, term_vb, term_l1


def diffusion_loss(out: DenoiserOutput, x0, x_t, t, eps,
                   weights: LossWeights, schedule: ScheduleSpec):
    """Scalar loss terms (total, mse, vb, l1). See diffusion_loss_terms."""
    return diffusion_loss_terms(out, x0, x_t, t, eps, weights, schedule, reduce="mean")


# ---------------------------------------------------------------------------
# sampling


def p_sample_step(x_t, t: int, out: DenoiserOutput, schedule: ScheduleSpec,
                  rng: np.random.Generator):
    """One ancestral step: x_{t-1} = mu(eps_hat) + sqrt(sigma(v)) z.

    No noise is added at the terminal step t = 1.
    """
    _check_t(t, schedule.T)
    mu = mu_from_eps(x_t, t, out.eps_hat, schedule)
    if t == 1:
        return mu
    var = sigma_from_v(out.v, t, schedule)
    z = rng.standard_normal(size=np.shape(x_t))
    if _is_torch(x_t):
        z = torch.as_tensor(z, dtype=x_t.dtype, device=x_t.device)
    return mu + var ** 0.5 * z


def sample_loop(denoise_fn, shape: tuple[int, ...], schedule: ScheduleSpec,
                rng: np.random.Generator, clip_denoised: bool = True) -> np.ndarray:
    """Full reverse trajectory from pure noise; returns an array in [0, 1].

    denoise_fn(x_t, t) -> DenoiserOutput. With clip_denoised the mean is
    computed through the posterior of the clamped x0 prediction, which is
    identical to mu_from_eps whenever the prediction already lies in
    [0, 1] and keeps early, badly-scaled predictions bounded.
    """
    x = rng.standard_normal(size=shape)
    for t in range(schedule.T, 0, -1):
        out = denoise_fn(x, t)
        if clip_denoised:
            x0_hat = predict_x0(x, t, out.eps_hat, schedule, clamp=True)
            mu, _ = posterior_mean_variance(x0_hat, x, t, schedule)
            if t == 1:
                x = mu
            else:
                var = sigma_from_v(out.v, t, schedule)
                x = mu + var ** 0.5 * rng.standard_normal(size=shape)
        else:
            x = p_sample_step(x, t, out, schedule, rng)
    return np.clip(x, 0.0, 1.0)


# ---------------------------------------------------------------------------
# loss-aware timestep importance sampling


HISTORY_LEN = 10


@dataclass
class ImportanceState:
    """Per-timestep ring buffers of recent losses.

    Until every timestep has a full history, sampling stays uniform with
    unit weight; afterwards p_t tracks the square root of the historical
    second moment of the loss at t.
    """

    T: int
    history: list = field(default_factory=list)

    def __post_init__(self):
        if not self.history:
            self.history = [deque(maxlen=HISTORY_LEN) for _ in range(self.T + 1)]

    @property
    def warmed_up(self) -> bool:
        return all(len(self.history[t]) == HISTORY_LEN for t in range(1, self.T + 1))

    def record(self, t: int, loss: float) -> None:
        if not (1 <= t <= self.T):
            raise IndexError(f"timestep {t} outside 1..{self.T}")
        self.history[t].append(float(loss))

    def probabilities(self) -> np.ndarray:
        """Sampling distribution over t = 1..T (uniform during warm-up)."""
        if not self.warmed_up:
            return np.full(self.T, 1.0 / self.T)
        w = np.array([math.sqrt(np.mean(np.square(self.history[t])))
                      for t in range(1, self.T + 1)])
        total = w.sum()
        if total <= 0:
            return np.full(self.T, 1.0 / self.T)
        return w / total


def importance_sample_t(state: ImportanceState, rng: np.random.Generator) -> tuple[int, float]:
    """Draw a timestep and the unbiasedness weight 1 / (T * p_t)."""
    if not state.warmed_up:
        t = int(rng.integers(1, state.T + 1))
        return t, 1.0
    p = state.probabilities()
    t = int(rng.choice(state.T, p=p)) + 1
    return t, 1.0 / (state.T * p[t - 1])


# ---------------------------------------------------------------------------
# parameter EMA


@dataclass
class EmaState:
    decay: float
    shadow: np.ndarray

    def __post_init__(self):
        if not (0.0 <= self.decay < 1.0):
            raise InvalidParameterError(f"EMA decay must be in [0, 1), got {self.decay}")
        self.shadow = np.asarray(self.shadow, dtype=np.float64).copy()


def ema_update(state: EmaState, params: np.ndarray) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * params, in place."""
    params = np.asarray(params, dtype=np.float64)
    if params.shape != state.shadow.shape:
        raise ShapeError(f"EMA shadow shape {state.shadow.shape} vs params {params.shape}")
    state.shadow *= state.decay
    state.shadow += (1.0 - state.decay) * params
    return state
