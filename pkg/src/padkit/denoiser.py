"""Desk-scale conditional denoising network and its two-phase trainer.

The network is a small two-level U-Net in float64: channel-concatenated
conditioning, one self-attention block at the coarse level, sinusoidal
timestep embeddings added per block, group normalization with 4 groups,
and a two-convolution adapter head that emits the predicted noise (raw)
and the variance-interpolation field (logistic-squashed).

Parameters live in a flat float64 vector with a layer manifest so that
the optimizer, EMA, freezing, checkpoints, and finite-difference tests
all see one single array. torch supplies the tensor ops and autograd;
gradients are exported back to the flat vector every step.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import (
    DenoiserOutput,
    EmaState,
    ImportanceState,
    LossWeights,
    SCHEDULE_COSINE,
    SCHEDULE_LINEAR,
    ScheduleSpec,
    diffusion_loss_terms,
    ema_update,
    importance_sample_t,
    make_schedule,
    q_sample,
    sample_loop,
)
from .imagekit import InvalidParameterError, ShapeError

PHASE_BASE = "base"
PHASE_SUPER = "super_res"

# manifest layer kinds
KIND_CONV = "conv"
KIND_BIAS = "bias"
KIND_NORM_GAIN = "norm_gain"
KIND_ATTN = "attn_proj"
KIND_TIME = "time_embed"


def thread_cap() -> int:
    """Worker cap from PADKIT_THREADS (0 or unset = automatic)."""
    try:
        return max(0, int(os.environ.get("PADKIT_THREADS", "0")))
    except ValueError:
        return 0


def compute_threads() -> int:
    """Intra-op thread count for the desk-scale nets.

    The networks are small enough that torch's intra-op parallelism is
    pure overhead, so "auto" means one thread; PADKIT_THREADS > 0
    requests more explicitly.
    """
    cap = thread_cap()
    return cap if cap > 0 else 1


_PRECISIONS = {"f64": torch.float64, "f32": torch.float32}


@dataclass(frozen=True)
class ArchConfig:
    base_channels: int = 16
    mid_channels: int = 32
    emb_dim: int = 32
    groups: int = 4
    sr_factor: int = 2

    def __post_init__(self):
        for ch in (self.base_channels, self.mid_channels):
            if ch % self.groups:
                raise InvalidParameterError("channel counts must be divisible by the group count")


class _SinusoidalEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
        args = t[:, None] * freqs[None, :]
        return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class _ResBlock(nn.Module):
    """conv-norm(+time)-silu-conv-norm with a learned or identity skip."""

    def __init__(self, cin: int, cout: int, emb_dim: int, groups: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(groups, cout)
        self.emb_proj = nn.Linear(emb_dim, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.norm1(self.conv1(x))
        h = F.silu(h + self.emb_proj(emb)[:, :, None, None])
        h = self.norm2(self.conv2(h))
        return F.silu(h + self.skip(x))


class _SelfAttention(nn.Module):
    """Single-head spatial self-attention with a residual connection."""

    def __init__(self, ch: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(dim=1)
        scores = torch.einsum("bcn,bcm->bnm", q, k) / math.sqrt(c)
        attn = torch.softmax(scores, dim=-1)
        out = torch.einsum("bnm,bcm->bcn", attn, v).reshape(b, c, h, w)
        return x + self.proj(out)


class _DenoiserNet(nn.Module):
    """Two resolution levels, stride-2 down/up, attention at the bottleneck."""

    def __init__(self, in_channels: int, arch: ArchConfig):
        super().__init__()
        w0, w1, emb = arch.base_channels, arch.mid_channels, arch.emb_dim
        self.embed = _SinusoidalEmbedding(emb)
        self.time_mlp = nn.Sequential(nn.Linear(emb, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.in_block = _ResBlock(in_channels, w0, emb, arch.groups)
        self.res0 = _ResBlock(w0, w0, emb, arch.groups)
        self.down = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.res1a = _ResBlock(w1, w1, emb, arch.groups)
        self.attn = _SelfAttention(w1, arch.groups)
        self.res1b = _ResBlock(w1, w1, emb, arch.groups)
        self.up = nn.ConvTranspose2d(w1, w0, 4, stride=2, padding=1)
        self.merge = _ResBlock(2 * w0, w0, emb, arch.groups)
        self.head_conv1 = nn.Conv2d(w0, w0, 3, padding=1)
        self.head_conv2 = nn.Conv2d(w0, 2, 3, padding=1)

    def forward(self, x, t):
        emb = self.time_mlp(self.embed(t))
        h0 = self.in_block(x, emb)
        h0 = self.res0(h0, emb)
        h1 = self.down(h0)
        h1 = self.res1a(h1, emb)
        h1 = self.attn(h1)
        h1 = self.res1b(h1, emb)
        u = self.up(h1)
        m = self.merge(torch.cat([u, h0], dim=1), emb)
        out = self.head_conv2(F.silu(self.head_conv1(m)))
        return out[:, 0], torch.sigmoid(out[:, 1])


@dataclass(frozen=True)
class LayerEntry:
    name: str
    shape: tuple[int, ...]
    offset: int
    size: int
    kind: str
    frozen_in_warmup: bool


_DECODER_HALF_PREFIXES = ("up.", "merge.")


def _param_kind(name: str) -> str:
    if "emb_proj" in name or "time_mlp" in name:
        return KIND_BIAS if name.endswith("bias") else KIND_TIME
    if "norm" in name:
        return KIND_NORM_GAIN if name.endswith("weight") else KIND_BIAS
    if "attn." in name:
        return KIND_BIAS if name.endswith("bias") else KIND_ATTN
    return KIND_BIAS if name.endswith("bias") else KIND_CONV


class DenoiserModel:
    """A network plus its flat parameter vector and layer manifest."""

    def __init__(self, phase: str, arch: ArchConfig | None = None, seed: int = 0,
                 dtype: torch.dtype = torch.float64):
        if phase not in (PHASE_BASE, PHASE_SUPER):
            raise InvalidParameterError(f"unknown phase {phase!r}")
        self.phase = phase
        self.arch = arch or ArchConfig()
        self.dtype = dtype
        in_channels = 2 if phase == PHASE_BASE else 3
        self.net = _DenoiserNet(in_channels, self.arch).to(dtype)
        for p in self.net.parameters():
            p.requires_grad_(True)
        self.manifest = self._build_manifest()
        self.n_params = sum(e.size for e in self.manifest)
        self._init_params(seed)

    def _build_manifest(self) -> list[LayerEntry]:
        entries, offset = [], 0
        for name, p in self.net.named_parameters():
            size = p.numel()
            entries.append(LayerEntry(
                name=name, shape=tuple(p.shape), offset=offset, size=size,
                kind=_param_kind(name),
                frozen_in_warmup=name.startswith(_DECODER_HALF_PREFIXES),
            ))
            offset += size
        return entries

    def _init_params(self, seed: int) -> None:
        """Zero-mean uniform fan-in init; norm gains 1, biases 0, final head 0."""
        rng = np.random.default_rng(seed)
        with torch.no_grad():
            for name, p in self.net.named_parameters():
                kind = _param_kind(name)
                if name.startswith("head_conv2"):
                    p.zero_()
                elif kind == KIND_NORM_GAIN:
                    p.fill_(1.0)
                elif kind == KIND_BIAS:
                    p.zero_()
                else:
                    fan_in = p.shape[1] * (p.shape[2] * p.shape[3] if p.ndim == 4 else 1) \
                        if p.ndim > 1 else p.shape[0]
                    bound = 1.0 / math.sqrt(fan_in)
                    vals = rng.uniform(-bound, bound, size=tuple(p.shape))
                    p.copy_(torch.from_numpy(vals))

    # flat-vector view -----------------------------------------------------

    def get_vector(self) -> np.ndarray:
        out = np.empty(self.n_params, dtype=np.float64)
        for e, p in zip(self.manifest, self.net.parameters()):
            out[e.offset:e.offset + e.size] = p.detach().numpy().ravel()
        return out

    def set_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ShapeError(f"expected vector of length {self.n_params}, got {vec.shape}")
        with torch.no_grad():
            for e, p in zip(self.manifest, self.net.parameters()):
                p.copy_(torch.from_numpy(vec[e.offset:e.offset + e.size].reshape(e.shape)))

    def grad_vector(self) -> np.ndarray:
        out = np.zeros(self.n_params, dtype=np.float64)
        for e, p in zip(self.manifest, self.net.parameters()):
            if p.grad is not None:
                out[e.offset:e.offset + e.size] = p.grad.numpy().ravel()
        return out

    def frozen_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_params, dtype=bool)
        for e in self.manifest:
            if e.frozen_in_warmup:
                mask[e.offset:e.offset + e.size] = True
        return mask

    def kind_indices(self, kind: str) -> np.ndarray:
        idx = [np.arange(e.offset, e.offset + e.size) for e in self.manifest if e.kind == kind]
        return np.concatenate(idx) if idx else np.empty(0, dtype=int)

    # forward --------------------------------------------------------------

    def _assemble_input(self, x_t, cond, lowres):
        x_t = torch.as_tensor(x_t, dtype=self.dtype)
        cond = torch.as_tensor(cond, dtype=self.dtype)
        if x_t.shape != cond.shape:
            raise ShapeError("condition shape differs from sample shape")
        chans = [x_t[:, None], cond[:, None]]
        if self.phase == PHASE_SUPER:
            if lowres is None:
                raise ShapeError("super-resolution phase requires a low-res image")
            lowres = torch.as_tensor(lowres, dtype=self.dtype)
            f = self.arch.sr_factor
            up = lowres.repeat_interleave(f, dim=-2).repeat_interleave(f, dim=-1)
            if up.shape != x_t.shape:
                raise ShapeError(f"upsampled low-res shape {tuple(up.shape)} "
                                 f"differs from sample shape {tuple(x_t.shape)}")
            chans.append(up[:, None])
        elif lowres is not None:
            raise ShapeError("base phase takes no low-res input")
        return torch.cat(chans, dim=1)

    def forward_batch(self, x_t, t, cond, lowres=None):
        """Batched forward pass; returns torch tensors (eps_hat, v) of (B, H, W)."""
        inp = self._assemble_input(x_t, cond, lowres)
        t_vec = torch.as_tensor(np.asarray(t, dtype=np.float64).reshape(-1), dtype=self.dtype)
        if t_vec.numel() == 1 and inp.shape[0] > 1:
            t_vec = t_vec.expand(inp.shape[0])
        return self.net(inp, t_vec)


def denoiser_forward(model: DenoiserModel, x_t: np.ndarray, t: int,
                     condition: np.ndarray, lowres: np.ndarray | None = None) -> DenoiserOutput:
    """Single-sample forward pass with numpy in and numpy out."""
    with torch.no_grad():
        eps_hat, v = model.forward_batch(
            np.asarray(x_t, dtype=np.float64)[None],
            np.array([t], dtype=np.float64),
            np.asarray(condition, dtype=np.float64)[None],
            None if lowres is None else np.asarray(lowres, dtype=np.float64)[None],
        )
    return DenoiserOutput(eps_hat=eps_hat[0].numpy(), v=v[0].numpy())


@dataclass
class TrainBatch:
    """One training minibatch in normalized [0, 1] space."""

    x0: np.ndarray                 # (B, H, W) clean targets for the phase
    cond: np.ndarray               # (B, H, W) uniform activity maps
    t: np.ndarray                  # (B,) timesteps in 1..T
    eps: np.ndarray                # (B, H, W) forward noise
    lowres: np.ndarray | None = None  # (B, h, w) for the super-res phase


def batch_loss(model: DenoiserModel, batch: TrainBatch, weights: LossWeights,
               schedule: ScheduleSpec, sample_weights: np.ndarray | None = None,
               sg_mu_override=None):
    """Loss of one batch inside the autograd graph.

    Returns (objective, per_sample_total, terms) where `objective` is the
    importance-weighted scalar used for backprop and `terms` are the
    unweighted scalar (mse, vb, l1) means for tracing.
    """
    x0 = torch.as_tensor(batch.x0, dtype=model.dtype)
    eps = torch.as_tensor(batch.eps, dtype=model.dtype)
    x_t = q_sample(x0, batch.t, eps, schedule)
    eps_hat, v = model.forward_batch(x_t, batch.t.astype(np.float64), batch.cond, batch.lowres)
    out = DenoiserOutput(eps_hat=eps_hat, v=v)
    total, mse, vb, l1 = diffusion_loss_terms(
        out, x0, x_t, batch.t, eps, weights, schedule,
        reduce="none", sg_mu_override=sg_mu_override)
    if sample_weights is None:
        objective = total.mean()
    else:
        w = torch.as_tensor(sample_weights, dtype=model.dtype)
        objective = (w * total).mean()
    return objective, total, (mse.mean(), vb.mean(), l1.mean())


def denoiser_backward(model: DenoiserModel, batch: TrainBatch, weights: LossWeights,
                      schedule: ScheduleSpec, freeze_active: bool = False,
                      sample_weights: np.ndarray | None = None):
    """Gradient of the batch loss as a flat vector (frozen layers zeroed)."""
    model.net.zero_grad(set_to_none=True)
    objective, total, terms = batch_loss(model, batch, weights, schedule, sample_weights)
    objective.backward()
    grad = model.grad_vector()
    if freeze_active:
        grad[model.frozen_mask()] = 0.0
    return grad, objective.item(), total.detach().numpy(), tuple(x.item() for x in terms)


# ---------------------------------------------------------------------------
# AdamW on flat vectors


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @staticmethod
    def for_size(n: int, weight_decay: float = 0.0) -> "OptimizerState":
        return OptimizerState(m=np.zeros(n), v=np.zeros(n), weight_decay=weight_decay)


def adamw_step(params: np.ndarray, grads: np.ndarray, opt: OptimizerState,
               lr: float, frozen: np.ndarray | None = None) -> np.ndarray:
    """One decoupled-weight-decay Adam update; returns the new parameters.

    Frozen entries receive no update at all (moments included).
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != opt.m.shape:
        raise ShapeError("parameter/gradient/moment shapes differ")
    opt.step += 1
    m_new = opt.beta1 * opt.m + (1.0 - opt.beta1) * grads
    v_new = opt.beta2 * opt.v + (1.0 - opt.beta2) * grads ** 2
    m_hat = m_new / (1.0 - opt.beta1 ** opt.step)
    v_hat = v_new / (1.0 - opt.beta2 ** opt.step)
    update = lr * (m_hat / (np.sqrt(v_hat) + opt.eps) + opt.weight_decay * params)
    new_params = params - update
    if frozen is not None:
        keep = np.asarray(frozen, dtype=bool)
        new_params[keep] = params[keep]
        m_new[keep] = opt.m[keep]
        v_new[keep] = opt.v[keep]
    opt.m, opt.v = m_new, v_new
    return new_params


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    phase: str
    iterations: int
    initial_lr: float
    freeze_iters: int = 0
    batch_size: int = 8
    weights: LossWeights = field(default_factory=LossWeights)
    schedule_kind: str = SCHEDULE_COSINE
    T: int = 200
    ema_decay: float = 0.9999
    seed: int = 0
    importance_sampling: bool = True
    weight_decay: float = 0.0
    deterministic: bool = False
    precision: str = "f32"
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        if self.phase not in (PHASE_BASE, PHASE_SUPER):
            raise InvalidParameterError(f"unknown phase {self.phase!r}")
        if not (self.iterations >= self.freeze_iters >= 0):
            raise InvalidParameterError("need iterations >= freeze_iters >= 0")
        if self.batch_size < 1 or self.initial_lr <= 0:
            raise InvalidParameterError("batch_size must be >= 1 and initial_lr > 0")
        if self.precision not in _PRECISIONS:
            raise InvalidParameterError(f"precision must be one of {sorted(_PRECISIONS)}")


def desk_base_config(**overrides) -> TrainConfig:
    """Tuned defaults for the coarse phase at 16x16."""
    cfg = dict(phase=PHASE_BASE, iterations=3000, initial_lr=2e-3, freeze_iters=300,
               batch_size=16, weights=LossWeights(lambda_vb=1.0, lambda_l1=0.03),
               schedule_kind=SCHEDULE_COSINE, T=200, ema_decay=0.995, seed=1)
    cfg.update(overrides)
    return TrainConfig(**cfg)


def desk_super_config(**overrides) -> TrainConfig:
    """Tuned defaults for the super-resolution phase at 32x32."""
    cfg = dict(phase=PHASE_SUPER, iterations=3000, initial_lr=2e-3, freeze_iters=300,
               batch_size=8, weights=LossWeights(lambda_vb=1.0, lambda_l1=0.02),
               schedule_kind=SCHEDULE_LINEAR, T=200, ema_decay=0.995, seed=2)
    cfg.update(overrides)
    return TrainConfig(**cfg)


def lr_at(k: int, config: TrainConfig) -> float:
    """Linear decay to zero: initial_lr * (1 - k / iterations), k 0-based."""
    return config.initial_lr * (1.0 - k / config.iterations)


@dataclass
class TraceRow:
    iteration: int
    t: int
    total: float
    mse: float
    vb: float
    l1: float
    lr: float


def trace_to_csv(trace: list[TraceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "t", "total", "mse", "vb", "l1", "lr"])
        for r in trace:
            w.writerow([r.iteration, r.t, repr(float(r.total)), repr(float(r.mse)),
                        repr(float(r.vb)), repr(float(r.l1)), repr(float(r.lr))])


@dataclass
class TrainedPhase:
    model: DenoiserModel
    ema: EmaState
    config: TrainConfig
    schedule: ScheduleSpec
    trace: list


def _downsample2(a: np.ndarray, f: int) -> np.ndarray:
    h, w = a.shape[-2:]
    return a.reshape(*a.shape[:-2], h // f, f, w // f, f).mean(axis=(-3, -1))


def _phase_views(config: TrainConfig, maps01: np.ndarray, targets01: np.ndarray):
    """Derive (x0, cond, lowres) stacks for the configured phase."""
    f = config.arch.sr_factor
    if config.phase == PHASE_BASE:
        return _downsample2(targets01, f), _downsample2(maps01, f), None
    return targets01, maps01, _downsample2(targets01, f)


def train_phase(config: TrainConfig, dataset: list[tuple[np.ndarray, np.ndarray]]) -> TrainedPhase:
    """Run one training phase over (uniform_map, target) pairs in [0, 1].

    The loop: importance-sample timesteps, corrupt with the forward
    process, compute the three-term loss with importance weights, take an
    AdamW step on the flat vector with linear LR decay, update the EMA
    shadow and the per-timestep loss history. Decoder-half layers stay
    frozen for the first freeze_iters iterations.
    """
    if not dataset:
        raise InvalidParameterError("dataset must be nonempty")
    maps01 = np.stack([np.asarray(m, dtype=np.float64) for m, _ in dataset])
    targets01 = np.stack([np.asarray(x, dtype=np.float64) for _, x in dataset])
    if maps01.shape != targets01.shape:
        raise InvalidParameterError("map/target resolutions differ")
    h, w = targets01.shape[-2:]
    if h % config.arch.sr_factor or w % config.arch.sr_factor:
        raise InvalidParameterError(f"resolution {(h, w)} not divisible by {config.arch.sr_factor}")
    x0_all, cond_all, lowres_all = _phase_views(config, maps01, targets01)

    old_threads = torch.get_num_threads()
    torch.set_num_threads(1 if config.deterministic else compute_threads())
    try:
        rng = np.random.default_rng(config.seed)
        model = DenoiserModel(config.phase, config.arch, seed=config.seed,
                              dtype=_PRECISIONS[config.precision])
        schedule = make_schedule(config.schedule_kind, config.T)
        params = model.get_vector()
        opt = OptimizerState.for_size(model.n_params, weight_decay=config.weight_decay)
        ema = EmaState(decay=config.ema_decay, shadow=params.copy())
        imp = ImportanceState(config.T) if config.importance_sampling else None
        frozen = model.frozen_mask()
        trace: list[TraceRow] = []

        for k in range(config.iterations):
            lr = lr_at(k, config)
            idx = rng.integers(0, len(dataset), size=config.batch_size)
            if imp is not None:
                pairs = [importance_sample_t(imp, rng) for _ in range(config.batch_size)]
                t_batch = np.array([p[0] for p in pairs])
                s_weights = np.array([p[1] for p in pairs])
            else:
                t_batch = rng.integers(1, config.T + 1, size=config.batch_size)
                s_weights = None
            eps = rng.standard_normal(size=(config.batch_size, *x0_all.shape[-2:]))
            batch = TrainBatch(
                x0=x0_all[idx], cond=cond_all[idx], t=t_batch, eps=eps,
                lowres=None if lowres_all is None else lowres_all[idx],
            )
            freeze_active = k < config.freeze_iters
            grad, _, per_sample, (mse, vb, l1) = denoiser_backward(
                model, batch, config.weights, schedule,
                freeze_active=freeze_active, sample_weights=s_weights)
            params = adamw_step(params, grad, opt, lr, frozen=frozen if freeze_active else None)
            model.set_vector(params)
            ema_update(ema, params)
            if imp is not None:
                for ti, li in zip(t_batch, per_sample):
                    imp.record(int(ti), float(li))
            total_mean = float(per_sample.mean())
            trace.append(TraceRow(iteration=k, t=int(t_batch[0]), total=total_mean,
                                  mse=mse, vb=vb, l1=l1, lr=lr))
        return TrainedPhase(model=model, ema=ema, config=config, schedule=schedule, trace=trace)
    finally:
        torch.set_num_threads(old_threads)


# ---------------------------------------------------------------------------
# generation


def _sample_conditional(model: DenoiserModel, schedule: ScheduleSpec, cond: np.ndarray,
                        lowres: np.ndarray | None, rng: np.random.Generator) -> np.ndarray:
    def denoise_fn(x, t):
        return denoiser_forward(model, x, t, cond, lowres)

    return sample_loop(denoise_fn, cond.shape, schedule, rng, clip_denoised=True)


def generate(base: TrainedPhase, sr: TrainedPhase, uniform_map01: np.ndarray,
             rng: np.random.Generator, use_ema: bool = True) -> np.ndarray:
    """Two-stage generation conditioned on a normalized uniform activity map.

    Stage one samples at low resolution conditioned on the downsampled
    map; stage two samples at full resolution conditioned on the map and
    the upsampled stage-one output. EMA weights are used by default.
    """
    uniform_map01 = np.asarray(uniform_map01, dtype=np.float64)
    f = sr.config.arch.sr_factor
    if uniform_map01.shape[0] % f or uniform_map01.shape[1] % f:
        raise ShapeError(f"map shape {uniform_map01.shape} not divisible by {f}")
    saved = (base.model.get_vector(), sr.model.get_vector())
    old_threads = torch.get_num_threads()
    torch.set_num_threads(compute_threads())
    try:
        if use_ema:
            base.model.set_vector(base.ema.shadow)
            sr.model.set_vector(sr.ema.shadow)
        cond_lo = _downsample2(uniform_map01, f)
        x_lo = _sample_conditional(base.model, base.schedule, cond_lo, None, rng)
        x_full = _sample_conditional(sr.model, sr.schedule, uniform_map01, x_lo, rng)
        return x_full
    finally:
        base.model.set_vector(saved[0])
        sr.model.set_vector(saved[1])
        torch.set_num_threads(old_threads)


# ---------------------------------------------------------------------------
# checkpoints: manifest JSON + little-endian float64 blob


def save_phase(path_base: str, trained: TrainedPhase) -> None:
    meta = {
        "phase": trained.config.phase,
        "arch": asdict(trained.config.arch),
        "schedule_kind": trained.config.schedule_kind,
        "T": trained.config.T,
        "ema_decay": trained.ema.decay,
        "precision": trained.config.precision,
        "layers": [asdict(e) | {"shape": list(e.shape)} for e in trained.model.manifest],
        "n_params": trained.model.n_params,
    }
    with open(path_base + ".json", "w") as fh:
        json.dump(meta, fh, indent=1)
    trained.model.get_vector().astype("<f8").tofile(path_base + ".bin")
    trained.ema.shadow.astype("<f8").tofile(path_base + ".ema.bin")


def load_phase(path_base: str) -> TrainedPhase:
    with open(path_base + ".json") as fh:
        meta = json.load(fh)
    arch = ArchConfig(**meta["arch"])
    precision = meta.get("precision", "f64")
    model = DenoiserModel(meta["phase"], arch, seed=0, dtype=_PRECISIONS[precision])
    if model.n_params != meta["n_params"]:
        raise InvalidParameterError(
            f"checkpoint has {meta['n_params']} parameters, architecture needs {model.n_params}")
    vec = np.fromfile(path_base + ".bin", dtype="<f8")
    if vec.size != model.n_params:
        raise InvalidParameterError(
            f"blob holds {vec.size} values, expected {model.n_params}")
    model.set_vector(vec)
    shadow = np.fromfile(path_base + ".ema.bin", dtype="<f8")
    ema = EmaState(decay=float(meta["ema_decay"]), shadow=shadow)
    config = TrainConfig(phase=meta["phase"], iterations=1, initial_lr=1.0,
                         schedule_kind=meta["schedule_kind"], T=meta["T"],
                         ema_decay=float(meta["ema_decay"]), precision=precision,
                         arch=arch)
    schedule = make_schedule(meta["schedule_kind"], meta["T"])
    return TrainedPhase(model=model, ema=ema, config=config, schedule=schedule, trace=[])
