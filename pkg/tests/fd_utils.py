"""Finite-difference gradient oracle for the denoiser loss.

The training loss contains a stop-gradient: the variational-bound term
uses sg(mu(eps_hat)), so its analytic gradient flows only through the
variance head. Finite-differencing such a function correctly means
pinning the sg operand at the base point while the perturbed parameters
move everything else. `loss_pinned` evaluates exactly that function;
comparing its central differences against the autograd gradient of the
real loss checks both the math and the stop-gradient wiring.
"""

import numpy as np
import torch

from padkit.denoiser import DenoiserModel, TrainBatch, batch_loss
from padkit.diffusion import (
    DenoiserOutput,
    LossWeights,
    ScheduleSpec,
    diffusion_loss_terms,
    mu_from_eps,
    q_sample,
)


def make_fd_batch(phase: str, seed: int, B: int = 2, size: int = 16,
                  T: int = 12, t_values=None) -> tuple[TrainBatch, np.ndarray]:
    """A fixed batch (x0, cond, t, eps) plus its x_t for a given schedule size."""
    rng = np.random.default_rng(seed)
    x0 = rng.random((B, size, size))
    cond = rng.random((B, size, size))
    if t_values is None:
        t = rng.integers(1, T + 1, size=B)
    else:
        t = np.asarray(t_values)
    eps = rng.standard_normal((B, size, size))
    lowres = rng.random((B, size // 2, size // 2)) if phase == "super_res" else None
    return TrainBatch(x0=x0, cond=cond, t=t, eps=eps, lowres=lowres)


def analytic_grad(model: DenoiserModel, batch: TrainBatch, weights: LossWeights,
                  schedule: ScheduleSpec) -> np.ndarray:
    model.net.zero_grad(set_to_none=True)
    objective, _, _ = batch_loss(model, batch, weights, schedule)
    objective.backward()
    return model.grad_vector()


def loss_pinned(model: DenoiserModel, vec: np.ndarray, batch: TrainBatch,
                weights: LossWeights, schedule: ScheduleSpec, mu_base: np.ndarray,
                term: str = "total") -> float:
    """Loss value at `vec` with the stop-gradient branch pinned at mu_base."""
    model.set_vector(vec)
    x_t = q_sample(batch.x0, batch.t, batch.eps, schedule)
    with torch.no_grad():
        eps_hat, v = model.forward_batch(x_t, batch.t.astype(float), batch.cond, batch.lowres)
    out = DenoiserOutput(eps_hat=eps_hat.numpy(), v=v.numpy())
    total, mse, vb, l1 = diffusion_loss_terms(
        out, batch.x0, x_t, batch.t, batch.eps, weights, schedule,
        reduce="mean", sg_mu_override=mu_base)
    return float({"total": total, "mse": mse, "vb": vb, "l1": l1}[term])


def pinned_mu(model: DenoiserModel, vec: np.ndarray, batch: TrainBatch,
              schedule: ScheduleSpec) -> np.ndarray:
    """mu(eps_hat) evaluated at the base parameters, for pinning."""
    model.set_vector(vec)
    x_t = q_sample(batch.x0, batch.t, batch.eps, schedule)
    with torch.no_grad():
        eps_hat, _ = model.forward_batch(x_t, batch.t.astype(float), batch.cond, batch.lowres)
    return mu_from_eps(x_t, batch.t, eps_hat.numpy(), schedule)


def central_difference(model: DenoiserModel, vec: np.ndarray, index: int,
                       batch: TrainBatch, weights: LossWeights, schedule: ScheduleSpec,
                       mu_base: np.ndarray, h: float = 1e-5, term: str = "total") -> float:
    up = vec.copy()
    up[index] += h
    down = vec.copy()
    down[index] -= h
    f_up = loss_pinned(model, up, batch, weights, schedule, mu_base, term)
    f_down = loss_pinned(model, down, batch, weights, schedule, mu_base, term)
    model.set_vector(vec)
    return (f_up - f_down) / (2.0 * h)


def eps_head_indices(model: DenoiserModel) -> np.ndarray:
    """Flat indices of every parameter feeding only the eps output channel."""
    idx = []
    for e in model.manifest:
        if e.name == "head_conv2.weight":
            per_out = e.size // e.shape[0]
            idx.append(np.arange(e.offset, e.offset + per_out))
        elif e.name == "head_conv2.bias":
            idx.append(np.array([e.offset]))
    return np.concatenate(idx)
