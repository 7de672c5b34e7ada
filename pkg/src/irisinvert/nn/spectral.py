"""Spectral normalization by power iteration.

Weights are viewed as a 2D matrix ``(shape[0], prod(shape[1:]))``. The left
singular vector estimate ``u`` is stored on the owning module and refined in
place every time the layer runs in training mode.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

_EPS = 1e-12


@dataclass
class SpectralState:
    """Power-iteration state for one weight tensor."""

    u: torch.Tensor
    power_iterations: int = 1
    degenerate: bool = False

    @classmethod
    def for_weight(cls, weight: torch.Tensor, generator: torch.Generator | None = None,
                   power_iterations: int = 1) -> "SpectralState":
        u = torch.randn(weight.shape[0], generator=generator, dtype=weight.dtype)
        return cls(u=F.normalize(u, dim=0, eps=_EPS), power_iterations=power_iterations)


def _as_matrix(weight: torch.Tensor) -> torch.Tensor:
    return weight.reshape(weight.shape[0], -1)


@torch.no_grad()
def power_iterate(weight: torch.Tensor, state: SpectralState, iterations: int | None = None) -> torch.Tensor:
    """Refine ``state.u`` in place and return the matching right vector ``v``."""
    w = _as_matrix(weight.detach())
    n = state.power_iterations if iterations is None else iterations
    u = state.u
    v = F.normalize(w.t() @ u, dim=0, eps=_EPS)
    for _ in range(n):
        v = F.normalize(w.t() @ u, dim=0, eps=_EPS)
        u = F.normalize(w @ v, dim=0, eps=_EPS)
    state.u.copy_(u)
    return v


@torch.no_grad()
def converge(weight: torch.Tensor, state: SpectralState, tol: float = 1e-6, max_iterations: int = 500,
             chunk: int = 25) -> int:
    """Power-iterate until the sigma estimate moves by less than ``tol`` (relative).

    Returns the number of iterations used. Wide, nearly square-spectrum
    weights need a few hundred; most layers stop after one chunk.
    """
    sigma = float(top_singular_value(weight, state))
    done = 0
    while done < max_iterations:
        power_iterate(weight, state, chunk)
        done += chunk
        new = float(top_singular_value(weight, state))
        if abs(new - sigma) <= tol * max(abs(new), _EPS):
            break
        sigma = new
    return done


def top_singular_value(weight: torch.Tensor, state: SpectralState) -> torch.Tensor:
    """sigma = u^T W v with u, v held fixed (gradient flows through W only)."""
    w = _as_matrix(weight)
    with torch.no_grad():
        # snapshot: later forwards update state.u in place while this graph is alive
        u = state.u.clone()
        v = F.normalize(w.detach().t() @ u, dim=0, eps=_EPS)
    return u @ (w @ v)


def spectral_normalize(weight: torch.Tensor, state: SpectralState, update: bool = True,
                       iterations: int | None = None) -> torch.Tensor:
    """Return ``weight / sigma_1`` using the power-iteration estimate of sigma_1.

    With ``update`` the stored vector is advanced ``iterations`` steps
    (default ``state.power_iterations``) before the estimate is taken. An
    all-zero weight is returned unchanged and ``state.degenerate`` is set.
    """
    if update:
        power_iterate(weight, state, iterations)
    sigma = top_singular_value(weight, state)
    if sigma.device.type == "meta":
        return weight / sigma
    if float(sigma.detach().abs()) < _EPS:
        state.degenerate = True
        return weight
    state.degenerate = False
    return weight / sigma
