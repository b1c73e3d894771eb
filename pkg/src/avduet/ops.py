"""Shared numerical primitives for the dual-stream editing model.

Everything runs on plain CPU torch tensors. Training uses float32; the
gradient tests run the identical code paths in float64 against the
central-difference oracle at the bottom of this module.
"""

from __future__ import annotations

import math
import os
from typing import Callable, Sequence

import torch

VARIANCE_FLOOR = 1e-6

# Large negative fill for inadmissible attention scores. exp() of it
# underflows to exactly 0.0 in both float32 and float64, which is what the
# masked-routing invariants rely on.
_MASK_FILL = -1e30

THREADS_ENV = "AVDUET_NUM_THREADS"


def configure_threads() -> None:
    """Apply the thread-count override from the environment, if any."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be >= 1, got {n}")
    torch.set_num_threads(n)


def seeded_generator(seed: int) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(int(seed))
    return gen


def detach(x: torch.Tensor) -> torch.Tensor:
    """Value-identical view of x that blocks gradient flow."""
    return x.detach()


def stable_layer_norm(x: torch.Tensor, floor: float = VARIANCE_FLOOR) -> torch.Tensor:
    """Affine-free layer norm over the last axis.

    The variance is floored rather than epsilon-shifted so a constant input
    normalizes to exact zeros instead of NaN; the white-frame sampling anchor
    produces exactly this case.
    """
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = centered.pow(2).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var.clamp_min(floor))


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax over the last axis with an optional boolean admissibility mask.

    True in ``mask`` marks an admissible entry. Max-subtraction keeps the
    exponentials in range; rows with no admissible entry come back all-zero
    rather than NaN, which is the convention the attention routing expects
    for empty cross-modal windows.
    """
    if mask is None:
        shifted = scores - scores.amax(dim=-1, keepdim=True)
        weights = torch.exp(shifted)
        return weights / weights.sum(dim=-1, keepdim=True)
    if mask.shape != scores.shape:
        mask = mask.expand_as(scores)
    filled = torch.where(mask, scores, torch.full_like(scores, _MASK_FILL))
    shifted = filled - filled.amax(dim=-1, keepdim=True)
    weights = torch.exp(shifted) * mask.to(scores.dtype)
    denom = weights.sum(dim=-1, keepdim=True)
    return weights / denom.clamp_min(torch.finfo(scores.dtype).tiny)


def attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    heads: int,
    mask: torch.Tensor | None = None,
    rope_q: tuple[torch.Tensor, torch.Tensor] | None = None,
    rope_k: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Multi-head scaled dot-product attention on unbatched token tensors.

    q is [Nq, D]; k and v are [Nk, D]; mask, if given, is [Nq, Nk] boolean
    with True where the key is admissible for that query. ``rope_q`` /
    ``rope_k`` are (cos, sin) caches from :mod:`avduet.rope`, applied after
    the head split so rotation happens per head.
    """
    from .rope import apply_rotary_cached  # local import avoids a cycle

    nq, dim = q.shape
    if dim % heads:
        raise ValueError(f"model width {dim} not divisible by {heads} heads")
    head_dim = dim // heads
    qh = q.view(nq, heads, head_dim)
    kh = k.view(-1, heads, head_dim)
    if rope_q is not None:
        qh = apply_rotary_cached(qh, *rope_q)
    if rope_k is not None:
        kh = apply_rotary_cached(kh, *rope_k)
    qh = qh.transpose(0, 1)
    kh = kh.transpose(0, 1)
    vh = v.view(-1, heads, head_dim).transpose(0, 1)
    scores = qh @ kh.transpose(1, 2) / math.sqrt(head_dim)
    if mask is not None:
        mask = mask.unsqueeze(0).expand_as(scores)
    weights = masked_softmax(scores, mask)
    out = weights @ vh
    return out.transpose(0, 1).reshape(nq, dim)


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of a scalar, shape [dim]. dim must be even."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    angles = t * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)])


def finite_diff_gradients(
    f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float = 1e-5
) -> torch.Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    This is the independent oracle the gradient tests compare autograd
    against; it deliberately shares no code with the backward pass.
    """
    with torch.no_grad():
        base = x.detach().clone()
        flat = base.reshape(-1)
        grad = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(f(base))
            flat[i] = orig - eps
            down = float(f(base))
            flat[i] = orig
            grad[i] = (up - down) / (2.0 * eps)
    return grad.view_as(x)


def finite_diff_check(
    f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float = 1e-5
) -> float:
    """Max relative disagreement between autograd and central differences.

    Returns max over coordinates of |g_ad - g_fd| / max(1e-12, |g_fd|).
    Raises if f does not produce a finite scalar.
    """
    leaf = x.detach().clone().requires_grad_(True)
    value = f(leaf)
    if value.numel() != 1:
        raise ValueError(f"finite_diff_check needs a scalar function, got shape {tuple(value.shape)}")
    if not torch.isfinite(value):
        raise ValueError(f"function value is not finite: {value.item()!r}")
    (g_ad,) = torch.autograd.grad(value, leaf, allow_unused=True)
    if g_ad is None:
        g_ad = torch.zeros_like(leaf)
    g_fd = finite_diff_gradients(f, x, eps)
    rel = (g_ad - g_fd).abs() / g_fd.abs().clamp_min(1e-12)
    return rel.max().item()


def finite_diff_param_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-5,
    atol: float = 1e-6,
    rtol: float = 1e-4,
    max_coords_per_tensor: int | None = None,
    seed: int = 0,
) -> float:
    """Verify autograd parameter gradients against central differences.

    ``loss_fn`` recomputes the scalar loss from the current parameter values.
    Coordinates are perturbed in place; by default every coordinate of every
    parameter is swept. ``max_coords_per_tensor`` caps the sweep with a
    seeded random subset per tensor (every tensor still contributes), which
    keeps whole-model checks affordable. Returns the worst ratio
    |g_ad - g_fd| / (atol + rtol * |g_fd|); values <= 1.0 mean every checked
    coordinate is within the mixed tolerance.
    """
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise ValueError(f"loss is not finite: {loss.item()!r}")
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    gen = seeded_generator(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g_ad in zip(params, grads):
            flat = p.reshape(-1)
            flat_g = (torch.zeros_like(p) if g_ad is None else g_ad).reshape(-1)
            n = flat.numel()
            if max_coords_per_tensor is None or n <= max_coords_per_tensor:
                coords = range(n)
            else:
                coords = torch.randperm(n, generator=gen)[:max_coords_per_tensor].tolist()
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
                g_fd = (up - down) / (2.0 * eps)
                ratio = abs(float(flat_g[i]) - g_fd) / (atol + rtol * abs(g_fd))
                worst = max(worst, ratio)
    return worst
