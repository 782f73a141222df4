"""Distribution perturbation of the inverted latent: AdaIN against fresh
random noise, blended by the fusion ratio inside the edit region."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import ShapeMismatchError
from .mask import EditMask


@dataclass(frozen=True)
class ShiftParams:
    beta: float = 0.25
    epsilon: float = 1e-6
    noise_seed: int = 0
    moments_scope: str = "global"  # "global" (default) or "masked"

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.moments_scope not in ("global", "masked"):
            raise ValueError(f"unknown moments scope {self.moments_scope!r}")


def channel_moments(z: Tensor, region: Tensor = None) -> tuple[Tensor, Tensor]:
    """Per-channel mean and population standard deviation over spatial positions.

    ``region`` optionally restricts the statistics to a boolean pixel subset.
    """
    if z.dim() != 3:
        raise ShapeMismatchError(f"expected (C, H, W), got {tuple(z.shape)}")
    if region is not None:
        if region.shape != z.shape[1:]:
            raise ShapeMismatchError(f"region {tuple(region.shape)} does not match "
                                     f"spatial extent {tuple(z.shape[1:])}")
        flat = z.reshape(z.shape[0], -1)[:, region.reshape(-1)]
    else:
        flat = z.reshape(z.shape[0], -1)
    if flat.shape[1] < 2:
        raise ValueError(f"need at least 2 spatial positions per channel, got {flat.shape[1]}")
    return flat.mean(dim=1), flat.std(dim=1, correction=0)


def adain(z: Tensor, z_ref: Tensor, epsilon: float = 1e-6,
          region: Tensor = None) -> Tensor:
    """Re-impose z_ref's per-channel moments on z.

    Output moments equal z_ref's (mean exactly, std up to the epsilon guard);
    constant channels of z come out constant at the reference mean.
    """
    if z.shape != z_ref.shape:
        raise ShapeMismatchError(f"z {tuple(z.shape)} != z_ref {tuple(z_ref.shape)}")
    mu, sigma = channel_moments(z, region)
    mu_r, sigma_r = channel_moments(z_ref, region)
    shape = (-1,) + (1,) * (z.dim() - 1)
    normalized = (z - mu.reshape(shape)) / (sigma.reshape(shape) + epsilon)
    return sigma_r.reshape(shape) * normalized + mu_r.reshape(shape)


def latents_shift(z_t: Tensor, mask: EditMask, params: ShiftParams = ShiftParams()) -> Tensor:
    """Blend the AdaIN-renoised latent into the edit region.

    Fresh standard-normal noise (drawn once from the seed) supplies the target
    moments; the result differs from the input only inside the pixel view of
    the mask, and beta=0 or an empty mask returns the input unchanged.
    """
    if z_t.dim() != 3:
        raise ShapeMismatchError(f"expected (C, H, W), got {tuple(z_t.shape)}")
    _, h, w = z_t.shape
    gh, gw = mask.grid_shape
    if h % gh != 0 or w % gw != 0 or h // gh != w // gw:
        raise ShapeMismatchError(f"mask grid {gh}x{gw} does not tile a {h}x{w} latent")
    if params.beta == 0.0 or mask.count() == 0:
        return z_t.clone()

    patch = h // gh
    pixel_mask = mask.as_pixels(patch)
    gen = torch.Generator().manual_seed(params.noise_seed)
    noise = torch.randn(z_t.shape, generator=gen, dtype=z_t.dtype)
    region = pixel_mask if params.moments_scope == "masked" else None
    shifted = adain(z_t, noise, epsilon=params.epsilon, region=region)
    blended = params.beta * shifted + (1.0 - params.beta) * z_t
    return torch.where(pixel_mask.unsqueeze(0), blended, z_t)
