"""Low-level image math shared by the attack and defense code.

All images are float32 tensors of shape (3, H, W) (or batched (N, 3, H, W))
with values in [0, 1].  Perturbations have the same shape and live in an
L-infinity ball of radius eps.  Hue is encoded as a fraction of a full turn
in [0, 1], so a hue shift is a plain additive wrap-around.
"""

from __future__ import annotations

import torch


def project_linf(delta: torch.Tensor, eps: float) -> torch.Tensor:
    """Project a perturbation onto the L-infinity ball of radius ``eps``.

    Component-wise clamp to [-eps, +eps]; shape is preserved.

    Raises:
        ValueError: if ``eps`` is negative.
    """
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    return delta.clamp(-eps, eps)


def clamp_valid(image: torch.Tensor) -> torch.Tensor:
    """Clamp pixel values into the valid [0, 1] range."""
    return image.clamp(0.0, 1.0)


def linf_norm(delta: torch.Tensor) -> float:
    """Max absolute component of ``delta`` (0.0 for an empty tensor)."""
    if delta.numel() == 0:
        return 0.0
    return delta.abs().max().item()


def rgb_to_hsv(image: torch.Tensor) -> torch.Tensor:
    """Convert an RGB image (3, H, W) in [0,1] to HSV with H, S, V in [0,1].

    H is the hue angle as a fraction of a full turn; achromatic pixels get
    H = S = 0.
    """
    r, g, b = image[0], image[1], image[2]
    maxc = image.max(dim=0).values
    minc = image.min(dim=0).values
    v = maxc
    delta = maxc - minc
    # avoid div-by-zero on achromatic pixels; masked out below
    safe = torch.where(delta > 0, delta, torch.ones_like(delta))
    s = torch.where(maxc > 0, delta / torch.where(maxc > 0, maxc, torch.ones_like(maxc)), torch.zeros_like(maxc))

    h = torch.zeros_like(maxc)
    rmax = (maxc == r) & (delta > 0)
    gmax = (maxc == g) & (delta > 0) & ~rmax
    bmax = (delta > 0) & ~rmax & ~gmax
    h = torch.where(rmax, ((g - b) / safe) % 6.0, h)
    h = torch.where(gmax, (b - r) / safe + 2.0, h)
    h = torch.where(bmax, (r - g) / safe + 4.0, h)
    h = h / 6.0
    return torch.stack([h, s, v])


def hsv_to_rgb(image: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`rgb_to_hsv`; round-trip error is below 1e-5."""
    h, s, v = image[0], image[1], image[2]
    h6 = (h % 1.0) * 6.0
    i = h6.floor()
    f = h6 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.long() % 6

    r = torch.where(i == 0, v, torch.where(i == 1, q, torch.where(i == 2, p, torch.where(i == 3, p, torch.where(i == 4, t, v)))))
    g = torch.where(i == 0, t, torch.where(i == 1, v, torch.where(i == 2, v, torch.where(i == 3, q, torch.where(i == 4, p, p)))))
    b = torch.where(i == 0, p, torch.where(i == 1, p, torch.where(i == 2, t, torch.where(i == 3, v, torch.where(i == 4, v, q)))))
    return torch.stack([r, g, b])
