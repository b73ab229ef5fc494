"""Conditional 3D-aware view synthesis: generator, discriminator with a
latent/pose encoder head, and the adversarial + identity losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import Config, ConfigError
from .geom3d import ViewPose, rotate_volume

ADAIN_EPS = 1e-5

CUBE_SIZE = 4
ROTATE_SIZE = 16  # spatial size at which the feature volume is rotated


def adain(features: torch.Tensor, gamma: torch.Tensor,
          beta: torch.Tensor, eps: float = ADAIN_EPS) -> torch.Tensor:
    """Per instance and channel: whiten over the spatial axes, then scale by
    gamma and shift by beta. Works for 2D (N,C,H,W) and 3D (N,C,D,H,W) grids.
    """
    spatial = tuple(range(2, features.ndim))
    mean = features.mean(dim=spatial, keepdim=True)
    var = features.var(dim=spatial, keepdim=True, unbiased=False)
    normed = (features - mean) / torch.sqrt(var + eps)
    shape = gamma.shape + (1,) * len(spatial)
    return normed * gamma.reshape(shape) + beta.reshape(shape)


class AdaIN(nn.Module):
    """Latent-conditioned instance norm; the affine map starts near identity
    (gamma ~ 1, beta ~ 0)."""

    def __init__(self, channels: int, z_dim: int):
        super().__init__()
        self.channels = channels
        self.affine = nn.Linear(z_dim, 2 * channels)
        nn.init.normal_(self.affine.weight, std=0.01)
        nn.init.zeros_(self.affine.bias)

    def forward(self, x, z):
        params = self.affine(z)
        gamma = 1.0 + params[:, :self.channels]
        beta = params[:, self.channels:]
        return adain(x, gamma, beta)


def _conv(dims, cin, cout, kernel=3, stride=1, padding=1):
    cls = nn.Conv3d if dims == 3 else nn.Conv2d
    return cls(cin, cout, kernel, stride, padding)


class ResBlockAdaIN(nn.Module):
    """Pre-activation residual block (kernel 3, stride 1) whose norms are
    AdaIN units; `dims` selects 2D or 3D convolutions."""

    def __init__(self, dims: int, cin: int, cout: int, z_dim: int):
        super().__init__()
        self.norm1 = AdaIN(cin, z_dim)
        self.conv1 = _conv(dims, cin, cout)
        self.norm2 = AdaIN(cout, z_dim)
        self.conv2 = _conv(dims, cout, cout)
        self.skip = _conv(dims, cin, cout, kernel=1, padding=0) if cin != cout else None

    def forward(self, x, z):
        h = self.conv1(F.leaky_relu(self.norm1(x, z), 0.2))
        h = self.conv2(F.leaky_relu(self.norm2(h, z), 0.2))
        s = self.skip(x) if self.skip is not None else x
        return h + s


@dataclass
class GenOutput:
    """A batch of synthesized images with the inputs that produced them."""

    images: torch.Tensor        # (N, 3, R, R) in [-1, 1]
    z: torch.Tensor             # (N, z_dim)
    theta: torch.Tensor         # (N, 3)
    categories: np.ndarray      # (N,) conditioning category ids


@dataclass
class DiscOutput:
    logits: torch.Tensor        # (N,)
    z_prime: torch.Tensor       # (N, z_dim)
    theta_prime: torch.Tensor   # (N, 3)


class Generator(nn.Module):
    """Learned constant cube -> styled 3D res-up stack -> rigid rotation ->
    3D conv block -> depth-to-channel projection -> styled 2D res-up stack
    -> RGB image in [-1, 1].

    The 3D-stage AdaIN units are styled by the identity latent; the 2D-stage
    units by a (normally identical) style latent, which is what enables
    attribute transfer between two conditioning images.
    """

    def __init__(self, resolution: int, z_dim: int, base_channels: int):
        super().__init__()
        if resolution < ROTATE_SIZE or resolution & (resolution - 1):
            raise ConfigError(
                f"image_resolution: upsampling chain cannot reach {resolution}")
        if base_channels % 4 or base_channels < 8:
            raise ConfigError(
                f"gen_base_channels: must be a multiple of 4 and >= 8, "
                f"got {base_channels}")
        self.resolution = resolution
        self.z_dim = z_dim

        c0 = base_channels
        self.const = nn.Parameter(torch.randn(c0, CUBE_SIZE, CUBE_SIZE, CUBE_SIZE))
        n3d = int(math.log2(ROTATE_SIZE // CUBE_SIZE))
        chans = [c0 >> i for i in range(n3d + 1)]
        self.blocks3d = nn.ModuleList(
            ResBlockAdaIN(3, chans[i], chans[i + 1], z_dim) for i in range(n3d))
        c_rot = chans[-1]
        self.post_rot_conv = _conv(3, c_rot, c_rot)
        self.post_rot_norm = AdaIN(c_rot, z_dim)

        c2d = 2 * c_rot
        self.project = _conv(2, ROTATE_SIZE * c_rot, c2d, kernel=1, padding=0)
        n2d = int(math.log2(resolution // ROTATE_SIZE))
        if c2d >> n2d < 3:
            raise ConfigError("gen_base_channels: too small for this resolution")
        self.blocks2d = nn.ModuleList(
            ResBlockAdaIN(2, c2d >> i, c2d >> (i + 1), z_dim) for i in range(n2d))
        self.to_rgb = _conv(2, c2d >> n2d, 3)

    def forward(self, z, theta, z_style=None):
        """z: (N, z_dim); theta: (N, 3) radians; z_style defaults to z."""
        if z_style is None:
            z_style = z
        n = z.shape[0]
        h = self.const.unsqueeze(0).expand(n, *self.const.shape)
        for block in self.blocks3d:
            h = block(h, z)
            h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = rotate_volume(h, theta)
        h = F.leaky_relu(self.post_rot_norm(self.post_rot_conv(h), z), 0.2)
        # fold depth into channels, then a 1x1 projection to 2D features
        nb, c, d, hh, ww = h.shape
        h = h.reshape(nb, c * d, hh, ww)
        h = F.leaky_relu(self.project(h), 0.2)
        for block in self.blocks2d:
            h = block(h, z_style)
            h = F.interpolate(h, scale_factor=2, mode="nearest")
        return torch.tanh(self.to_rgb(h))


def generate(gen: Generator, z: torch.Tensor, theta: torch.Tensor,
             categories: np.ndarray | None = None) -> GenOutput:
    images = gen(z, theta)
    return GenOutput(images=images, z=z, theta=theta,
                     categories=categories if categories is not None
                     else np.zeros(len(images), dtype=np.int64))


def generate_dual(gen: Generator, z_identity: torch.Tensor,
                  z_style: torch.Tensor, theta: torch.Tensor,
                  categories: np.ndarray | None = None) -> GenOutput:
    """Identity latent styles the 3D stage, style latent the 2D stage."""
    images = gen(z_identity, theta, z_style=z_style)
    return GenOutput(images=images, z=z_identity, theta=theta,
                     categories=categories if categories is not None
                     else np.zeros(len(images), dtype=np.int64))


class Discriminator(nn.Module):
    """Stride-2 conv trunk (kernel 3, instance norm) shared by the realness
    head and the encoder head that reconstructs [z', theta']."""

    def __init__(self, resolution: int, z_dim: int, base_channels: int):
        super().__init__()
        self.resolution = resolution
        self.z_dim = z_dim
        n_stages = int(math.log2(resolution // 4))
        layers = []
        cin = 3
        ch = base_channels
        for i in range(n_stages):
            layers.append(_conv(2, cin, ch, stride=2))
            if i > 0:
                layers.append(nn.InstanceNorm2d(ch))
            layers.append(nn.LeakyReLU(0.2))
            cin, ch = ch, min(ch * 2, 8 * base_channels)
        self.trunk = nn.Sequential(*layers)
        flat = cin * 4 * 4
        self.realness = nn.Linear(flat, 1)
        self.encoder = nn.Linear(flat, z_dim + 3)

    def forward(self, images) -> DiscOutput:
        n, c, h, w = images.shape
        if (h, w) != (self.resolution, self.resolution) or c != 3:
            raise ValueError(
                f"expected (N, 3, {self.resolution}, {self.resolution}) images, "
                f"got {tuple(images.shape)}")
        feat = self.trunk(images).reshape(n, -1)
        rec = self.encoder(feat)
        return DiscOutput(logits=self.realness(feat).squeeze(1),
                          z_prime=rec[:, :self.z_dim],
                          theta_prime=rec[:, self.z_dim:])


def discriminate(disc: Discriminator, images: torch.Tensor) -> DiscOutput:
    return disc(images)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def gan_loss_terms(real_logits: torch.Tensor,
                   fake_logits: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """loss_D = -E[log s(D(real))] - E[log(1 - s(D(fake)))];
    loss_G = -E[log s(D(fake))] (non-saturating)."""
    loss_d = F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()
    loss_g = F.softplus(-fake_logits).mean()
    return loss_d, loss_g


def gan_losses(disc: Discriminator, real: torch.Tensor,
               fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if real.shape[1:] != fake.shape[1:]:
        raise ValueError(f"real/fake shapes differ: {tuple(real.shape)} vs "
                         f"{tuple(fake.shape)}")
    return gan_loss_terms(disc(real).logits, disc(fake).logits)


def identity_loss(z: torch.Tensor, theta: torch.Tensor,
                  z_prime: torch.Tensor, theta_prime: torch.Tensor) -> torch.Tensor:
    """Mean squared reconstruction error of the latent and the pose."""
    if z.shape != z_prime.shape or theta.shape != theta_prime.shape:
        raise ValueError("z/theta reconstruction shapes must match inputs")
    return ((z - z_prime) ** 2).sum(dim=1).mean() + \
           ((theta - theta_prime) ** 2).sum(dim=1).mean()


# ---------------------------------------------------------------------------
# Latent assembly
# ---------------------------------------------------------------------------

def draw_noise(rng: np.random.Generator, n: int, dim: int) -> torch.Tensor:
    """Standard normal noise from the labeled 'noise' stream."""
    return torch.from_numpy(rng.standard_normal((n, dim)).astype(np.float32))


def make_latent(features: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """z = conditional feature (+) noise, by concatenation."""
    if features.shape[0] != noise.shape[0]:
        raise ValueError("feature/noise batch sizes differ")
    return torch.cat([features, noise], dim=1)


def build_generator(cfg: Config) -> Generator:
    return Generator(cfg.image_resolution, cfg.z_dim, cfg.gen_channels())


def build_discriminator(cfg: Config) -> Discriminator:
    return Discriminator(cfg.image_resolution, cfg.z_dim, cfg.disc_channels())


def poses_to_tensor(poses: list[ViewPose]) -> torch.Tensor:
    return torch.stack([p.as_tensor() for p in poses])
