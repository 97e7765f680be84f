"""Residual convolutional VAE with a class-conditioned latent space.

The encoder maps an image to a ``z x 4 x 4`` latent map (mean and log-variance).
Training pulls each sample's posterior toward the prior of its class, so normal
images and anomalies settle into two separate regions of the latent space.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from clvae.datamodel import ANOMALY, NORMAL

LATENT_SIZE = 4


@dataclass(frozen=True)
class VaeSpec:
    input_channels: int = 3
    latent_channels: int = 64
    image_size: int = 64
    widths: tuple[int, ...] = (32, 64, 128, 128)
    rrelu_lower: float = 1.0 / 8.0
    rrelu_upper: float = 1.0 / 3.0
    extra_pool: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.input_channels not in (3, 4):
            raise ValueError(f"input_channels must be 3 or 4, got {self.input_channels}")
        if self.latent_channels < 1:
            raise ValueError("latent_channels must be positive")
        if not self.widths:
            raise ValueError("widths must be nonempty")
        n = self.image_size // LATENT_SIZE
        if self.image_size % LATENT_SIZE or n & (n - 1) or n < 2:
            raise ValueError(
                f"image_size must be 4 * 2**k with k >= 1, got {self.image_size}"
            )
        if not 0.0 <= self.rrelu_lower <= self.rrelu_upper:
            raise ValueError("need 0 <= rrelu_lower <= rrelu_upper")

    @property
    def n_stages(self) -> int:
        return int(math.log2(self.image_size // LATENT_SIZE))

    def stage_widths(self) -> list[int]:
        w = list(self.widths[: self.n_stages])
        w += [w[-1]] * (self.n_stages - len(w))
        return w

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_channels, LATENT_SIZE, LATENT_SIZE)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


class RReLU(nn.Module):
    """Randomized leaky ReLU.

    Training draws one negative slope per element from U(lower, upper) using the
    global torch RNG; evaluation uses the midpoint so inference is a pure
    function of the input.
    """

    def __init__(self, lower: float, upper: float):
        super().__init__()
        self.lower = lower
        self.upper = upper

    def forward(self, x):
        return F.rrelu(x, self.lower, self.upper, training=self.training)


class ResBlock(nn.Module):
    def __init__(self, channels: int, lower: float, upper: float):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = RReLU(lower, upper)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


class ConditionedVAE(nn.Module):
    """Encoder/decoder pair. Use :meth:`eval` for deterministic inference."""

    def __init__(self, spec: VaeSpec):
        super().__init__()
        self.spec = spec
        lo, hi = spec.rrelu_lower, spec.rrelu_upper
        widths = spec.stage_widths()

        enc: list[nn.Module] = []
        c_in = spec.input_channels
        for i, w in enumerate(widths):
            stride = 2
            if spec.extra_pool and i == len(widths) - 1:
                stride = 1
            enc += [nn.Conv2d(c_in, w, 3, stride=stride, padding=1), RReLU(lo, hi), ResBlock(w, lo, hi)]
            if spec.extra_pool and i == 1:
                enc.append(nn.AvgPool2d(2))
            c_in = w
        self.encoder = nn.Sequential(*enc)
        self.to_mu = nn.Conv2d(c_in, spec.latent_channels, 1)
        self.to_logvar = nn.Conv2d(c_in, spec.latent_channels, 1)

        dec: list[nn.Module] = [nn.Conv2d(spec.latent_channels, widths[-1], 1), RReLU(lo, hi)]
        rev = widths[::-1]
        for i, w in enumerate(rev):
            w_out = rev[i + 1] if i + 1 < len(rev) else rev[-1]
            dec += [
                ResBlock(w, lo, hi),
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(w, w_out, 3, padding=1),
                RReLU(lo, hi),
            ]
        dec.append(nn.Conv2d(rev[-1], spec.input_channels, 3, padding=1))
        self.decoder = nn.Sequential(*dec)
        self.reset_parameters(spec.seed)
        self.step = 0

    @torch.no_grad()
    def reset_parameters(self, seed: int) -> None:
        """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)), from ``seed``."""
        gen = torch.Generator().manual_seed(int(seed))
        for name, p in self.named_parameters():
            if name.startswith("to_logvar") and name.endswith("bias"):
                p.zero_()
                continue
            owner = self.get_submodule(name.rsplit(".", 1)[0])
            fan_in = owner.in_channels * owner.kernel_size[0] * owner.kernel_size[1]
            bound = 1.0 / math.sqrt(fan_in)
            p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 * bound - bound)

    def _check_input(self, x: torch.Tensor) -> None:
        s = self.spec
        expected = (s.input_channels, s.image_size, s.image_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"expected batch of shape (B, {expected}), got {tuple(x.shape)}")

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self._check_input(x)
        h = self.encoder(x)
        return self.to_mu(h), self.to_logvar(h)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 4 or tuple(z.shape[1:]) != self.spec.latent_shape:
            raise ValueError(
                f"expected latent batch of shape (B, {self.spec.latent_shape}), got {tuple(z.shape)}"
            )
        return torch.sigmoid(self.decoder(z))

    def forward(self, x: torch.Tensor, noise: torch.Tensor | None = None):
        """Return ``(x_hat, mu, logvar, z)``. ``noise`` defaults to a standard normal draw."""
        mu, logvar = self.encode(x)
        if noise is None:
            noise = torch.randn_like(mu)
        z = reparameterize(mu, logvar, noise)
        return self.decode(z), mu, logvar, z

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(p).all()) for p in self.parameters())


def reparameterize(mu, logvar, noise):
    """z = mu + exp(logvar / 2) * noise, elementwise."""
    if mu.shape != logvar.shape or mu.shape != noise.shape:
        raise ValueError("mu, logvar and noise must share a shape")
    return mu + torch.exp(0.5 * logvar) * noise


@dataclass
class LatentCode:
    mu: np.ndarray
    logvar: np.ndarray
    sample: np.ndarray
    noise: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        for name in ("mu", "logvar", "sample"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite {name} in latent code")


@dataclass(frozen=True)
class PriorSet:
    """Means of the two unit-covariance class priors."""

    m_normal: np.ndarray
    m_anomaly: np.ndarray

    def __post_init__(self):
        if self.m_normal.shape != self.m_anomaly.shape:
            raise ValueError("prior means must share a shape")
        if not (np.all(np.isfinite(self.m_normal)) and np.all(np.isfinite(self.m_anomaly))):
            raise ValueError("prior means must be finite")
        if np.array_equal(self.m_normal, self.m_anomaly):
            raise ValueError("prior means must differ")

    @classmethod
    def symmetric(cls, latent_channels: int, delta: float = 3.0) -> "PriorSet":
        """-delta / +delta on every position of the first latent channel, zero elsewhere."""
        if delta <= 0:
            raise ValueError("delta must be positive")
        m = np.zeros((latent_channels, LATENT_SIZE, LATENT_SIZE))
        m[0] = delta
        return cls(m_normal=-m, m_anomaly=m.copy())

    def stacked(self, labels, dtype=torch.float32) -> torch.Tensor:
        """Prior mean per sample for a sequence of labels (0/1 or label strings)."""
        return torch.as_tensor(
            np.stack([prior_mean_for(l, self) for l in labels]), dtype=dtype
        )


def prior_mean_for(label, priors: PriorSet) -> np.ndarray:
    if label in (NORMAL, 0):
        return priors.m_normal
    if label in (ANOMALY, 1):
        return priors.m_anomaly
    raise ValueError(f"unknown label {label!r}")
