"""Variational encoder, exemplar decoder and the openness detector MLP."""
from __future__ import annotations

import io
import os
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError

SIGMA_FLOOR = 1e-6
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    image_size: tuple[int, int] = (32, 32)
    in_channels: int = 3
    channels: int = 32
    n_blocks: int = 4
    d_z: int = 64
    norm: str = "group"  # group | batch | none
    detector_hidden: tuple[int, ...] = (200, 100)
    n_way: int = 5
    use_clf: bool = True
    use_embedding: bool = True
    use_recon_errors: bool = True
    tau_init: float = 10.0

    def __post_init__(self):
        h, w = self.image_size
        step = 2 ** self.n_blocks
        if h % step or w % step:
            raise ConfigError(f"image size {self.image_size} not divisible by 2**n_blocks={step}")
        if self.norm not in ("group", "batch", "none"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.tau_init <= 0:
            raise ConfigError("tau_init must be positive")

    @property
    def bottleneck(self) -> tuple[int, int, int]:
        h, w = self.image_size
        return self.channels, h // 2 ** self.n_blocks, w // 2 ** self.n_blocks

    @property
    def feature_dim(self) -> int:
        c, h, w = self.bottleneck
        return c * h * w

    @property
    def detector_input_dim(self) -> int:
        return (self.n_way * self.use_clf + self.d_z * self.use_embedding
                + self.n_way * self.use_recon_errors)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["detector_hidden"] = list(self.detector_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ArchConfig:
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        d["detector_hidden"] = tuple(d["detector_hidden"])
        return cls(**d)


def _norm(kind, channels):
    if kind == "group":
        return nn.GroupNorm(min(4, channels), channels)
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    return nn.Identity()


class Encoder(nn.Module):
    """Conv blocks (conv, norm, ReLU, 2x pool) followed by mean and
    half-log-variance heads; ``sigma = exp(half_logvar)``."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        blocks, c_in = [], arch.in_channels
        for _ in range(arch.n_blocks):
            blocks += [nn.Conv2d(c_in, arch.channels, 3, padding=1),
                       _norm(arch.norm, arch.channels), nn.ReLU(), nn.MaxPool2d(2)]
            c_in = arch.channels
        self.features = nn.Sequential(*blocks)
        self.mu_head = nn.Linear(arch.feature_dim, arch.d_z)
        self.logsigma_head = nn.Linear(arch.feature_dim, arch.d_z)

    def _check(self, x):
        want = (self.arch.in_channels, *self.arch.image_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != want:
            raise ValueError(f"encoder expects (B, {want}), got {tuple(x.shape)}")

    def penultimate(self, x: torch.Tensor) -> torch.Tensor:
        """Flattened activation that feeds the two latent heads."""
        self._check(x)
        return self.features(x).flatten(1)

    def forward(self, x):
        f = self.penultimate(x)
        mu = self.mu_head(f)
        sigma = torch.exp(self.logsigma_head(f)).clamp_min(SIGMA_FLOOR)
        return mu, sigma


class Decoder(nn.Module):
    """Mirror of the encoder: linear lift to the bottleneck map, then
    transposed-conv upsampling blocks ending in a sigmoid."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        c, h, w = arch.bottleneck
        self.lift = nn.Linear(arch.d_z, c * h * w)
        blocks = []
        for i in range(arch.n_blocks):
            last = i == arch.n_blocks - 1
            c_out = arch.in_channels if last else arch.channels
            blocks.append(nn.ConvTranspose2d(arch.channels, c_out, 4, stride=2, padding=1))
            if not last:
                blocks += [_norm(arch.norm, c_out), nn.ReLU()]
        self.up = nn.Sequential(*blocks)

    def forward(self, z):
        if z.dim() != 2 or z.shape[1] != self.arch.d_z:
            raise ValueError(f"decoder expects (B, {self.arch.d_z}), got {tuple(z.shape)}")
        c, h, w = self.arch.bottleneck
        x = F.relu(self.lift(z)).view(-1, c, h, w)
        return torch.sigmoid(self.up(x))


class Detector(nn.Module):
    """ReLU MLP scoring the probability that a query is out-of-distribution."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.in_dim = arch.detector_input_dim
        layers, d = [], self.in_dim
        for width in arch.detector_hidden:
            layers += [nn.Linear(d, width), nn.ReLU()]
            d = width
        layers.append(nn.Linear(d, 1))
        self.mlp = nn.Sequential(*layers)

    def logits(self, features):
        if features.shape[-1] != self.in_dim:
            raise ValueError(
                f"detector expects {self.in_dim} input features, got {features.shape[-1]}")
        return self.mlp(features).squeeze(-1)

    def forward(self, features):
        return torch.sigmoid(self.logits(features))


def reparameterize(mu, sigma, generator: torch.Generator | None = None,
                   deterministic: bool = False):
    """Return ``(z, eps)`` with ``z = mu + sigma * eps``; eval mode uses eps = 0."""
    if deterministic:
        eps = torch.zeros_like(mu)
    else:
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return mu + sigma * eps, eps


def _inv_softplus(y: float) -> float:
    return float(torch.log(torch.expm1(torch.tensor(y, dtype=torch.float64))))


class ReFOCSNet(nn.Module):
    """All trainable pieces: encoder, decoder, detector and the temperature."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.encoder = Encoder(arch)
        self.decoder = Decoder(arch)
        self.detector = Detector(arch)
        # softplus keeps the learnable temperature positive
        self.raw_tau = nn.Parameter(torch.tensor(_inv_softplus(arch.tau_init)))

    @property
    def tau(self):
        return F.softplus(self.raw_tau)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "encoder": list(self.encoder.parameters()),
            "decoder": list(self.decoder.parameters()),
            "detector": list(self.detector.parameters()),
            "tau": [self.raw_tau],
        }


def flat_parameters(module: nn.Module) -> torch.Tensor:
    """All parameters concatenated in registration order."""
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


def load_flat_parameters(module: nn.Module, flat: torch.Tensor) -> None:
    offset = 0
    with torch.no_grad():
        for p in module.parameters():
            n = p.numel()
            p.copy_(flat[offset:offset + n].view_as(p))
            offset += n
    if offset != flat.numel():
        raise ValueError(f"flat vector has {flat.numel()} entries, module needs {offset}")


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def save_checkpoint(path, net: ReFOCSNet, extra: dict | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "arch": net.arch.to_dict(),
        "state_dict": net.state_dict(),
        **(extra or {}),
    }
    # write-then-rename so an interrupted save never leaves a torn file
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[ReFOCSNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    net = ReFOCSNet(ArchConfig.from_dict(payload["arch"]))
    first = next(iter(payload["state_dict"].values()))
    net.to(first.dtype)
    net.load_state_dict(payload["state_dict"])
    return net, payload
