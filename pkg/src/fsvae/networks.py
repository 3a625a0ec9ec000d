"""Per-frame convolutional encoder/decoder with batch normalization.

The encoder is an 8-layer conv stack (kernel 3, strides alternating 1/2,
batch norm + relu everywhere) that maps a 64x64 grayscale frame to a 4x4
map, then a batch-normed linear layer and two linear heads for the
posterior mean and log-variance. The decoder mirrors it with transpose
convolutions, ending in a single channel squashed to (0,1) by a sigmoid.
One weight set is shared across all frames of a sequence; frames pass
through independently, which is what makes the posterior factorize per
frame.

Stride-2 stages exactly halve/double spatial size, so the frame size is
pinned to 64 (four halvings down to the 4x4 linear interface).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from fsvae.losses import PosteriorParams

FRAME_SIZE = 64
_GRID = 4  # spatial size at the conv/linear interface


@dataclass(frozen=True)
class NetPreset:
    """Channel plan for the conv stacks plus the hidden linear width."""

    name: str
    conv_channels: tuple[int, ...]  # 8 encoder conv output widths
    hidden_width: int

    @property
    def stage_widths(self) -> tuple[int, ...]:
        # width after each stride-2 stage; the decoder mirrors these
        return self.conv_channels[1::2]


PAPER_PRESET = NetPreset("paper", (16, 16, 32, 32, 64, 64, 128, 128), 256)
DESK_PRESET = NetPreset("desk", (8, 8, 16, 16, 32, 32, 64, 64), 128)

_PRESETS = {p.name: p for p in (PAPER_PRESET, DESK_PRESET)}


def get_preset(name: str) -> NetPreset:
    try:
        return _PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown net preset {name!r}; expected one of {sorted(_PRESETS)}") from None


class BatchNorm(nn.Module):
    """Batch normalization over [B, C] or [B, C, H, W] inputs.

    Train mode normalizes by (biased) batch statistics and folds them into
    the running statistics with retention 0.9; infer mode normalizes by the
    running statistics. Train mode requires batch size >= 2.
    """

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.9):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))

    def forward(self, x: Tensor) -> Tensor:
        dims = (0,) if x.dim() == 2 else (0, 2, 3)
        if self.training:
            if x.shape[0] < 2:
                raise ValueError("batch norm in train mode needs batch size >= 2")
            mean = x.mean(dim=dims)
            var = x.var(dim=dims, unbiased=False)
            with torch.no_grad():
                self.running_mean.mul_(self.momentum).add_((1.0 - self.momentum) * mean)
                self.running_var.mul_(self.momentum).add_((1.0 - self.momentum) * var)
        else:
            mean, var = self.running_mean, self.running_var
        shape = (1, -1) + (1,) * (x.dim() - 2)
        x_hat = (x - mean.view(shape)) / torch.sqrt(var.view(shape) + self.eps)
        return x_hat * self.weight.view(shape) + self.bias.view(shape)


def truncated_normal_(t: Tensor, std: float, generator: torch.Generator) -> Tensor:
    """Fill t with N(0, std^2) samples truncated at two standard deviations."""
    with torch.no_grad():
        t.normal_(0.0, std, generator=generator)
        bad = t.abs() > 2.0 * std
        while bool(bad.any()):
            fresh = torch.empty(int(bad.sum()), dtype=t.dtype, device=t.device)
            fresh.normal_(0.0, std, generator=generator)
            t[bad] = fresh
            bad = t.abs() > 2.0 * std
    return t


def _init_layer(layer: nn.Module, fan_in: int, generator: torch.Generator) -> None:
    truncated_normal_(layer.weight, math.sqrt(2.0 / fan_in), generator)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)


class Encoder(nn.Module):
    """Frame -> posterior (mu, log sigma^2) of width latent_width."""

    def __init__(self, preset: NetPreset, latent_width: int, generator: torch.Generator):
        super().__init__()
        convs, norms = [], []
        c_in = 1
        for c_out, stride in zip(preset.conv_channels, (1, 2) * 4):
            conv = nn.Conv2d(c_in, c_out, kernel_size=3, stride=stride, padding=1)
            _init_layer(conv, c_in * 9, generator)
            convs.append(conv)
            norms.append(BatchNorm(c_out))
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList(norms)
        flat = preset.conv_channels[-1] * _GRID * _GRID
        self.hidden = nn.Linear(flat, preset.hidden_width)
        _init_layer(self.hidden, flat, generator)
        self.hidden_norm = BatchNorm(preset.hidden_width)
        self.head_mu = nn.Linear(preset.hidden_width, latent_width)
        self.head_log_var = nn.Linear(preset.hidden_width, latent_width)
        _init_layer(self.head_mu, preset.hidden_width, generator)
        _init_layer(self.head_log_var, preset.hidden_width, generator)

    def forward(self, frames: Tensor) -> tuple[Tensor, Tensor]:
        # frames: [B*, 1, 64, 64] -> ([B*, F], [B*, F])
        x = frames
        for conv, norm in zip(self.convs, self.norms):
            x = F.relu(norm(conv(x)))
        x = x.flatten(1)
        x = F.relu(self.hidden_norm(self.hidden(x)))
        return self.head_mu(x), self.head_log_var(x)


class Decoder(nn.Module):
    """Latent -> frame logits (squashing applied by the model wrapper)."""

    def __init__(self, preset: NetPreset, latent_width: int, generator: torch.Generator):
        super().__init__()
        stages = preset.stage_widths  # e.g. (16, 32, 64, 128) for the paper-scale stack
        c_top = stages[-1]
        self.c_top = c_top
        self.fc1 = nn.Linear(latent_width, preset.hidden_width)
        _init_layer(self.fc1, latent_width, generator)
        self.fc1_norm = BatchNorm(preset.hidden_width)
        self.fc2 = nn.Linear(preset.hidden_width, c_top * _GRID * _GRID)
        _init_layer(self.fc2, preset.hidden_width, generator)
        self.fc2_norm = BatchNorm(c_top * _GRID * _GRID)

        out_channels = [stages[3], stages[2], stages[2], stages[1], stages[1], stages[0], stages[0], 1]
        convs, norms = [], []
        c_in = c_top
        for i, (c_out, stride) in enumerate(zip(out_channels, (1, 2) * 4)):
            if stride == 1:
                conv = nn.ConvTranspose2d(c_in, c_out, kernel_size=3, stride=1, padding=1)
            else:
                conv = nn.ConvTranspose2d(c_in, c_out, kernel_size=3, stride=2, padding=1, output_padding=1)
            _init_layer(conv, c_in * 9, generator)
            convs.append(conv)
            norms.append(BatchNorm(c_out) if i < 7 else None)
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList([n for n in norms if n is not None])

    def forward(self, h: Tensor) -> Tensor:
        # h: [B*, F] -> logits [B*, 64, 64]
        x = F.relu(self.fc1_norm(self.fc1(h)))
        x = F.relu(self.fc2_norm(self.fc2(x)))
        x = x.view(-1, self.c_top, _GRID, _GRID)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < 7:
                x = F.relu(self.norms[i](x))
        return x.squeeze(1)


class VideoModel(nn.Module):
    """Shared-weight per-frame encoder/decoder over [B, N, 64, 64] batches."""

    def __init__(self, preset: NetPreset | str, latent_width: int, seed: int = 0):
        super().__init__()
        if isinstance(preset, str):
            preset = get_preset(preset)
        self.preset = preset
        self.latent_width = latent_width
        gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
        self.encoder = Encoder(preset, latent_width, gen)
        self.decoder = Decoder(preset, latent_width, gen)

    def encode(self, frames: Tensor) -> PosteriorParams:
        if frames.dim() != 4 or frames.shape[-2:] != (FRAME_SIZE, FRAME_SIZE):
            raise ValueError(
                f"expected frames [B, N, {FRAME_SIZE}, {FRAME_SIZE}], got {tuple(frames.shape)}"
            )
        b, n = frames.shape[:2]
        mu, log_var = self.encoder(frames.reshape(b * n, 1, FRAME_SIZE, FRAME_SIZE))
        return PosteriorParams(mu.view(b, n, -1), log_var.view(b, n, -1))

    def decode(self, h: Tensor) -> Tensor:
        if h.dim() != 3 or h.shape[-1] != self.latent_width:
            raise ValueError(f"expected latents [B, N, {self.latent_width}], got {tuple(h.shape)}")
        b, n = h.shape[:2]
        logits = self.decoder(h.reshape(b * n, self.latent_width))
        return torch.sigmoid(logits).view(b, n, FRAME_SIZE, FRAME_SIZE)

    def forward(self, frames: Tensor, generator: torch.Generator) -> tuple[PosteriorParams, Tensor]:
        post = self.encode(frames)
        h = reparam_sample(post, generator=generator)
        return post, self.decode(h)


def reparam_sample(
    post: PosteriorParams,
    seed: int | None = None,
    generator: torch.Generator | None = None,
) -> Tensor:
    """Reparameterized posterior sample h = mu + sigma * eps."""
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else int(seed) & 0x7FFFFFFFFFFFFFFF)
    eps = torch.empty_like(post.mu).normal_(generator=generator)
    return post.mu + torch.exp(0.5 * post.log_var) * eps


@torch.no_grad()
def encode_features(model: VideoModel, frames: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Posterior means for a numpy [B, N, 64, 64] batch, in infer mode."""
    model.eval()
    outs = []
    for lo in range(0, len(frames), chunk):
        post = model.encode(torch.from_numpy(frames[lo : lo + chunk]))
        outs.append(post.mu.numpy())
    return np.concatenate(outs).astype(np.float64)


@torch.no_grad()
def decode_frames(model: VideoModel, latents: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Decode numpy [B, N, F] latents to [B, N, 64, 64] pixel probabilities."""
    model.eval()
    latents = np.asarray(latents, dtype=np.float32)
    outs = []
    for lo in range(0, len(latents), chunk):
        probs = model.decode(torch.from_numpy(latents[lo : lo + chunk]))
        outs.append(probs.numpy())
    return np.concatenate(outs)
