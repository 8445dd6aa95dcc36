"""Auto-encoder bias network with latent-space attention.

Layout for ``num_scales = n``::

    x -> enc_0 -> z_0 -> enc_1 -> z_1 ... -> z_{n-1} -> bottleneck -> z
    z -> dec_entry -> z'_{n-1} -> up_{n-1} -> z'_{n-2} ... -> z'_0 -> out -> x_o

Every encoder stage is a stride-2 3x3 convolution (channels double per
stage), every decoder stage a stride-2 transposed convolution, so ``z_k`` and
``z'_k`` share the spatial side ``image_size / 2**(k+1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigError, InputError, InvariantError, NumericalError

FEEDS = ("raw", "recon", "bias", "bias_lsa")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    in_channels: int = 3
    num_scales: int = 3
    base_channels: int = 8
    bottleneck_channels: int = 32
    patch_size: int = 2
    mlp_hidden: int = 32
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "seed":
                if not isinstance(value, int) or isinstance(value, bool):
                    raise ConfigError(f"model.seed must be an integer, got {value!r}")
                continue
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"model.{f.name} must be a positive integer, got {value!r}")
        if self.image_size % (2**self.num_scales):
            raise ConfigError(
                f"model.image_size={self.image_size} is not divisible by "
                f"2**num_scales={2**self.num_scales}"
            )
        if self.bottleneck_side % self.patch_size:
            raise ConfigError(
                f"model.patch_size={self.patch_size} does not divide the "
                f"bottleneck side {self.bottleneck_side}"
            )

    @property
    def bottleneck_side(self) -> int:
        return self.image_size // 2**self.num_scales

    def stage_channels(self, k: int) -> int:
        return self.base_channels * 2**k

    def stage_side(self, k: int) -> int:
        return self.image_size // 2 ** (k + 1)


@dataclass
class LatentPyramid:
    encoder_feats: list[Tensor]
    bottleneck: Tensor
    decoder_feats: list[Tensor]

    def validate(self, config: ModelConfig) -> None:
        n = config.num_scales
        if len(self.encoder_feats) != n or len(self.decoder_feats) != n:
            raise InvariantError(
                f"pyramid has {len(self.encoder_feats)}/{len(self.decoder_feats)} "
                f"levels, expected {n}"
            )
        for k, (zk, zpk) in enumerate(zip(self.encoder_feats, self.decoder_feats)):
            side = config.stage_side(k)
            if zk.shape[-2:] != (side, side) or zpk.shape[-2:] != (side, side):
                raise InvariantError(
                    f"level {k}: got {tuple(zk.shape)} / {tuple(zpk.shape)}, expected side {side}"
                )


@dataclass
class ForwardBundle:
    """Every intermediate of one forward pass.

    Fields not produced by the chosen feed are ``None`` (e.g. no
    reconstruction for ``feed="raw"``).
    """

    reconstruction: Optional[Tensor]
    bias: Optional[Tensor]
    pyramid: Optional[LatentPyramid]
    attention: Optional[Tensor]
    mask: Optional[Tensor]
    fused: Tensor
    logit: Tensor
    prob: Tensor


def compute_bias(x: Tensor, x_o: Tensor) -> Tensor:
    """Elementwise ``|x - x_o|``; the subgradient at ties is 0."""
    if x.shape != x_o.shape:
        raise InputError(f"bias shape mismatch: {tuple(x.shape)} vs {tuple(x_o.shape)}")
    return (x - x_o).abs()


def _to_patches(t: Tensor, p: int) -> Tensor:
    # (..., S, S) -> (..., S/p, S/p, p*p)
    *lead, s, _ = t.shape
    g = s // p
    t = t.reshape(*lead, g, p, g, p).transpose(-3, -2)
    return t.reshape(*lead, g, g, p * p)


def _from_patches(t: Tensor, p: int) -> Tensor:
    *lead, g, _, _ = t.shape
    t = t.reshape(*lead, g, g, p, p).transpose(-3, -2)
    return t.reshape(*lead, g * p, g * p)


def lsa_patch_attention(query: Tensor, kv: Tensor, patch_size: int) -> Tensor:
    """Patch-local attention between a query map and a key/value map.

    For every channel and position, the query scalar ``a`` attends over the
    ``P x P`` patch ``Z`` of ``kv`` (same channel) that contains the position::

        beta = sum_j softmax(a * Z)_j * Z_j

    Works on any leading dims; the last two must be a square ``S x S`` grid
    with ``P | S``.
    """
    if query.shape != kv.shape:
        raise InputError(f"query/kv shape mismatch: {tuple(query.shape)} vs {tuple(kv.shape)}")
    if query.dim() < 2 or query.shape[-1] != query.shape[-2]:
        raise InputError(f"expected a square spatial grid, got {tuple(query.shape)}")
    if patch_size <= 0 or query.shape[-1] % patch_size:
        raise ConfigError(f"patch size {patch_size} does not divide side {query.shape[-1]}")
    q = _to_patches(query, patch_size)
    z = _to_patches(kv, patch_size)
    weights = torch.softmax(q.unsqueeze(-1) * z.unsqueeze(-2), dim=-1)
    beta = (weights * z.unsqueeze(-2)).sum(-1)
    return _from_patches(beta, patch_size)


def attention_mask(s: Tensor, size: int) -> Tensor:
    """Channel-mean of ``s``, bilinearly upsampled to ``size``, squashed to (0, 1)."""
    m = s.mean(dim=1, keepdim=True)
    m = F.interpolate(m, size=(size, size), mode="bilinear", align_corners=False)
    return torch.sigmoid(m)


def apply_attention(s: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    """Return ``(mask, v)`` with ``v = mask * bias`` broadcast over channels."""
    if s.dim() != 4 or bias.dim() != 4 or s.shape[0] != bias.shape[0]:
        raise InputError(f"cannot fuse attention {tuple(s.shape)} with bias {tuple(bias.shape)}")
    if bias.shape[-1] != bias.shape[-2]:
        raise InputError(f"bias images must be square, got {tuple(bias.shape)}")
    mask = attention_mask(s, bias.shape[-1])
    return mask, mask * bias


class BENet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        n = config.num_scales
        ch = [config.stage_channels(k) for k in range(n)]
        cz = config.bottleneck_channels

        # fork_rng keeps construction from disturbing the caller's global RNG
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.encoder = nn.ModuleList(
                nn.Conv2d(config.in_channels if k == 0 else ch[k - 1], ch[k], 3, stride=2, padding=1)
                for k in range(n)
            )
            self.bottleneck = nn.Conv2d(ch[-1], cz, 1)
            self.dec_entry = nn.Conv2d(cz, ch[-1], 3, padding=1)
            # decoder[k] maps z'_{k+1} -> z'_k
            self.decoder = nn.ModuleList(
                nn.ConvTranspose2d(ch[k + 1], ch[k], 4, stride=2, padding=1) for k in range(n - 1)
            )
            self.out = nn.ConvTranspose2d(ch[0], config.in_channels, 4, stride=2, padding=1)
            self.query_proj = nn.ModuleList(nn.Conv2d(ch[k], cz, 1) for k in range(n))
            self.kv_proj = nn.ModuleList(nn.Conv2d(ch[k], cz, 1) for k in range(n))
            flat = config.in_channels * config.image_size**2
            self.classifier = nn.Sequential(
                nn.Flatten(),
                nn.Linear(flat, config.mlp_hidden),
                nn.ReLU(),
                nn.Linear(config.mlp_hidden, 1),
            )

    def check_input(self, x: Tensor) -> None:
        c = self.config
        expected = (c.in_channels, c.image_size, c.image_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise InputError(f"expected input (N, {', '.join(map(str, expected))}), got {tuple(x.shape)}")

    def check_params(self) -> None:
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise NumericalError(f"parameter {name} has non-finite entries")

    def reconstruct(self, x: Tensor) -> tuple[Tensor, LatentPyramid]:
        self.check_input(x)
        self.check_params()
        enc = []
        h = x
        for conv in self.encoder:
            h = F.relu(conv(h))
            enc.append(h)
        z = self.bottleneck(h)
        h = F.relu(self.dec_entry(z))
        dec = [h]
        for up in reversed(self.decoder):
            h = F.relu(up(h))
            dec.append(h)
        dec.reverse()
        x_o = torch.sigmoid(self.out(h))
        return x_o, LatentPyramid(enc, z, dec)

    def lsa_fuse(self, pyramid: LatentPyramid) -> Tensor:
        """``s = sum_k attention(pool(z_k), pool(z'_k)) + z`` at bottleneck size."""
        pyramid.validate(self.config)
        side = self.config.bottleneck_side
        s = pyramid.bottleneck
        for k, (zk, zpk) in enumerate(zip(pyramid.encoder_feats, pyramid.decoder_feats)):
            q = self.query_proj[k](F.adaptive_avg_pool2d(zk, side))
            kv = self.kv_proj[k](F.adaptive_avg_pool2d(zpk, side))
            s = s + lsa_patch_attention(q, kv, self.config.patch_size)
        return s

    def classify(self, v: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(logit, p)`` per sample, each shaped ``(N,)``."""
        logit = self.classifier(v).squeeze(-1)
        if not torch.isfinite(logit).all():
            raise NumericalError("classifier produced non-finite activations")
        return logit, torch.sigmoid(logit)

    def forward(self, x: Tensor, feed: str = "bias_lsa") -> ForwardBundle:
        if feed not in FEEDS:
            raise ConfigError(f"unknown feed {feed!r}; expected one of {FEEDS}")
        x_o = bias = pyramid = s = mask = None
        if feed == "raw":
            self.check_input(x)
            self.check_params()
            v = x
        else:
            x_o, pyramid = self.reconstruct(x)
            bias = compute_bias(x, x_o)
            if feed == "recon":
                v = x_o
            elif feed == "bias":
                v = bias
            else:
                s = self.lsa_fuse(pyramid)
                mask, v = apply_attention(s, bias)
        logit, p = self.classify(v)
        return ForwardBundle(x_o, bias, pyramid, s, mask, v, logit, p)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
