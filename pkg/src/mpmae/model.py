"""Masked convolutional encoder with shallow per-task decoders.

Sparse convolution over visible patches is emulated densely: masked
positions are zeroed before every spatial operator and re-zeroed after it,
and normalization statistics only see visible positions. At visible
positions this is numerically the same as a true sparse forward.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn as nn
from einops import rearrange

from .errors import ConfigError, InvalidArgument, InvalidState
from .masking import PatchGrid, mask_to_grid, upsample_mask
from .schema import TaskSpec

STAGE_FACTOR = 8  # three 2x downsamplings between the four stages


@dataclass
class EncoderConfig:
    in_channels: int = 12
    depths: tuple[int, ...] = (2, 2, 6, 2)
    widths: tuple[int, ...] = (40, 80, 160, 320)
    image_size: int = 56
    patch_size: int = 8
    stem_kind: str = "modified"

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.depths) != 4 or len(self.widths) != 4:
            raise ConfigError("encoder needs exactly 4 stages")
        if min(self.widths) <= 0 or min(self.depths) <= 0 or self.in_channels <= 0:
            raise ConfigError(f"widths/depths must be positive: {self.widths} {self.depths}")
        if self.stem_kind not in ("modified", "original"):
            raise ConfigError(f"unknown stem kind {self.stem_kind!r}")
        if self.patch_size % STAGE_FACTOR:
            raise ConfigError(f"patch size {self.patch_size} must be a multiple of {STAGE_FACTOR}")
        PatchGrid(self.image_size, self.patch_size)

    @property
    def stem_stride(self) -> int:
        return self.patch_size // STAGE_FACTOR

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.image_size, self.patch_size)

    def with_image_size(self, image_size: int) -> "EncoderConfig":
        return EncoderConfig(**{**asdict(self), "image_size": image_size})


ENCODER_PRESETS = {
    "atto": dict(depths=(2, 2, 6, 2), widths=(40, 80, 160, 320)),
    "atto-half": dict(depths=(2, 2, 6, 2), widths=(20, 40, 80, 160)),
    "micro": dict(depths=(1, 1, 2, 1), widths=(16, 32, 64, 96)),
    "toy": dict(depths=(1, 1, 1, 1), widths=(8, 8, 8, 8)),
}


@dataclass
class DecoderConfig:
    width: int = 256
    blocks: int = 1

    def __post_init__(self):
        if self.width <= 0:
            raise ConfigError("decoder width must be positive")
        if self.blocks != 1:
            raise ConfigError("decoders have exactly one block")


class LayerNorm2d(nn.LayerNorm):
    """LayerNorm over the channel axis of an NCHW tensor."""

    def forward(self, x):
        return super().forward(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class GRN(nn.Module):
    """Global response normalization on channels-last input.

    ``visible`` (B, H, W, 1) restricts the spatial L2 response to visible
    positions. Zero-initialized gamma/beta make the layer an identity.
    """

    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.gamma = nn.Parameter(torch.zeros(1, 1, 1, dim))
        self.beta = nn.Parameter(torch.zeros(1, 1, 1, dim))
        self.eps = eps

    def forward(self, x, visible=None):
        src = x if visible is None else x * visible
        gx = torch.sqrt((src * src).sum(dim=(1, 2), keepdim=True))
        nx = gx / (gx.mean(dim=-1, keepdim=True) + self.eps)
        return self.gamma * (x * nx) + self.beta + x


class Block(nn.Module):
    """Depthwise 7x7 conv, LayerNorm, inverted MLP with GRN, residual."""

    def __init__(self, dim: int):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, kernel_size=7, padding=3, groups=dim)
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.pwconv1 = nn.Linear(dim, 4 * dim)
        self.act = nn.GELU()
        self.grn = GRN(4 * dim)
        self.pwconv2 = nn.Linear(4 * dim, dim)

    def forward(self, x, visible=None):
        """``visible``: (B, 1, H, W) float, 1 at visible positions, or None for dense."""
        shortcut = x
        if visible is not None:
            x = x * visible
        x = self.dwconv(x).permute(0, 2, 3, 1)
        x = self.act(self.pwconv1(self.norm(x)))
        x = self.grn(x, None if visible is None else visible.permute(0, 2, 3, 1))
        x = self.pwconv2(x).permute(0, 3, 1, 2)
        out = shortcut + x
        return out if visible is None else out * visible


def masked_block_forward(block: Block, features, pixel_visible):
    return block(features, pixel_visible)


class Stem(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        w, s = cfg.widths[0], cfg.stem_stride
        self.kind = cfg.stem_kind
        if self.kind == "modified":
            self.conv = nn.Conv2d(cfg.in_channels, w, kernel_size=3, stride=1, padding=1)
            self.down = nn.Conv2d(w, w, kernel_size=s, stride=s, groups=w) if s > 1 else nn.Identity()
        else:
            self.conv = nn.Conv2d(cfg.in_channels, w, kernel_size=s, stride=s)
            self.down = nn.Identity()
        self.norm = LayerNorm2d(w, eps=1e-6)

    def forward(self, x, vis_full=None, vis_out=None):
        """Return (full-resolution features or None, stem output)."""
        if vis_full is not None:
            x = x * vis_full
        x = self.conv(x)
        full = None
        if self.kind == "modified":
            if vis_full is not None:
                x = x * vis_full
            full = x
            x = self.down(x)
        x = self.norm(x)
        if vis_out is not None:
            x = x * vis_out
        return full, x


def stem_forward(stem: Stem, x):
    return stem(x)


class MaskedEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = Stem(cfg)
        self.downsample = nn.ModuleList()
        self.stages = nn.ModuleList()
        for i, (d, w) in enumerate(zip(cfg.depths, cfg.widths)):
            if i > 0:
                self.downsample.append(
                    nn.Sequential(LayerNorm2d(cfg.widths[i - 1], eps=1e-6), nn.Conv2d(cfg.widths[i - 1], w, 2, stride=2))
                )
            self.stages.append(nn.ModuleList(Block(w) for _ in range(d)))

    @property
    def out_dim(self) -> int:
        return self.cfg.widths[-1]

    def pyramid_dims(self) -> list[int]:
        first = [self.cfg.widths[0]] if self.cfg.stem_kind == "modified" else []
        return first + list(self.cfg.widths)

    def forward(self, x, mask=None):
        """Encode ``x`` (B, C, H, W); ``mask`` (B, N) bool with True = masked.

        Returns the token grid (B, C4, g, g) with zeros at masked cells and
        the feature pyramid: full-resolution stem features (modified stem
        only) followed by the four stage outputs.
        """
        b, _, h, w = x.shape
        if h != w or h % self.cfg.patch_size:
            raise InvalidArgument(f"input {h}x{w} incompatible with patch size {self.cfg.patch_size}")
        grid = PatchGrid(h, self.cfg.patch_size)

        def vis(res):
            if mask is None:
                return None
            return (~upsample_mask(mask, grid, res)).unsqueeze(1).to(x.dtype)

        s = self.cfg.stem_stride
        full, x = self.stem(x, vis(h), vis(h // s))
        pyramid = [full] if full is not None else []
        res = h // s
        for i, stage in enumerate(self.stages):
            if i > 0:
                res //= 2
                x = self.downsample[i - 1](x)
                v = vis(res)
                if v is not None:
                    x = x * v
            v = vis(res)
            for blk in stage:
                x = blk(x, v)
            pyramid.append(x)
        return x, pyramid

    def encode(self, x, mask=None):
        return self.forward(x, mask)


def fill_mask_tokens(z, mask, mask_token):
    """Replace masked cells of ``z`` (B, C, g, g) with ``mask_token`` (C,)."""
    if mask is None:
        return z
    g = z.shape[-1]
    m = mask_to_grid(mask, PatchGrid(g, 1)).unsqueeze(1)
    return torch.where(m, mask_token.view(1, -1, 1, 1).to(z.dtype), z)


class TaskDecoder(nn.Module):
    """1x1 projection, one dense block, linear head."""

    def __init__(self, task: TaskSpec, in_dim: int, width: int, patch_size: int):
        super().__init__()
        self.task = task
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_dim, width, kernel_size=1)
        self.block = Block(width)
        if task.is_pixel:
            self.head = nn.Conv2d(width, task.output_channels * patch_size**2, kernel_size=1)
        else:
            self.head = nn.Linear(width, task.output_channels)

    def features(self, tokens):
        return self.block(self.proj(tokens))

    def forward(self, tokens, mask=None):
        f = self.features(tokens)
        if self.task.is_pixel:
            out = self.head(f)
            p = self.patch_size
            return rearrange(out, "b (c p1 p2) gh gw -> b c (gh p1) (gw p2)", p1=p, p2=p)
        return self.head(pool_masked(f, mask))


def pool_masked(features, mask):
    """Average (B, C, g, g) features over masked cells only."""
    if mask is None:
        raise InvalidState("image-level decoding pools over masked cells; no mask given")
    g = features.shape[-1]
    m = mask_to_grid(mask, PatchGrid(g, 1)).unsqueeze(1).to(features.dtype)
    count = m.sum(dim=(2, 3))
    if (count == 0).any():
        raise InvalidState("cannot pool over an empty set of masked cells")
    return (features * m).sum(dim=(2, 3)) / count


def decode_pixel_task(decoder: TaskDecoder, dense_tokens):
    if not decoder.task.is_pixel:
        raise ConfigError(f"task {decoder.task.task_id} is not pixel-level")
    return decoder(dense_tokens)


def decode_image_task(decoder: TaskDecoder, dense_tokens, mask):
    if decoder.task.is_pixel:
        raise ConfigError(f"task {decoder.task.task_id} is not image-level")
    return decoder(dense_tokens, mask)


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class MPMAE(nn.Module):
    """Encoder, shared mask token, one decoder per task, task log-variances."""

    def __init__(self, enc_cfg: EncoderConfig, tasks: Sequence[TaskSpec], dec_cfg: DecoderConfig | None = None):
        super().__init__()
        if not tasks:
            raise ConfigError("at least one pretext task is required")
        self.enc_cfg = enc_cfg
        self.dec_cfg = dec_cfg or DecoderConfig()
        self.tasks = list(tasks)
        self.encoder = MaskedEncoder(enc_cfg)
        self.mask_token = nn.Parameter(torch.zeros(enc_cfg.widths[-1]))
        self.decoders = nn.ModuleDict(
            {t.task_id: TaskDecoder(t, enc_cfg.widths[-1], self.dec_cfg.width, enc_cfg.patch_size) for t in self.tasks}
        )
        # s_t = log(sigma_t^2)
        self.log_vars = nn.Parameter(torch.zeros(len(self.tasks)))
        init_weights(self)
        nn.init.trunc_normal_(self.mask_token, std=0.02)

    @property
    def task_ids(self) -> list[str]:
        return [t.task_id for t in self.tasks]

    def forward(self, x, mask):
        z, _ = self.encoder(x, mask)
        dense = fill_mask_tokens(z, mask, self.mask_token)
        return {tid: dec(dense, mask) for tid, dec in self.decoders.items()}


def count_parameters(model: nn.Module) -> dict[str, int]:
    """Learnable scalar counts per component (encoder / decoders / log-variances)."""
    n = lambda mod: sum(p.numel() for p in mod.parameters() if p.requires_grad)  # noqa: E731
    if isinstance(model, MaskedEncoder):
        return {"encoder": n(model), "total": n(model)}
    out = {
        "encoder": n(model.encoder),
        "mask_token": model.mask_token.numel(),
        "decoders": n(model.decoders),
        "log_vars": model.log_vars.numel(),
    }
    out["total"] = sum(out.values())
    return out


def encoder_config_from(preset: str = "atto", **overrides) -> EncoderConfig:
    if preset not in ENCODER_PRESETS:
        raise ConfigError(f"unknown encoder preset {preset!r}; choose from {sorted(ENCODER_PRESETS)}")
    return EncoderConfig(**{**ENCODER_PRESETS[preset], **overrides})

