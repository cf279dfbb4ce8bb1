"""Label-conditioned U-Net noise predictor.

Three resolutions with a bottleneck "middle block" of exactly 13 named
layers: residual layers 1-5, attention layers 6-8, residual layers 9-13.
Fine-tuning addresses these by name ("middle.1" .. "middle.13") and the
label embedding table as "label_embedding". Label convention: forward takes
0-based class labels with -1 meaning the null (unconditional) label; the
embedding table has C+1 rows with row 0 reserved for null.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError

MIDDLE_LAYER_COUNT = 13
ATTENTION_LAYERS = (6, 7, 8)


def middle_layer_names() -> list[str]:
    return [f"middle.{i}" for i in range(1, MIDDLE_LAYER_COUNT + 1)]


def middle_layer_kinds() -> dict[str, str]:
    return {
        f"middle.{i}": "attention" if i in ATTENTION_LAYERS else "residual"
        for i in range(1, MIDDLE_LAYER_COUNT + 1)
    }


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / (half - 1)
    )
    args = t.to(torch.float32)[:, None] * freqs[None, :]
    return torch.cat([args.sin(), args.cos()], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class AttnBlock(nn.Module):
    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(8, channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        qkv = self.qkv(self.norm(x)).reshape(b, 3, self.heads, c // self.heads, h * w)
        q, k, v = qkv.unbind(dim=1)
        attn = torch.softmax(
            torch.einsum("bhdn,bhdm->bhnm", q, k) / math.sqrt(c // self.heads), dim=-1
        )
        out = torch.einsum("bhnm,bhdm->bhdn", attn, v).reshape(b, c, h, w)
        return x + self.proj(out)


class ConditionalDenoiser(nn.Module):
    """Noise predictor eps(x_t, y, t) with named parameter groups."""

    def __init__(self, num_classes: int, image_size: int, base_width: int = 32):
        super().__init__()
        if image_size % 4 != 0:
            raise ConfigError(
                f"image_size must be divisible by 4 (two downsamplings), got {image_size}"
            )
        self.num_classes = num_classes
        self.image_size = image_size
        self.base_width = base_width
        w = base_width
        emb_dim = 4 * w

        self.time_mlp = nn.Sequential(
            nn.Linear(w, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        self.label_emb = nn.Embedding(num_classes + 1, emb_dim)

        self.stem = nn.Conv2d(3, w, 3, padding=1)
        self.enc1 = ResBlock(w, w, emb_dim)
        self.down1 = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.enc2 = ResBlock(w, 2 * w, emb_dim)
        self.down2 = nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1)
        self.enc3 = ResBlock(2 * w, 2 * w, emb_dim)

        blocks: list[nn.Module] = []
        for i in range(1, MIDDLE_LAYER_COUNT + 1):
            if i in ATTENTION_LAYERS:
                blocks.append(AttnBlock(2 * w))
            else:
                blocks.append(ResBlock(2 * w, 2 * w, emb_dim))
        self.middle = nn.ModuleList(blocks)

        self.dec3 = ResBlock(4 * w, 2 * w, emb_dim)
        self.up2 = nn.Conv2d(2 * w, 2 * w, 3, padding=1)
        self.dec2 = ResBlock(4 * w, w, emb_dim)
        self.up1 = nn.Conv2d(w, w, 3, padding=1)
        self.dec1 = ResBlock(2 * w, w, emb_dim)
        self.out_norm = nn.GroupNorm(8, w)
        self.out_conv = nn.Conv2d(w, 3, 3, padding=1)

    def forward(
        self, x: torch.Tensor, y: int | torch.Tensor, t: int | torch.Tensor
    ) -> torch.Tensor:
        b = x.shape[0]
        y = torch.as_tensor(y, dtype=torch.int64)
        if y.dim() == 0:
            y = y.expand(b)
        if (y < -1).any() or (y >= self.num_classes).any():
            raise ConfigError(
                f"labels must lie in -1..{self.num_classes - 1} (null is -1)"
            )
        t = torch.as_tensor(t, dtype=torch.int64)
        if t.dim() == 0:
            t = t.expand(b)
        emb = self.time_mlp(timestep_embedding(t, self.base_width))
        emb = emb + self.label_emb(y + 1)

        h1 = self.enc1(self.stem(x), emb)
        h2 = self.enc2(self.down1(h1), emb)
        h3 = self.enc3(self.down2(h2), emb)

        h = h3
        for block in self.middle:
            h = block(h, emb)

        h = self.dec3(torch.cat([h, h3], dim=1), emb)
        h = self.up2(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.dec2(torch.cat([h, h2], dim=1), emb)
        h = self.up1(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.dec1(torch.cat([h, h1], dim=1), emb)
        return self.out_conv(F.silu(self.out_norm(h)))

    def group_of(self, param_name: str) -> str:
        """Map a named_parameters() entry to its parameter group."""
        if param_name.startswith("label_emb."):
            return "label_embedding"
        if param_name.startswith("time_mlp."):
            return "time_embedding"
        if param_name.startswith("middle."):
            return f"middle.{int(param_name.split('.')[1]) + 1}"
        encoder = ("stem.", "enc1.", "down1.", "enc2.", "down2.", "enc3.")
        if param_name.startswith(encoder):
            return "encoder"
        return "decoder"

    def parameter_groups(self) -> dict[str, list[str]]:
        """Group name -> parameter names; partitions named_parameters()."""
        groups: dict[str, list[str]] = {}
        for name, _ in self.named_parameters():
            groups.setdefault(self.group_of(name), []).append(name)
        return groups
