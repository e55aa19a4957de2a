"""Network building blocks.

Shapes are ``(N, C, H, W)`` throughout. For the desk profile the BEV raster and
the image feature map are 32x88 and the latent grid 4x11; the paper-scale
profile uses 64x176 and 8x22.
"""
from __future__ import annotations

import torch
from torch import nn

STRIDE = 8


def _conv_block(cin, cout, stride=1):
    # instance norm: identical statistics in train and eval mode, no running buffers
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.InstanceNorm2d(cout, affine=True),
        nn.ReLU(inplace=True),
    )


class BevEncoder(nn.Module):
    """Three stride-2 conv blocks followed by a 1x1 projection to the latent.

    With ``latent_norm`` every latent cell is rescaled to unit RMS over its
    channels, so the noise mixing in :func:`corrupt` acts on unit-variance
    latents instead of being outscaled by the encoder.
    """

    def __init__(self, in_channels: int, latent_channels: int = 64,
                 widths: tuple[int, ...] = (32, 64, 128), latent_norm: bool = False):
        super().__init__()
        self.latent_norm = latent_norm
        layers, c = [], in_channels
        for w in widths:
            layers += [_conv_block(c, w, stride=2), _conv_block(w, w)]
            c = w
        self.body = nn.Sequential(*layers)
        self.proj = nn.Conv2d(c, latent_channels, 1)
        nn.init.zeros_(self.proj.bias)

    def forward(self, y):
        z = self.proj(self.body(y))
        if self.latent_norm:
            z = z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-6)
        return z


class _UpBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.conv = _conv_block(cin, cout)

    def forward(self, x):
        return self.conv(self.up(x))


class BevDecoder(nn.Module):
    """Mirror of :class:`BevEncoder`; returns logits (apply ``sigmoid`` for maps)."""

    def __init__(self, out_channels: int, latent_channels: int = 64,
                 widths: tuple[int, ...] = (128, 64, 32)):
        super().__init__()
        self.stem = _conv_block(latent_channels, widths[0])
        blocks, c = [], widths[0]
        for w in widths:
            blocks.append(_UpBlock(c, w))
            c = w
        self.blocks = nn.Sequential(*blocks)
        self.out = nn.Conv2d(c, out_channels, 3, padding=1)
        nn.init.zeros_(self.out.bias)

    def forward(self, z):
        return self.out(self.blocks(self.stem(z)))


class Backbone(nn.Module):
    """Four conv blocks with total output stride 4, single scale."""

    def __init__(self, out_channels: int = 32, widths: tuple[int, ...] = (16, 24, 32)):
        super().__init__()
        w1, w2, w3 = widths
        self.body = nn.Sequential(
            _conv_block(3, w1, stride=2),
            _conv_block(w1, w2),
            _conv_block(w2, w3, stride=2),
            _conv_block(w3, out_channels),
        )

    def forward(self, x):
        return self.body(x)


class ColumnAttentionLayer(nn.Module):
    """Pre-norm transformer layer over sequences of shape ``(B, L, C)``."""

    def __init__(self, dim: int, heads: int = 4, ff_mult: int = 4, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_mult * dim), nn.GELU(),
                                nn.Linear(ff_mult * dim, dim))
        # identity at initialisation
        nn.init.zeros_(self.attn.out_proj.weight)
        nn.init.zeros_(self.attn.out_proj.bias)
        nn.init.zeros_(self.ff[2].weight)
        nn.init.zeros_(self.ff[2].bias)

    def forward(self, x, pos):
        h = self.norm1(x)
        qk = h + pos
        x = x + self.attn(qk, qk, h, need_weights=False)[0]
        return x + self.ff(self.norm2(x))


class ColumnTransformer(nn.Module):
    """Self-attention along each feature-map column independently.

    ``(N, C, H, W)`` is permuted so that every ``(n, w)`` column becomes a
    length-``H`` sequence. Weights are shared across columns and the only
    positional embedding is vertical (added to queries and keys), so columns
    never interact.
    """

    def __init__(self, dim: int, height: int, layers: int = 2, heads: int = 4,
                 ff_mult: int = 4):
        super().__init__()
        self.height = height
        self.pos = nn.Parameter(torch.zeros(1, height, dim))
        nn.init.normal_(self.pos, std=0.02)
        self.layers = nn.ModuleList(
            [ColumnAttentionLayer(dim, heads, ff_mult) for _ in range(layers)])

    def forward(self, f):
        n, c, h, w = f.shape
        if h != self.height:
            raise ValueError(f"expected feature height {self.height}, got {h}")
        t = f.permute(0, 3, 2, 1).reshape(n * w, h, c)
        for layer in self.layers:
            t = layer(t, self.pos)
        return t.reshape(n, w, h, c).permute(0, 3, 2, 1).contiguous()


class LatentHead(nn.Module):
    """Three stride-2 conv blocks reducing a feature map to the latent grid."""

    def __init__(self, in_channels: int = 64, latent_channels: int = 64,
                 width: int = 64):
        super().__init__()
        self.body = nn.Sequential(
            _conv_block(in_channels, width, stride=2),
            _conv_block(width, width, stride=2),
            _conv_block(width, width, stride=2),
        )
        self.proj = nn.Conv2d(width, latent_channels, 1)

    def forward(self, t):
        return self.proj(self.body(t))


class BevAutoencoderNet(nn.Module):
    def __init__(self, n_classes: int, latent_channels: int = 64,
                 widths: tuple[int, ...] = (32, 64, 128), latent_norm: bool = False):
        super().__init__()
        self.encoder = BevEncoder(n_classes, latent_channels, widths, latent_norm)
        self.decoder = BevDecoder(n_classes, latent_channels, tuple(reversed(widths)))


class AlignmentNet(nn.Module):
    """Image -> latent pipeline: backbone, optional column transformer, head."""

    def __init__(self, feature_height: int, channels: int = 64, latent_channels: int = 64,
                 column_transformer: bool = True, layers: int = 2, heads: int = 4,
                 ff_mult: int = 4, backbone_widths: tuple[int, ...] = (16, 24, 32)):
        super().__init__()
        self.backbone = Backbone(channels, backbone_widths)
        self.transformer = (ColumnTransformer(channels, feature_height, layers, heads, ff_mult)
                            if column_transformer else nn.Identity())
        self.head = LatentHead(channels, latent_channels, channels)

    def forward(self, x):
        return self.head(self.transformer(self.backbone(x)))
