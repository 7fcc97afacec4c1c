"""Cascaded 2x/2x/2x super-resolution generator and the non-cascaded baseline."""
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

PIXEL_MAX = 255.0


@dataclass(frozen=True)
class NetworkConfig:
    width: int = 512
    blocks_per_module: int = 7
    stem_kernel: int = 9
    block_kernel: int = 3
    head_kernel: int = 9
    lrelu_slope: float = 0.2
    width_multiplier: float = 1.0
    cascaded: bool = True

    @classmethod
    def paper(cls):
        return cls()

    @classmethod
    def desk(cls):
        return cls(blocks_per_module=3, width_multiplier=1 / 16)

    @property
    def base(self):
        w = self.width * self.width_multiplier
        if abs(w - round(w)) > 1e-9 or round(w) % 8 != 0:
            raise ValueError(
                f"width * width_multiplier = {w:g} must be an integer divisible by 8")
        return int(round(w))

    def module_widths(self):
        b = self.base
        return (b, b // 2, b // 4)

    def upscale_widths(self):
        return tuple(2 * w for w in self.module_widths())

    def validate(self):
        if not 0 < self.width_multiplier <= 1:
            raise ValueError("width_multiplier must lie in (0, 1]")
        if self.blocks_per_module < 1:
            raise ValueError("blocks_per_module must be >= 1")
        for k in (self.stem_kernel, self.block_kernel, self.head_kernel):
            if k % 2 == 0:
                raise ValueError("kernel sizes must be odd")
        self.base
        return self

    def to_dict(self):
        return asdict(self)


class SROutputs(NamedTuple):
    sr2x: torch.Tensor
    sr4x: torch.Tensor
    sr8x: torch.Tensor


def clip_rgb(x):
    """Clamp to [0, 255]; gradient passes unchanged inside the range, zero outside."""
    return torch.clamp(x, 0.0, PIXEL_MAX)


def pixel_shuffle(x, r=2):
    """(N, C*r*r, H, W) -> (N, C, r*H, r*W) with out[c, r*i+di, r*j+dj] = x[c*r*r + di*r + dj, i, j]."""
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    n, c, h, w = x.shape
    if c % (r * r):
        raise ValueError(f"channel count {c} is not divisible by {r * r}")
    out = x.reshape(n, c // (r * r), r, r, h, w).permute(0, 1, 4, 2, 5, 3)
    out = out.reshape(n, c // (r * r), h * r, w * r)
    return out.squeeze(0) if squeeze else out


def pixel_unshuffle(x, r=2):
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    n, c, h, w = x.shape
    out = x.reshape(n, c, h // r, r, w // r, r).permute(0, 1, 3, 5, 2, 4)
    out = out.reshape(n, c * r * r, h // r, w // r)
    return out.squeeze(0) if squeeze else out


class PixelShuffle(nn.Module):
    def __init__(self, r=2):
        super().__init__()
        self.r = r

    def forward(self, x):
        return pixel_shuffle(x, self.r)


def conv(cin, cout, k):
    return nn.Conv2d(cin, cout, k, padding=k // 2)


def bn(c):
    # running = 0.9 * running + 0.1 * batch
    return nn.BatchNorm2d(c, eps=1e-5, momentum=0.1)


class ResidualBlock(nn.Module):
    """y = LReLU(x + BN(conv(LReLU(BN(conv(x))))))

    ``hidden`` defaults to the block width; a wider hidden layer keeps the
    identity skip when the block filter count exceeds the feature width.
    """

    def __init__(self, channels, kernel=3, slope=0.2, hidden=None):
        super().__init__()
        hidden = channels if hidden is None else hidden
        self.channels = channels
        self.conv1 = conv(channels, hidden, kernel)
        self.bn1 = bn(hidden)
        self.conv2 = conv(hidden, channels, kernel)
        self.bn2 = bn(channels)
        self.slope = slope

    def forward(self, x):
        if x.shape[-3] != self.channels:
            raise ValueError(f"residual block expects {self.channels} channels, got {x.shape[-3]}")
        y = F.leaky_relu(self.bn1(self.conv1(x)), self.slope)
        y = self.bn2(self.conv2(y))
        return F.leaky_relu(x + y, self.slope)


class SRModule(nn.Module):
    """p residual blocks, a conv doubling the filters, then 2x sub-pixel upscaling."""

    def __init__(self, channels, blocks, kernel, slope):
        super().__init__()
        self.blocks = nn.Sequential(*[ResidualBlock(channels, kernel, slope) for _ in range(blocks)])
        self.expand = conv(channels, 2 * channels, kernel)
        self.shuffle = PixelShuffle(2)
        self.slope = slope

    def forward(self, x):
        x = self.blocks(x)
        x = F.leaky_relu(self.expand(x), self.slope)
        return self.shuffle(x)


class RGBHead(nn.Module):
    """Single large-kernel conv to RGB; output is mapped to pixel units then clipped."""

    def __init__(self, channels, kernel):
        super().__init__()
        self.conv = conv(channels, 3, kernel)

    def forward(self, x):
        return clip_rgb(127.5 * self.conv(x) + 127.5)


def _normalize_input(x):
    return x / 127.5 - 1.0


def _check_input(x):
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if tuple(x.shape[-3:]) != (3, 24, 24):
        raise ValueError(f"expected a (3, 24, 24) low-resolution input, got {tuple(x.shape)}")
    return x


class SRNetwork(nn.Module):
    """Stem -> three SR modules (with 2x/4x branch heads) -> final residual block -> head."""

    def __init__(self, config):
        super().__init__()
        self.config = config.validate()
        c = config
        w1, w2, w3 = c.module_widths()
        self.stem = conv(3, w1, c.stem_kernel)
        self.module1 = SRModule(w1, c.blocks_per_module, c.block_kernel, c.lrelu_slope)
        self.branch1 = RGBHead(w2, c.head_kernel)
        self.module2 = SRModule(w2, c.blocks_per_module, c.block_kernel, c.lrelu_slope)
        self.branch2 = RGBHead(w3, c.head_kernel)
        self.module3 = SRModule(w3, c.blocks_per_module, c.block_kernel, c.lrelu_slope)
        # after the last shuffle the trunk carries w3/2 maps; the final block filters at w3
        self.final_block = ResidualBlock(w3 // 2, c.block_kernel, c.lrelu_slope, hidden=w3)
        self.head = RGBHead(w3 // 2, c.head_kernel)

    def forward(self, lr, intermediates=True):
        squeeze = lr.dim() == 3
        x = _check_input(lr)
        f = F.leaky_relu(self.stem(_normalize_input(x)), self.config.lrelu_slope)
        f2 = self.module1(f)
        f4 = self.module2(f2)
        f8 = self.final_block(self.module3(f4))
        sr8 = self.head(f8)
        if not intermediates:
            return sr8.squeeze(0) if squeeze else sr8
        out = SROutputs(self.branch1(f2), self.branch2(f4), sr8)
        if squeeze:
            out = SROutputs(*(t.squeeze(0) for t in out))
        return out


class BaselineNetwork(nn.Module):
    """Non-cascaded generator: all residual blocks at LR, three upscalers at the end."""

    def __init__(self, config):
        super().__init__()
        self.config = config.validate()
        c = config
        w1, w2, w3 = c.module_widths()
        self.stem = conv(3, w1, c.stem_kernel)
        self.blocks = nn.Sequential(*[ResidualBlock(w1, c.block_kernel, c.lrelu_slope)
                                      for _ in range(3 * c.blocks_per_module)])
        self.up = nn.ModuleList([conv(w, 2 * w, c.block_kernel) for w in (w1, w2, w3)])
        self.shuffles = nn.ModuleList([PixelShuffle(2) for _ in range(3)])
        self.head = RGBHead(w3 // 2, c.head_kernel)

    def forward(self, lr, intermediates=True):
        squeeze = lr.dim() == 3
        x = _check_input(lr)
        slope = self.config.lrelu_slope
        f = F.leaky_relu(self.stem(_normalize_input(x)), slope)
        f = self.blocks(f)
        for up, shuffle in zip(self.up, self.shuffles):
            f = shuffle(F.leaky_relu(up(f), slope))
        sr8 = self.head(f)
        return sr8.squeeze(0) if squeeze else sr8


def init_weights(net, seed, slope=0.2):
    """Fan-in scaled normal weights, zero biases, identity batch-norm."""
    g = torch.Generator().manual_seed(int(seed))
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            std = (2.0 / ((1 + slope ** 2) * fan_in)) ** 0.5
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) * std)
                m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
            m.reset_running_stats()
    for m in net.modules():
        if isinstance(m, RGBHead):
            with torch.no_grad():
                m.conv.weight.mul_(0.1)
    return net


def build_network(config=None, seed=0):
    config = config or NetworkConfig.desk()
    if not config.cascaded:
        return build_baseline_network(config, seed)
    return init_weights(SRNetwork(config), seed, config.lrelu_slope)


def build_baseline_network(config=None, seed=0):
    config = config or NetworkConfig.desk()
    if config.cascaded:
        config = NetworkConfig(**{**config.to_dict(), "cascaded": False})
    return init_weights(BaselineNetwork(config), seed, config.lrelu_slope)


def layer_census(net):
    """Count weight layers the way the architecture is usually described."""
    convs = sum(isinstance(m, nn.Conv2d) for m in net.modules())
    shuffles = sum(isinstance(m, PixelShuffle) for m in net.modules())
    blocks = sum(isinstance(m, ResidualBlock) for m in net.modules())
    heads = sum(isinstance(m, RGBHead) for m in net.modules())
    branch_convs = heads - 1
    trunk_convs = convs - branch_convs
    return {
        "conv_layers": convs,
        "trunk_conv_layers": trunk_convs,
        "branch_conv_layers": branch_convs,
        "subpixel_layers": shuffles,
        "clip_layers": 1,
        "residual_blocks": blocks,
        # trunk depth at inference: trunk convs + sub-pixel layers + output clip
        "depth": trunk_convs + shuffles + 1,
    }


def parameter_count(net):
    return sum(p.numel() for p in net.parameters())
