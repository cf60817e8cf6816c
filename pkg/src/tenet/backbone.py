"""Dilated residual encoder, four-stage decoder and ConvLSTM building blocks."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class EncoderConfig:
    base_channels: int = 64  # c, channels of X
    dilation_levels: int = 4  # K
    level_channels: int = 16  # c', channels of each D^k
    stride: int = 4  # overall downsampling d

    def __post_init__(self):
        if self.dilation_levels < 1:
            raise ValueError("dilation_levels must be >= 1")
        if self.stride < 1 or self.stride & (self.stride - 1):
            raise ValueError("stride must be a power of two")
        if self.base_channels < 4 or self.level_channels < 1:
            raise ValueError("channel counts too small")

    @property
    def out_channels(self):
        return self.base_channels + self.dilation_levels * self.level_channels

    @property
    def dilations(self):
        return [2**k for k in range(1, self.dilation_levels + 1)]

    @property
    def num_stages(self):
        return self.stride.bit_length() - 1

    @property
    def stage_channels(self):
        """Channels after the stem and after each stride-2 stage; the last one is c."""
        c = self.base_channels
        return [max(c >> (self.num_stages - i), 1) for i in range(self.num_stages + 1)]

    @property
    def skip_channels(self):
        # every level except the deepest feeds the decoder
        return self.stage_channels[:-1]


class BatchNorm2d(nn.BatchNorm2d):
    """BatchNorm that can keep using batch statistics in eval mode.

    With ``eval_batch_stats`` set, an eval-mode forward normalises with the
    statistics of the batch it is given (at inference: the frames of one clip)
    and leaves the running buffers untouched.
    """

    eval_batch_stats = False

    def forward(self, x):
        if not self.training and self.eval_batch_stats:
            return F.batch_norm(x, None, None, self.weight, self.bias, True, 0.0, self.eps)
        return super().forward(x)


def conv_bn_relu(cin, cout, stride=1, dilation=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation, bias=False),
        BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class DilatedResidualEncoder(nn.Module):
    """Stride-1 3x3 stem, residual stride-2 stages, then K parallel dilated convs.

    ``forward`` returns ``(F, skips)`` where F = [X, D^1, ..., D^K] along channels
    and ``skips`` are the shallower stage outputs, finest first.
    """

    def __init__(self, in_channels, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        widths = cfg.stage_channels
        self.stem = conv_bn_relu(in_channels, widths[0])
        self.stages = nn.ModuleList(BasicBlock(widths[i], widths[i + 1], stride=2) for i in range(cfg.num_stages))
        self.dilated = nn.ModuleList(conv_bn_relu(cfg.base_channels, cfg.level_channels, dilation=r) for r in cfg.dilations)

    @property
    def out_channels(self):
        return self.cfg.out_channels

    def forward(self, x):
        d = self.cfg.stride
        if x.shape[-2] % d or x.shape[-1] % d:
            raise ValueError(f"input {tuple(x.shape[-2:])} is not divisible by the encoder stride {d}")
        feats = [self.stem(x)]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        top = feats[-1]
        levels = [conv(top) for conv in self.dilated]
        return torch.cat([top, *levels], dim=1), feats[:-1]


class SaliencyDecoder(nn.Module):
    """Four stages of three conv-BN-ReLU blocks ending in a 1x1 conv and a sigmoid.

    Stages are upsampled x2 and joined with the matching encoder skip until the
    finest skip is consumed; the map is finally resized to the requested size.
    """

    def __init__(self, in_channels, skip_channels, widths=(64, 32, 16, 16)):
        super().__init__()
        if len(widths) != 4:
            raise ValueError("the decoder has exactly four stages")
        skip_channels = list(skip_channels)
        self.num_skips = len(skip_channels)
        if self.num_skips > 3:
            raise ValueError("at most three skip connections fit between four stages")
        # skips[-1] is the coarsest; it joins stage 2
        joins = [0] + list(reversed(skip_channels)) + [0] * (3 - self.num_skips)
        stages = []
        cin = in_channels
        for i, width in enumerate(widths):
            cin = cin + joins[i]
            stages.append(nn.Sequential(conv_bn_relu(cin, width), conv_bn_relu(width, width), conv_bn_relu(width, width)))
            cin = width
        self.stages = nn.ModuleList(stages)
        self.head = nn.Conv2d(widths[-1], 1, 1)

    def forward(self, features, skips, out_size):
        skips = list(skips)
        if len(skips) != self.num_skips:
            raise ValueError(f"expected {self.num_skips} skip maps, got {len(skips)}")
        x = self.stages[0](features)
        for i, stage in enumerate(self.stages[1:], start=1):
            if skips:
                x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
                skip = skips.pop()
                if skip.shape[-2:] != x.shape[-2:]:
                    raise ValueError(f"skip at {tuple(skip.shape[-2:])} does not match decoder at {tuple(x.shape[-2:])}")
                x = torch.cat([x, skip], dim=1)
            x = stage(x)
        if tuple(x.shape[-2:]) != tuple(out_size):
            x = F.interpolate(x, size=tuple(out_size), mode="bilinear", align_corners=False)
        return torch.sigmoid(self.head(x))


class ConvLSTMCell(nn.Module):
    def __init__(self, in_channels, hidden_channels, kernel_size=3):
        super().__init__()
        self.hidden_channels = hidden_channels
        self.conv = nn.Conv2d(in_channels + hidden_channels, 4 * hidden_channels, kernel_size, padding=kernel_size // 2)
        nn.init.zeros_(self.conv.bias)

    def zero_state(self, x):
        b, _, h, w = x.shape
        z = x.new_zeros(b, self.hidden_channels, h, w)
        return z, z

    def forward(self, x, state=None):
        h, c = self.zero_state(x) if state is None else state
        if h.shape[-2:] != x.shape[-2:] or h.shape != c.shape:
            raise ValueError(f"input {tuple(x.shape)} does not match state {tuple(h.shape)} / {tuple(c.shape)}")
        gates = self.conv(torch.cat([x, h], dim=1))
        i, f, o, g = torch.chunk(gates, 4, dim=1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


def bidirectional_pass(features, fwd_cell: ConvLSTMCell, bwd_cell: ConvLSTMCell):
    """Run one cell 1..N and the other N..1 from zero states.

    ``features`` is a sequence of (B, C, h, w) maps. Returns two lists of hidden
    states, both indexed by frame.
    """
    features = list(features)
    if not features:
        raise ValueError("bidirectional_pass needs a nonempty sequence")
    if any(f.shape != features[0].shape for f in features):
        raise ValueError("all feature maps in a sequence must share a shape")
    forward, backward = [], [None] * len(features)
    state = None
    for x in features:
        state = fwd_cell(x, state)
        forward.append(state[0])
    state = None
    for n in reversed(range(len(features))):
        state = bwd_cell(features[n], state)
        backward[n] = state[0]
    return forward, backward
