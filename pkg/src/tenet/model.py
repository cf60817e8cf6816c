"""The three-branch network: spatial excitation, temporal excitation, video saliency."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from tenet.backbone import BatchNorm2d, ConvLSTMCell, DilatedResidualEncoder, EncoderConfig, SaliencyDecoder, bidirectional_pass
from tenet.excitation import ExcitationRate, downsample_map, excite, make_excitation_map

FUSIONS = ("concat", "sum")
NORM_STATS = ("clip", "running")
RATE_NAMES = ("s2t", "s2v_fwd", "t2v_fwd", "s2v_bwd", "t2v_bwd")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder_widths: tuple[int, int, int, int] = (64, 32, 16, 16)
    # How the spatially- and temporally-excited hidden states are joined.
    fusion: str = "concat"
    # False replaces every excitation map by ones (the no-excitation ablation).
    excitation: bool = True
    # Excitation maps enter their consumers as constants.
    detach_excitation: bool = True
    # Normalisation statistics in eval mode: those of the clip being processed
    # (as during training, where a video batch is one clip) or the running ones.
    eval_norm: str = "clip"

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if self.eval_norm not in NORM_STATS:
            raise ValueError(f"eval_norm must be one of {NORM_STATS}")


@dataclass
class FrameOutputs:
    """Per-frame maps, each (B, N, 1, H, W)."""

    saliency_spatial: torch.Tensor
    saliency_temporal: torch.Tensor
    saliency_video: torch.Tensor
    excitation_spatial: torch.Tensor
    excitation_temporal: torch.Tensor

    def __len__(self):
        return self.saliency_video.shape[1]


@dataclass
class VideoFeatures:
    """Encoder skips and ConvLSTM states of a clip; independent of any excitation map."""

    skips: list  # per level, (B*N, c, h, w)
    forward: torch.Tensor  # (B, N, C, h, w)
    backward: torch.Tensor
    out_size: tuple


def _flatten(x):
    return x.reshape(-1, *x.shape[2:])


def _unflatten(x, b, n):
    return x.reshape(b, n, *x.shape[1:])


class TENet(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        enc = cfg.encoder
        channels = enc.out_channels
        self.spatial_encoder = DilatedResidualEncoder(3, enc)
        self.spatial_decoder = SaliencyDecoder(channels, enc.skip_channels, cfg.decoder_widths)
        self.temporal_encoder = DilatedResidualEncoder(2, enc)
        self.temporal_decoder = SaliencyDecoder(channels, enc.skip_channels, cfg.decoder_widths)
        self.video_encoder = DilatedResidualEncoder(3, enc)
        self.lstm_fwd = ConvLSTMCell(channels, channels)
        self.lstm_bwd = ConvLSTMCell(channels, channels)
        per_direction = 2 * channels if cfg.fusion == "concat" else channels
        self.saliency_decoder = SaliencyDecoder(2 * per_direction, enc.skip_channels, cfg.decoder_widths)
        self.rates = nn.ModuleDict({name: ExcitationRate() for name in RATE_NAMES})
        for module in self.modules():
            if isinstance(module, BatchNorm2d):
                module.eval_batch_stats = cfg.eval_norm == "clip"
        # Internal: skip the excitation operator entirely (used to check E == 1 is an identity).
        self.bypass_excitation = False

    def betas(self):
        return {name: rate() for name, rate in self.rates.items()}

    def _consumable(self, excitation):
        if not self.cfg.excitation:
            return torch.ones_like(excitation)
        return excitation.detach() if self.cfg.detach_excitation else excitation

    def _excite(self, features, excitation, rate):
        if self.bypass_excitation:
            return features
        return excite(features, downsample_map(excitation, features.shape[-2:]), self.rates[rate]())

    def _map(self, gt, saliency, alpha):
        if not self.cfg.excitation:
            return torch.ones_like(saliency)
        return make_excitation_map(gt, saliency, alpha)

    def spatial_branch(self, frames, gt=None, alpha=0.0):
        """frames (M, 3, H, W) -> (S^s, E^s), each (M, 1, H, W)."""
        feats, skips = self.spatial_encoder(frames)
        saliency = self.spatial_decoder(feats, skips, frames.shape[-2:])
        return saliency, self._map(gt, saliency, alpha)

    def temporal_features(self, flows):
        return self.temporal_encoder(flows)

    def temporal_decode(self, encoded, exc_spatial, out_size):
        feats, skips = encoded
        excited = self._excite(feats, self._consumable(exc_spatial), "s2t")
        return self.temporal_decoder(excited, skips, out_size)

    def temporal_branch(self, flows, exc_spatial, gt=None, alpha=0.0):
        """flows (M, 2, H, W), E^s (M, 1, H, W) -> (S^t, E^t)."""
        saliency = self.temporal_decode(self.temporal_features(flows), exc_spatial, flows.shape[-2:])
        return saliency, self._map(gt, saliency, alpha)

    def video_features(self, frames) -> VideoFeatures:
        b, n = frames.shape[:2]
        feats, skips = self.video_encoder(_flatten(frames))
        seq = _unflatten(feats, b, n)
        fwd, bwd = bidirectional_pass([seq[:, i] for i in range(n)], self.lstm_fwd, self.lstm_bwd)
        return VideoFeatures(skips, torch.stack(fwd, 1), torch.stack(bwd, 1), tuple(frames.shape[-2:]))

    def _fuse(self, hidden, exc_s, exc_t, direction):
        by_space = self._excite(hidden, exc_s, f"s2v_{direction}")
        by_time = self._excite(hidden, exc_t, f"t2v_{direction}")
        if self.cfg.fusion == "concat":
            return torch.cat([by_space, by_time], dim=1)
        return by_space + by_time

    def video_decode(self, vf: VideoFeatures, exc_spatial, exc_temporal):
        """E maps (B, N, 1, H, W) -> S^v (B, N, 1, H, W)."""
        b, n = vf.forward.shape[:2]
        if exc_spatial.shape[:2] != (b, n) or exc_temporal.shape[:2] != (b, n):
            raise ValueError("excitation sequences are not aligned with the clip")
        exc_s = _flatten(self._consumable(exc_spatial))
        exc_t = _flatten(self._consumable(exc_temporal))
        fused = torch.cat(
            [
                self._fuse(_flatten(vf.forward), exc_s, exc_t, "fwd"),
                self._fuse(_flatten(vf.backward), exc_s, exc_t, "bwd"),
            ],
            dim=1,
        )
        saliency = self.saliency_decoder(fused, vf.skips, vf.out_size)
        return _unflatten(saliency, b, n)

    def video_branch(self, frames, exc_spatial, exc_temporal):
        return self.video_decode(self.video_features(frames), exc_spatial, exc_temporal)

    def forward(self, frames, flows, gts=None, alpha=0.0, use_gt=True) -> FrameOutputs:
        """frames (B, N, 3, H, W), flows (B, N, 2, H, W), gts (B, N, 1, H, W) or None."""
        if frames.dim() != 5 or flows.shape[:2] != frames.shape[:2] or flows.shape[-2:] != frames.shape[-2:]:
            raise ValueError(f"misaligned inputs: frames {tuple(frames.shape)}, flows {tuple(flows.shape)}")
        b, n = frames.shape[:2]
        gt_flat = _flatten(gts) if (use_gt and gts is not None) else None
        sal_s, exc_s = self.spatial_branch(_flatten(frames), gt_flat, alpha)
        sal_t, exc_t = self.temporal_branch(_flatten(flows), exc_s, gt_flat, alpha)
        exc_s, exc_t = _unflatten(exc_s, b, n), _unflatten(exc_t, b, n)
        sal_v = self.video_branch(frames, exc_s, exc_t)
        return FrameOutputs(_unflatten(sal_s, b, n), _unflatten(sal_t, b, n), sal_v, exc_s, exc_t)
