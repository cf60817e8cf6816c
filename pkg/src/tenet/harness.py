"""Alternating-branch training, checkpoints and inference with online excitation."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from tenet.config import TrainConfig
from tenet.data import VideoClip, flip_clip, list_clips, load_clip, preprocess, resize_clip, save_map
from tenet.excitation import curriculum_state, make_excitation_map
from tenet.losses import branch_loss, total_loss
from tenet.model import TENet

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TENETCKP"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIQ32s")

KINDS = ("spatial-image", "temporal-flow", "full-video")
ONLINE_MODES = ("both", "spatial", "temporal")
DEFAULT_MAX_ONLINE_ITERS = 20
LOG_FIELDS = ["epoch", "iter", "branch", "bce", "ssim", "iou", "total", "alpha", "lr"]


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class CheckpointRecord:
    model_state: dict
    optimizer_state: dict
    epoch: int
    alpha: float
    stage: int
    config: dict
    fingerprint: str
    version: int = CHECKPOINT_VERSION

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)


def save_checkpoint(record: CheckpointRecord, path) -> None:
    """Header (magic, version, payload length, sha256) followed by a torch payload."""
    buf = io.BytesIO()
    torch.save(
        {
            "model_state": record.model_state,
            "optimizer_state": record.optimizer_state,
            "curriculum": [record.epoch, record.alpha, record.stage],
            "config": record.config,
            "fingerprint": record.fingerprint,
        },
        buf,
    )
    payload = buf.getvalue()
    header = _HEADER.pack(CHECKPOINT_MAGIC, record.version, len(payload), hashlib.sha256(payload).digest())
    Path(path).write_bytes(header + payload)


def load_checkpoint(path) -> CheckpointRecord:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: checksum failure (truncated header)")
    magic, version, length, digest = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    payload = raw[_HEADER.size :]
    if len(payload) != length or hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum failure")
    data = torch.load(io.BytesIO(payload), weights_only=True)
    epoch, alpha, stage = data["curriculum"]
    return CheckpointRecord(
        data["model_state"], data["optimizer_state"], epoch, alpha, stage, data["config"], data["fingerprint"], version
    )


def build_model(config: TrainConfig) -> TENet:
    torch.manual_seed(config.seed)
    return TENet(config.model_config())


def model_from_checkpoint(record: CheckpointRecord) -> TENet:
    model = TENet(record.train_config.model_config())
    model.load_state_dict(record.model_state)
    model.eval()
    return model


def cosine_lr(iteration, total, lr_init, lr_final):
    """Cosine decay from lr_init at iteration 0 to lr_final at iteration total - 1."""
    if total <= 1:
        return lr_final
    progress = iteration / (total - 1)
    return lr_final + 0.5 * (lr_init - lr_final) * (1 + math.cos(math.pi * progress))


# --------------------------------------------------------------------------- data


def _to_tensors(clips):
    """Stack equally-shaped clips into (B, N, C, H, W) tensors."""
    frames = torch.from_numpy(np.stack([c.frames for c in clips])).permute(0, 1, 4, 2, 3).contiguous()
    flows = torch.from_numpy(np.stack([c.flows for c in clips])).permute(0, 1, 4, 2, 3).contiguous()
    masks = torch.from_numpy(np.stack([c.masks for c in clips]))[:, :, None].contiguous()
    return frames, flows, masks


def _load_corpus(root, size, need_masks=True):
    clips = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for clip_dir in list_clips(root):
            clip = resize_clip(load_clip(clip_dir), size)
            if need_masks and clip.masks is None:
                raise FileNotFoundError(f"{clip_dir}: training needs ground-truth masks")
            clips.append(clip)
    if not clips:
        raise FileNotFoundError(f"no clips under {root}")
    return clips


class TrainingData:
    """The three sample corpora: single frames, single flow fields and clip windows."""

    def __init__(self, config: TrainConfig):
        self.config = config
        size = config.image_size
        self.images = [
            clip.window(n, 1) for clip in _load_corpus(config.dataset("image"), size) for n in range(len(clip))
        ]
        self.flows = [clip.window(n, 1) for clip in _load_corpus(config.dataset("flow"), size) for n in range(len(clip))]
        span = (config.clip_length - 1) * config.frame_stride + 1
        self.videos = []
        for clip in _load_corpus(config.dataset("video"), size):
            for start in range(0, len(clip) - span + 1, span):
                self.videos.append(clip.window(start, config.clip_length, config.frame_stride))
        if not self.videos:
            raise FileNotFoundError(f"no clip has {span} frames for a training window")

    def batches(self, epoch):
        """Round-robin list of (kind, batch tensors) for one epoch."""
        cfg = self.config
        frame_batch = cfg.batch_size * cfg.clip_length
        queues = []
        for k, (samples, size) in enumerate(
            ((self.images, frame_batch), (self.flows, frame_batch), (self.videos, cfg.batch_size))
        ):
            rng = np.random.default_rng([cfg.seed, epoch, k])
            order = rng.permutation(len(samples))
            flips = rng.random((len(samples), 2)) < 0.5
            augmented = [flip_clip(samples[i], bool(flips[i, 0]), bool(flips[i, 1])) for i in order]
            # single-frame samples become (batch, 1, ...) tensors
            chunks = [augmented[i : i + size] for i in range(0, len(augmented), size)]
            queues.append([(KINDS[k], _to_tensors(chunk)) for chunk in chunks])
        out = []
        for i in range(max(len(q) for q in queues)):
            out.extend(q[i] for q in queues if i < len(q))
        return out


# ----------------------------------------------------------------------- training


@dataclass
class EpochSummary:
    epoch: int
    alpha: float
    stage: int
    lr: float
    losses: dict = field(default_factory=dict)  # kind -> mean loss over that kind's iterations

    @property
    def total(self):
        """Mean full objective over the epoch's full-video iterations."""
        return self.losses["full-video"]


@dataclass
class TrainResult:
    record: CheckpointRecord
    epochs: list
    checkpoint: Path
    log_path: Path


def _frames_flat(t):
    return t.reshape(-1, *t.shape[2:])


def _step_loss(model, kind, batch, alpha, window):
    frames, flows, masks = batch
    if kind == "spatial-image":
        sal, _ = model.spatial_branch(_frames_flat(frames))
        return {"spatial": branch_loss(sal, _frames_flat(masks), window)}
    if kind == "temporal-flow":
        gt = _frames_flat(masks)
        if alpha == 1:
            exc_s = gt
        else:
            with torch.no_grad():
                sal_s, _ = model.spatial_branch(_frames_flat(frames))
            exc_s = make_excitation_map(gt, sal_s, alpha)
        sal_t, _ = model.temporal_branch(_frames_flat(flows), exc_s)
        return {"temporal": branch_loss(sal_t, gt, window)}
    outputs = model(frames, flows, masks, alpha=alpha, use_gt=True)
    return total_loss(outputs, masks, window).branches


def train(config: TrainConfig, data: TrainingData | None = None, log=print, stop=None) -> TrainResult:
    """Run the alternating schedule for ``config.epochs`` epochs.

    ``stop`` is an optional predicate on each EpochSummary; when it returns True
    training ends after that epoch. The learning-rate schedule always spans the
    configured number of epochs, so a stopped run matches a prefix of a full one.
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = data or TrainingData(config)
    model = build_model(config)
    model.train()
    optimizer = torch.optim.SGD(
        model.parameters(), lr=config.lr_init, momentum=config.momentum, weight_decay=config.weight_decay
    )
    per_epoch = len(data.batches(1))
    total_iters = per_epoch * config.epochs
    log_path = out_dir / "loss_log.csv"
    summaries = []
    iteration = 0
    state = curriculum_state(1)
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
        for epoch in range(1, config.epochs + 1):
            state = curriculum_state(epoch)
            sums = {k: [] for k in KINDS}
            lr = config.lr_init
            for kind, batch in data.batches(epoch):
                lr = cosine_lr(iteration, total_iters, config.lr_init, config.lr_final)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                parts = _step_loss(model, kind, batch, state.alpha, config.ssim_window)
                loss = sum(p.total for p in parts.values())
                if not torch.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite {kind} loss at epoch {epoch}, iteration {iteration}: "
                        + ", ".join(f"{b}: bce={p.bce.item():.4g} ssim={p.ssim.item():.4g} iou={p.iou.item():.4g}" for b, p in parts.items())
                    )
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                bce = sum(p.bce.item() for p in parts.values())
                ssim = sum(p.ssim.item() for p in parts.values())
                iou = sum(p.iou.item() for p in parts.values())
                writer.writerow([epoch, iteration, kind, f"{bce:.6g}", f"{ssim:.6g}", f"{iou:.6g}", f"{loss.item():.6g}", f"{state.alpha:.6g}", f"{lr:.6g}"])
                sums[kind].append(loss.item())
                if kind == "full-video":
                    for branch, p in parts.items():
                        sums.setdefault(f"full-video/{branch}", []).append(p.total.item())
                iteration += 1
            summary = EpochSummary(epoch, state.alpha, state.stage, lr, {k: float(np.mean(v)) for k, v in sums.items() if v})
            summaries.append(summary)
            log(
                f"epoch {epoch:3d}  stage {state.stage}  alpha {state.alpha:.3f}  lr {lr:.2e}  loss {summary.total:.4f}"
                + "".join(f"  {b} {summary.losses.get('full-video/' + b, float('nan')):.1f}" for b in ("spatial", "temporal", "video"))
            )
            if stop is not None and stop(summary):
                break
            if config.checkpoint_every and epoch % config.checkpoint_every == 0 and epoch != config.epochs:
                save_checkpoint(_record(model, optimizer, state, config), out_dir / f"epoch_{epoch:03d}.ckpt")
    record = _record(model, optimizer, state, config)
    final = out_dir / "final.ckpt"
    save_checkpoint(record, final)
    _write_epoch_log(out_dir / "epochs.csv", summaries)
    return TrainResult(record, summaries, final, log_path)


def _record(model, optimizer, state, config):
    return CheckpointRecord(
        {k: v.detach().clone() for k, v in model.state_dict().items()},
        optimizer.state_dict(),
        state.epoch,
        state.alpha,
        state.stage,
        config.to_dict(),
        config.fingerprint(),
    )


def _write_epoch_log(path, summaries):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "stage", "alpha", "lr", *KINDS])
        for s in summaries:
            writer.writerow([s.epoch, s.stage, f"{s.alpha:.6g}", f"{s.lr:.6g}", *(f"{s.losses.get(k, float('nan')):.6g}" for k in KINDS)])


# ---------------------------------------------------------------------- inference


@torch.no_grad()
def online_excitation(model: TENet, frames, flows, online_iters: int, mode: str = "both"):
    """Stage-3 forward pass followed by ``online_iters`` rounds that feed S^v back as excitation.

    ``frames`` (B, N, 3, H, W) and ``flows`` (B, N, 2, H, W). Returns a list with
    the S^v of every round, round 0 first.
    """
    if mode not in ONLINE_MODES:
        raise ValueError(f"online mode must be one of {ONLINE_MODES}")
    b, n = frames.shape[:2]
    size = frames.shape[-2:]
    sal_s, exc_s = model.spatial_branch(_frames_flat(frames))
    encoded = model.temporal_features(_frames_flat(flows))
    exc_t = model._map(None, model.temporal_decode(encoded, exc_s, size), 0.0)
    video = model.video_features(frames)

    def unflat(x):
        return x.reshape(b, n, *x.shape[1:])

    rounds = [model.video_decode(video, unflat(exc_s), unflat(exc_t))]
    for _ in range(online_iters):
        prev = _frames_flat(rounds[-1])
        if mode == "both":
            new_s, new_t = prev, prev
        elif mode == "spatial":
            new_s = prev
            new_t = model._map(None, model.temporal_decode(encoded, prev, size), 0.0)
        else:
            new_s, new_t = exc_s, prev
        rounds.append(model.video_decode(video, unflat(new_s), unflat(new_t)))
    return rounds


def infer(checkpoint, clip: VideoClip, online_iters: int = 0, mode: str = "both", max_iters: int = DEFAULT_MAX_ONLINE_ITERS, size=None):
    """Saliency maps (N, H, W) for ``clip`` at its own resolution, without ground truth.

    ``checkpoint`` is a CheckpointRecord or an already-built TENet. The clip is
    resized to the training resolution of the record (or ``size``) first.
    """
    if online_iters < 0:
        raise ValueError("online_iters must be >= 0")
    if online_iters > max_iters:
        raise ValueError(f"{online_iters} online iterations exceed the cap of {max_iters}")
    if isinstance(checkpoint, CheckpointRecord):
        model = model_from_checkpoint(checkpoint)
        size = size or checkpoint.train_config.image_size
    else:
        model = checkpoint
    model.eval()
    prepared = preprocess(clip, training=False, seed=0, size=tuple(size or clip.size))
    dtype = next(model.parameters()).dtype
    frames = torch.from_numpy(prepared.frames).permute(0, 3, 1, 2)[None].to(dtype)
    flows = torch.from_numpy(prepared.flows).permute(0, 3, 1, 2)[None].to(dtype)
    sal = online_excitation(model, frames, flows, online_iters, mode)[-1][0]
    if tuple(sal.shape[-2:]) != tuple(clip.size):
        sal = torch.nn.functional.interpolate(sal, size=tuple(clip.size), mode="bilinear", align_corners=False)
    return sal[:, 0].clamp(0, 1).cpu().numpy()


def predict_dataset(record: CheckpointRecord, data_root, out_dir, online_iters=0, mode="both", max_iters=DEFAULT_MAX_ONLINE_ITERS):
    """Write 8-bit predictions for every clip under ``data_root`` into ``out_dir/<clip>/masks``."""
    model = model_from_checkpoint(record)
    size = record.train_config.image_size
    out_dir = Path(out_dir)
    written = {}
    for clip_dir in list_clips(data_root):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            clip = load_clip(clip_dir)
        maps = infer(model, clip, online_iters, mode, max_iters, size=size)
        target = out_dir / clip.name / "masks"
        target.mkdir(parents=True, exist_ok=True)
        for n, m in enumerate(maps):
            save_map(m, target / f"{n:05d}.png")
        written[clip.name] = len(maps)
    return written
